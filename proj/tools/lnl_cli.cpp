#if __has_include(<CLI11.hpp>)
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "lnl/lnl.hpp"

using namespace lnl;
namespace fs = std::filesystem;

namespace {

/// Flat "section.key" -> value settings from a key=value file plus overrides.
using Settings = std::map<std::string, std::string>;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    std::string out = s.substr(b, e - b + 1);
    if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
    return out;
}

void apply_assignment(Settings& settings, const std::string& section, const std::string& line) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    settings[key] = trim(line.substr(eq + 1));
}

void read_config_file(Settings& settings, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file " + path);
    std::string section;
    for (std::string line; std::getline(is, line);) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        apply_assignment(settings, section, line);
    }
}

bool as_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

/// Accepts "0.0157" or a fraction such as "4/255".
double parse_number(const std::string& text) {
    const auto slash = text.find('/');
    std::size_t pos = 0;
    if (slash == std::string::npos) {
        double v = std::stod(text, &pos);
        if (pos != text.size()) throw std::invalid_argument("bad number '" + text + "'");
        return v;
    }
    double num = std::stod(text.substr(0, slash));
    double den = std::stod(text.substr(slash + 1));
    if (den == 0.0) throw std::invalid_argument("zero denominator in '" + text + "'");
    return num / den;
}

struct CommonOptions {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string dataset;
    std::string data_dir;
};

void add_common(CLI::App* cmd, CommonOptions& opt) {
    cmd->add_option("-c,--config", opt.config_file, "key=value config file ([section] headers allowed)");
    cmd->add_option("-s,--set", opt.overrides, "override, e.g. --set moex.enabled=true");
    cmd->add_option("--dataset", opt.dataset, "gtsrb, cifar10 or synth")->check(CLI::IsMember({"gtsrb", "cifar10", "synth"}));
    cmd->add_option("--data-dir", opt.data_dir, "dataset root")->envname("LNL_DATA_DIR");
}

Settings resolve(const CommonOptions& opt) {
    Settings s;
    if (!opt.config_file.empty()) read_config_file(s, opt.config_file);
    for (const auto& o : opt.overrides) apply_assignment(s, "", o);
    if (!opt.dataset.empty()) s["data.dataset"] = opt.dataset;
    if (!opt.data_dir.empty()) s["data.dir"] = opt.data_dir;
    return s;
}

std::string get(const Settings& s, const std::string& key, const std::string& fallback) {
    auto it = s.find(key);
    return it == s.end() ? fallback : it->second;
}

std::size_t get_size(const Settings& s, const std::string& key, std::size_t fallback) {
    auto it = s.find(key);
    return it == s.end() ? fallback : static_cast<std::size_t>(std::stoull(it->second));
}

std::string dataset_name(const Settings& s) {
    std::string d = get(s, "data.dataset", "synth");
    if (d != "synth" && d != "gtsrb" && d != "cifar10") throw std::invalid_argument("unknown dataset '" + d + "'");
    return d;
}

std::size_t dataset_classes(const Settings& s) {
    const auto d = dataset_name(s);
    if (d == "gtsrb") return kGtsrbClasses;
    if (d == "cifar10") return 10;
    return get_size(s, "data.classes", 4);
}

LnlConfig model_config(const Settings& s) {
    const auto d = dataset_name(s);
    LnlConfig cfg = presets::by_name(get(s, "model.preset", d == "synth" ? "micro" : "ti"), dataset_classes(s));
    if (d == "cifar10") cfg.image_size = get_size(s, "model.image_size", 32);
    for (const auto& [key, value] : s) {
        if (key.rfind("model.", 0) != 0 || key == "model.preset" || key == "model.seed") continue;
        cfg.set(key.substr(6), value);
    }
    if (auto it = s.find("moex.enabled"); it != s.end()) cfg.moex_enabled = as_bool(it->second);
    if (auto it = s.find("moex.lambda"); it != s.end()) cfg.moex_lambda = parse_number(it->second);
    cfg.num_classes = dataset_classes(s);
    cfg.validate();
    return cfg;
}

TrainConfig train_config(const Settings& s, const LnlConfig& model) {
    const auto d = dataset_name(s);
    TrainConfig tc = d == "gtsrb" ? TrainConfig::gtsrb() : d == "cifar10" ? TrainConfig::cifar10() : TrainConfig{};
    for (const auto& [key, value] : s) {
        if (key == "train.batch_size") tc.batch_size = std::stoull(value);
        else if (key == "train.epochs") tc.epochs = std::stoull(value);
        else if (key == "train.learning_rate" || key == "train.lr") tc.learning_rate = parse_number(value);
        else if (key == "train.momentum") tc.momentum = parse_number(value);
        else if (key == "train.weight_decay") tc.weight_decay = parse_number(value);
        else if (key == "train.schedule") {
            if (value != "constant" && value != "cosine") throw std::invalid_argument("schedule must be constant or cosine");
            tc.schedule = value == "cosine" ? LrSchedule::cosine : LrSchedule::constant;
        } else if (key == "train.seed") tc.seed = std::stoull(value);
        else if (key == "train.augment") tc.augment = as_bool(value);
        else if (key == "train.checkpoint") tc.checkpoint_path = value;
        else if (key == "train.metrics") tc.metrics_path = value;
        else if (key == "moex.layer") tc.moex_layer = std::stoull(value);
        else if (key == "moex.seed") tc.moex_seed = std::stoull(value);
        else if (key.rfind("train.", 0) == 0 || (key.rfind("moex.", 0) == 0 && key != "moex.enabled" && key != "moex.lambda")) {
            throw std::invalid_argument("unknown setting '" + key + "'");
        }
    }
    tc.moex = model.moex_enabled;
    tc.moex_lambda = model.moex_lambda;
    tc.validate();
    return tc;
}

DatasetSplits load_data(const Settings& s, std::size_t image_size) {
    const auto d = dataset_name(s);
    if (d == "synth") {
        const std::size_t classes = dataset_classes(s);
        const std::uint64_t seed = get_size(s, "data.seed", 1001);
        DatasetSplits splits;
        splits.train = synth_shapes(get_size(s, "data.train_size", 2000), classes, image_size, seed);
        splits.val = synth_shapes(get_size(s, "data.val_size", 500), classes, image_size, seed + 1);
        splits.test = synth_shapes(get_size(s, "data.test_size", 500), classes, image_size, seed + 2);
        return splits;
    }
    const std::string dir = get(s, "data.dir", "");
    if (dir.empty()) throw std::invalid_argument("--data-dir (or LNL_DATA_DIR) is required for " + d);
    if (d == "cifar10") {
        if (image_size != kCifarSide) throw std::invalid_argument("CIFAR-10 models need image_size=32");
        auto splits = load_cifar10(dir);
        splits.val = splits.test;
        return splits;
    }
    auto splits = load_gtsrb(dir, image_size);
    if (splits.test.empty()) splits.test = splits.val;
    return splits;
}

const Dataset& pick_split(const DatasetSplits& splits, const std::string& name) {
    if (name == "train") return splits.train;
    if (name == "val") return splits.val;
    if (name == "test") return splits.test;
    throw std::invalid_argument("split must be train, val or test");
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int run_train(const CommonOptions& opt, const std::string& out_path, const std::string& metrics_path) {
    Settings s = resolve(opt);
    if (!out_path.empty()) s["train.checkpoint"] = out_path;
    if (!metrics_path.empty()) s["train.metrics"] = metrics_path;
    const LnlConfig cfg = model_config(s);
    const TrainConfig tc = train_config(s, cfg);
    auto splits = load_data(s, cfg.image_size);
    LnlModel model(cfg, get_size(s, "model.seed", tc.seed));
    std::cerr << "training " << model.num_parameters() << " parameters on " << splits.train.size()
              << " images (" << dataset_name(s) << ")\n";
    auto result = train(model, splits.train, splits.val, tc, [](const MetricsRecord& r) {
        std::cerr << "epoch " << r.epoch << " loss " << r.train_loss << " val_top1 " << r.val_top1 << " val_top5 "
                  << r.val_top5 << '\n';
    });
    if (tc.checkpoint_path.empty()) std::cerr << "note: no checkpoint path set, model not saved\n";
    std::cout << "best_val_top1=" << result.best_val_top1 << " best_epoch=" << result.best_epoch << '\n';
    return 0;
}

int run_eval(const CommonOptions& opt, const std::string& checkpoint, const std::string& split) {
    Settings s = resolve(opt);
    LnlModel model = load_checkpoint(checkpoint);
    if (!s.count("data.classes")) s["data.classes"] = std::to_string(model.config().num_classes);
    auto splits = load_data(s, model.config().image_size);
    auto r = evaluate(model, pick_split(splits, split));
    std::cout << std::setprecision(6) << "split=" << split << " samples=" << r.samples << " top1=" << r.top1
              << " top5=" << r.top5 << '\n';
    return 0;
}

struct AttackOptions {
    std::string checkpoint;
    std::string family = "fgsm";
    std::string eps = "4/255";
    std::string alpha;
    std::size_t steps = 5;
    std::string split = "val";
    std::size_t limit = 0;
    std::string out;
};

int run_attack(const CommonOptions& opt, const AttackOptions& a) {
    Settings s = resolve(opt);
    LnlModel model = load_checkpoint(a.checkpoint);
    if (!s.count("data.classes")) s["data.classes"] = std::to_string(model.config().num_classes);
    auto splits = load_data(s, model.config().image_size);
    const Dataset& data = pick_split(splits, a.split);
    const std::size_t limit = a.limit == 0 ? data.size() : a.limit;

    std::ofstream file;
    if (!a.out.empty()) {
        file.open(a.out);
        if (!file) throw std::runtime_error("cannot write " + a.out);
    }
    std::ostream& os = a.out.empty() ? std::cout : file;
    os << "model,attack,eps,clean_acc,robust_acc\n";
    const std::string model_name = fs::path(a.checkpoint).stem().string();
    for (const auto& family : split_list(a.family)) {
        for (const auto& eps_text : split_list(a.eps)) {
            const double eps = parse_number(eps_text);
            AttackSpec spec = parse_attack_family(family) == AttackFamily::fgsm
                                  ? AttackSpec::fgsm(eps)
                                  : AttackSpec::pgd(eps, a.alpha.empty() ? eps / 4.0 : parse_number(a.alpha), a.steps);
            if (eps == 0.0) spec.epsilon = 0.0;
            auto r = robust_accuracy(model, batch_source(data, 50, limit), spec);
            os << model_name << ',' << family << ',' << std::setprecision(10) << eps << ',' << std::setprecision(6)
               << r.clean_accuracy << ',' << r.robust_accuracy << '\n';
        }
    }
    return 0;
}

int run_attn_map(const CommonOptions& opt, const std::string& checkpoint, std::size_t index, int layer,
                 const std::string& split, const std::string& out_prefix) {
    Settings s = resolve(opt);
    LnlModel model = load_checkpoint(checkpoint);
    if (!s.count("data.classes")) s["data.classes"] = std::to_string(model.config().num_classes);
    auto splits = load_data(s, model.config().image_size);
    const Dataset& data = pick_split(splits, split);
    if (index >= data.size()) throw std::out_of_range("sample index beyond split size");
    std::vector<std::size_t> idx{index};
    auto batch = data.batch(idx);
    const std::size_t chosen = layer < 0 ? model.config().depth - 1 : static_cast<std::size_t>(layer);
    auto map = export_attention(model, batch.images, chosen);
    write_heatmap_csv(out_prefix + ".csv", map.heatmap);
    write_pgm(out_prefix + ".pgm", map.heatmap.data(), map.heatmap.shape()[0], map.heatmap.shape()[1]);
    std::cout << "label=" << batch.labels[0] << " predicted=" << map.predicted << " confidence=" << map.confidence
              << " grid=" << map.heatmap.shape()[0] << '\n';
    return 0;
}

int run_gradcheck(const CommonOptions& opt, double tolerance, std::uint64_t seed) {
    Settings s = resolve(opt);
    LnlConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.word_size = 4;
    cfg.word_dim = 8;
    cfg.sentence_dim = 16;
    cfg.depth = 2;
    cfg.inner_heads = 2;
    cfg.outer_heads = 2;
    cfg.num_classes = 3;
    for (const auto& [key, value] : s)
        if (key.rfind("model.", 0) == 0) cfg.set(key.substr(6), value);
    cfg.validate();
    LnlModel model(cfg, seed);
    Rng rng(seed + 1);
    std::vector<double> pixels(2 * 3 * cfg.image_size * cfg.image_size);
    for (auto& v : pixels) v = rng.uniform();
    Tensor images({2, 3, cfg.image_size, cfg.image_size}, std::move(pixels), true);
    std::vector<int> labels{0, static_cast<int>(cfg.num_classes - 1)};
    std::vector<Tensor> inputs{images};
    for (const auto& p : model.parameters()) inputs.push_back(p.tensor);
    auto result = gradcheck([&] { return cross_entropy(model.forward(images, Mode::train).logits, labels); }, inputs);
    std::cout << "max_relative_error=" << result.max_relative_error << " evaluations=" << result.evaluations
              << " tolerance=" << tolerance << '\n';
    return result.max_relative_error < tolerance ? 0 : 1;
}

int run_synth_gen(std::size_t n, std::size_t classes, std::size_t size, std::uint64_t seed, const std::string& out,
                  const std::string& preview) {
    auto data = synth_shapes(n, classes, size, seed);
    write_record_file(out, data);
    if (!preview.empty()) {
        fs::create_directories(preview);
        for (std::size_t i = 0; i < std::min<std::size_t>(n, 8); ++i) {
            std::vector<double> gray(size * size, 0.0);
            auto img = data.image(i);
            for (std::size_t p = 0; p < size * size; ++p)
                for (std::size_t c = 0; c < 3; ++c) gray[p] += img[c * size * size + p] / (3.0 * 255.0);
            write_pgm(fs::path(preview) / ("sample" + std::to_string(i) + "_class" + std::to_string(data.labels[i]) + ".pgm"),
                      gray, size, size);
        }
    }
    std::cout << "wrote " << n << " records of " << (1 + data.image_bytes()) << " bytes to " << out << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LNL vision transformer: training, evaluation and adversarial robustness"};
    app.require_subcommand(1);

    CommonOptions train_opt, eval_opt, attack_opt, attn_opt, gc_opt;
    std::string train_out, train_metrics;
    auto* train_cmd = app.add_subcommand("train", "train a model");
    add_common(train_cmd, train_opt);
    train_cmd->add_option("-o,--out", train_out, "best-validation checkpoint path");
    train_cmd->add_option("--metrics", train_metrics, "metrics CSV path");

    std::string eval_ckpt, eval_split = "val";
    auto* eval_cmd = app.add_subcommand("eval", "top-1/top-5 accuracy of a checkpoint");
    add_common(eval_cmd, eval_opt);
    eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
    eval_cmd->add_option("--split", eval_split);

    AttackOptions attack;
    auto* attack_cmd = app.add_subcommand("attack", "robust accuracy under FGSM/PGD (CSV output)");
    add_common(attack_cmd, attack_opt);
    attack_cmd->add_option("--checkpoint", attack.checkpoint)->required();
    attack_cmd->add_option("--attack", attack.family, "fgsm, pgd or a comma list");
    attack_cmd->add_option("--eps", attack.eps, "comma list, fractions allowed (4/255)");
    attack_cmd->add_option("--alpha", attack.alpha, "PGD step size (default eps/4)");
    attack_cmd->add_option("--steps", attack.steps, "PGD iterations");
    attack_cmd->add_option("--split", attack.split);
    attack_cmd->add_option("--limit", attack.limit, "evaluate only the first N samples");
    attack_cmd->add_option("-o,--out", attack.out, "CSV path (default stdout)");

    std::string attn_ckpt, attn_split = "val", attn_out = "attention";
    std::size_t attn_index = 0;
    int attn_layer = -1;
    auto* attn_cmd = app.add_subcommand("attn-map", "class-token attention heatmap for one sample");
    add_common(attn_cmd, attn_opt);
    attn_cmd->add_option("--checkpoint", attn_ckpt)->required();
    attn_cmd->add_option("--index", attn_index);
    attn_cmd->add_option("--layer", attn_layer, "outer block (default: last)");
    attn_cmd->add_option("--split", attn_split);
    attn_cmd->add_option("-o,--out", attn_out, "output prefix for .csv and .pgm");

    double gc_tol = 1e-3;
    std::uint64_t gc_seed = 0;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full model gradient");
    add_common(gc_cmd, gc_opt);
    gc_cmd->add_option("--tolerance", gc_tol);
    gc_cmd->add_option("--seed", gc_seed);

    std::size_t sg_n = 1000, sg_classes = 4, sg_size = 32;
    std::uint64_t sg_seed = 0;
    std::string sg_out, sg_preview;
    auto* sg_cmd = app.add_subcommand("synth-gen", "write a synthetic shape set as fixed-size binary records");
    sg_cmd->add_option("-n,--count", sg_n);
    sg_cmd->add_option("--classes", sg_classes);
    sg_cmd->add_option("--size", sg_size);
    sg_cmd->add_option("--seed", sg_seed);
    sg_cmd->add_option("-o,--out", sg_out)->required();
    sg_cmd->add_option("--preview", sg_preview, "directory for grayscale PGM previews");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train_cmd) return run_train(train_opt, train_out, train_metrics);
        if (*eval_cmd) return run_eval(eval_opt, eval_ckpt, eval_split);
        if (*attack_cmd) return run_attack(attack_opt, attack);
        if (*attn_cmd) return run_attn_map(attn_opt, attn_ckpt, attn_index, attn_layer, attn_split, attn_out);
        if (*gc_cmd) return run_gradcheck(gc_opt, gc_tol, gc_seed);
        if (*sg_cmd) return run_synth_gen(sg_n, sg_classes, sg_size, sg_seed, sg_out, sg_preview);
    } catch (const TrainingDiverged& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
