#ifndef LNL_TRAIN_HPP
#define LNL_TRAIN_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "lnl/adversarial.hpp"
#include "lnl/data.hpp"
#include "lnl/model.hpp"
#include "lnl/moex.hpp"
#include "lnl/serialize.hpp"

namespace lnl {

class TrainingDiverged : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class LrSchedule { constant, cosine };

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t epochs = 20;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;
    LrSchedule schedule = LrSchedule::constant;
    std::uint64_t seed = 0;
    bool moex = false;
    double moex_lambda = 0.9;
    std::size_t moex_layer = 0;
    std::uint64_t moex_seed = 0;
    bool augment = false;  // random horizontal flips
    std::string checkpoint_path;
    std::string metrics_path;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
        if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
        if (moex && batch_size < 2) throw std::invalid_argument("MoEx pairing needs batch size >= 2");
        if (moex) check_lambda(moex_lambda);
        if (momentum < 0.0 || weight_decay < 0.0) throw std::invalid_argument("momentum/weight decay must be >= 0");
    }

    /// Table-style regimes: GTSRB batch 50 / 100 epochs / lr 0.007, CIFAR-10 batch 128 / 150 epochs / lr 0.001.
    static TrainConfig gtsrb() {
        TrainConfig c;
        c.batch_size = 50;
        c.epochs = 100;
        c.learning_rate = 0.007;
        return c;
    }
    static TrainConfig cifar10() {
        TrainConfig c;
        c.batch_size = 128;
        c.epochs = 150;
        c.learning_rate = 0.001;
        return c;
    }
};

struct MetricsRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_top1 = 0.0;
    double val_top5 = 0.0;
    std::vector<std::pair<std::string, double>> extra;  // e.g. robust metrics per attack
};

/// SGD with momentum: v <- m*v + g + w*theta; theta <- theta - lr*v.
class Sgd {
  public:
    Sgd(ParamList params, double lr, double momentum = 0.9, double weight_decay = 0.0)
        : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
        for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
    }

    void set_learning_rate(double lr) { lr_ = lr; }
    double learning_rate() const { return lr_; }
    const std::vector<std::vector<double>>& velocity() const { return velocity_; }

    /// Applies one update from the accumulated gradients, then clears them.
    void step() {
        for (auto& p : params_) {
            if (!p.tensor.has_grad()) throw AutogradError("parameter " + p.name + " has no gradient");
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto theta = params_[i].tensor.mutable_data();
            auto g = params_[i].tensor.grad();
            auto& v = velocity_[i];
            for (std::size_t k = 0; k < theta.size(); ++k) {
                v[k] = momentum_ * v[k] + g[k] + weight_decay_ * theta[k];
                theta[k] -= lr_ * v[k];
            }
            params_[i].tensor.zero_grad();
        }
    }

  private:
    ParamList params_;
    std::vector<std::vector<double>> velocity_;
    double lr_;
    double momentum_;
    double weight_decay_;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Rank of the true class under a descending sort with lowest-index tie-break.
inline std::size_t label_rank(std::span<const double> row, int label) {
    const double target = row[static_cast<std::size_t>(label)];
    std::size_t rank = 0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (row[j] > target || (row[j] == target && j < static_cast<std::size_t>(label))) ++rank;
    }
    return rank;
}

/// Fraction of rows whose label is within the top k.
inline double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k) {
    if (logits.rank() != 2 || logits.shape()[0] != labels.size()) throw ShapeError("topk_accuracy: shape mismatch");
    if (labels.empty()) throw std::invalid_argument("topk_accuracy: empty batch");
    const std::size_t classes = logits.shape()[1];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        hits += label_rank(logits.data().subspan(i * classes, classes), labels[i]) < k;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

struct EvalResult {
    double top1 = 0.0;
    double top5 = 0.0;
    std::size_t samples = 0;
};

inline EvalResult evaluate(const LnlModel& model, const Dataset& split, std::size_t batch_size = 100) {
    if (split.empty()) throw std::invalid_argument("evaluate: empty split");
    NoGradGuard no_grad;
    std::size_t top1 = 0;
    std::size_t top5 = 0;
    const std::size_t classes = model.config().num_classes;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < split.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) idx.push_back(i);
        auto batch = split.batch(idx);
        Tensor logits = model.logits(batch.images);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto r = label_rank(logits.data().subspan(i * classes, classes), batch.labels[i]);
            top1 += r < 1;
            top5 += r < 5;
        }
    }
    const auto n = static_cast<double>(split.size());
    return {static_cast<double>(top1) / n, static_cast<double>(top5) / n, split.size()};
}

/// Sequential batches over a dataset (optionally the first `limit` samples), for robust_accuracy.
inline auto batch_source(const Dataset& data, std::size_t batch_size,
                         std::size_t limit = std::numeric_limits<std::size_t>::max()) {
    const std::size_t end = std::min(limit, data.size());
    return [&data, batch_size, end, next = std::size_t{0}](Tensor& images, std::vector<int>& labels) mutable {
        if (next >= end) return false;
        std::vector<std::size_t> idx;
        for (std::size_t i = next; i < std::min(end, next + batch_size); ++i) idx.push_back(i);
        next += idx.size();
        auto b = data.batch(idx);
        images = b.images;
        labels = b.labels;
        return true;
    };
}

// ---------------------------------------------------------------------------
// Checkpoints: "LNLC" | version u32 | config text (u64 length + UTF-8 key=value
// lines) | manifest (u32 count, then u32-length-prefixed names) | per
// parameter: u32-length-prefixed name + tensor in LNLT format.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {
inline void write_string(std::ostream& os, const std::string& s) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& is) {
    auto len = read_le<std::uint32_t>(is);
    if (len > (1u << 20)) throw FormatError("implausible string length in checkpoint");
    std::string s(len, '\0');
    if (!is.read(s.data(), len)) throw FormatError("truncated checkpoint string");
    return s;
}
}  // namespace io

inline void save_checkpoint(const std::string& path, const LnlModel& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    io::write_magic(os, "LNLC");
    io::write_le<std::uint32_t>(os, kCheckpointVersion);
    std::string text = model.config().to_text();
    io::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    auto params = model.parameters();
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) io::write_string(os, p.name);
    for (const auto& p : params) {
        io::write_string(os, p.name);
        write_tensor(os, p.tensor);
    }
    if (!os) throw std::runtime_error("failed writing " + path);
}

inline LnlModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    io::expect_magic(is, "LNLC");
    auto version = io::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    auto text_len = io::read_le<std::uint64_t>(is);
    if (text_len > (1u << 20)) throw FormatError("implausible config length");
    std::string text(text_len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(text_len))) throw FormatError("truncated config");
    LnlModel model(LnlConfig::from_text(text), 0);
    auto params = model.parameters();
    auto count = io::read_le<std::uint32_t>(is);
    if (count != params.size()) {
        throw FormatError("checkpoint has " + std::to_string(count) + " parameters, model expects " +
                          std::to_string(params.size()));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        if (io::read_string(is) != params[i].name) throw FormatError("checkpoint manifest does not match the model");
    }
    for (auto& p : params) {
        if (io::read_string(is) != p.name) throw FormatError("checkpoint tensor order does not match manifest");
        Tensor t = read_tensor(is);
        if (t.shape() != p.tensor.shape()) {
            throw FormatError("parameter " + p.name + " has shape " + shape_str(t.shape()) + ", expected " +
                              shape_str(p.tensor.shape()));
        }
        std::copy(t.data().begin(), t.data().end(), p.tensor.mutable_data().begin());
    }
    return model;
}

// ---------------------------------------------------------------------------
// Metrics log: CSV rows {epoch,split,metric,value}

class MetricsLog {
  public:
    MetricsLog() = default;
    explicit MetricsLog(const std::string& path) : os_(path) {
        if (!os_) throw std::runtime_error("cannot open metrics file " + path);
        os_ << "epoch,split,metric,value\n";
    }
    void append(std::size_t epoch, const std::string& split, const std::string& metric, double value) {
        if (!os_.is_open()) return;
        os_.precision(10);
        os_ << epoch << ',' << split << ',' << metric << ',' << value << '\n';
        os_.flush();
    }
    void append(const MetricsRecord& r) {
        append(r.epoch, "train", "loss", r.train_loss);
        append(r.epoch, "val", "top1", r.val_top1);
        append(r.epoch, "val", "top5", r.val_top5);
        for (const auto& [name, value] : r.extra) append(r.epoch, "val", name, value);
    }

  private:
    std::ofstream os_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
    std::vector<MetricsRecord> history;
    double best_val_top1 = -1.0;
    std::size_t best_epoch = 0;
};

using EpochCallback = std::function<void(const MetricsRecord&)>;

namespace detail {
inline Tensor flip_horizontal(const Tensor& images, Rng& rng) {
    const std::size_t batch = images.shape()[0];
    const std::size_t w = images.shape()[3];
    const std::size_t rows = images.numel() / (batch * w);
    std::vector<double> out(images.data().begin(), images.data().end());
    for (std::size_t b = 0; b < batch; ++b) {
        if (rng.uniform() >= 0.5) continue;
        for (std::size_t r = 0; r < rows; ++r) {
            auto* row = out.data() + (b * rows + r) * w;
            std::reverse(row, row + w);
        }
    }
    return Tensor(images.shape(), std::move(out));
}
}  // namespace detail

/**
 * Mini-batch SGD over `train`, evaluated on `val` after each epoch. When
 * cfg.moex is set, sentence moments are exchanged after block
 * cfg.moex_layer and the interpolated loss is used.
 */
inline TrainResult train(LnlModel& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("train: empty training split");
    if (cfg.moex && cfg.moex_layer >= model.config().depth) throw std::invalid_argument("moex layer out of range");
    Sgd optimizer(model.parameters(), cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    MetricsLog log = cfg.metrics_path.empty() ? MetricsLog() : MetricsLog(cfg.metrics_path);
    Rng moex_rng(cfg.moex_seed);
    Rng augment_rng(mix_seed(cfg.seed, 0xa11ce));
    TrainResult result;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (cfg.schedule == LrSchedule::cosine) {
            double progress = static_cast<double>(epoch - 1) / static_cast<double>(cfg.epochs);
            optimizer.set_learning_rate(cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
        }
        auto order = epoch_order(train_set.size(), cfg.seed, epoch);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
            auto batch = train_set.batch(idx);
            if (cfg.augment) batch.images = detail::flip_horizontal(batch.images, augment_rng);
            Tensor loss;
            try {
                if (cfg.moex && idx.size() >= 2) {
                    auto plan = make_moex_plan(idx.size(), cfg.moex_lambda, cfg.moex_layer, moex_rng);
                    MoexApplied applied;
                    auto out = model.forward(batch.images, Mode::train,
                                             moex_sentence_hook(plan, batch.labels, applied));
                    loss = moex_loss(out.logits, applied.labels_a, applied.labels_b, plan.lambda);
                } else {
                    loss = cross_entropy(model.forward(batch.images, Mode::train).logits, batch.labels);
                }
                backward(loss);
            } catch (const DomainError& e) {
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", sample offset " +
                                       std::to_string(start) + ": " + e.what());
            }
            optimizer.step();
            loss_sum += loss.item() * static_cast<double>(idx.size());
        }

        MetricsRecord record;
        record.epoch = epoch;
        record.train_loss = loss_sum / static_cast<double>(train_set.size());
        if (!val_set.empty()) {
            try {
                auto ev = evaluate(model, val_set);
                record.val_top1 = ev.top1;
                record.val_top5 = ev.top5;
            } catch (const DomainError& e) {
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                                       " (validation): " + e.what());
            }
        }
        log.append(record);
        if (record.val_top1 > result.best_val_top1) {
            result.best_val_top1 = record.val_top1;
            result.best_epoch = epoch;
            if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model);
        }
        result.history.push_back(record);
        if (on_epoch) on_epoch(record);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Attention maps

struct AttentionMap {
    Tensor heatmap;  // [grid, grid], min-max normalized
    int predicted = 0;
    double confidence = 0.0;
};

/**
 * Class-token attention row of one outer block, averaged over heads, on the
 * patch grid. A constant row maps to a uniform heatmap of ones.
 */
inline AttentionMap export_attention(const LnlModel& model, const Tensor& image, std::size_t layer) {
    if (layer >= model.config().depth) {
        throw std::out_of_range("attention layer " + std::to_string(layer) + " out of range (depth " +
                                std::to_string(model.config().depth) + ")");
    }
    Tensor batch = image.rank() == 3 ? reshape(image, {1, image.shape()[0], image.shape()[1], image.shape()[2]}) : image;
    if (batch.shape()[0] != 1) throw ShapeError("export_attention takes a single image");
    NoGradGuard no_grad;
    auto out = model.forward(batch, Mode::eval);
    const Tensor& attn = out.outer_attention[layer];  // [1, h, T, T]
    const std::size_t heads = attn.shape()[1];
    const std::size_t tokens = attn.shape()[2];
    const std::size_t n = tokens - 1;
    const std::size_t grid = exact_sqrt(n);
    std::vector<double> row(n, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < n; ++j) row[j] += attn[(h * tokens + 0) * tokens + 1 + j] / static_cast<double>(heads);
    auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double min_v = *lo;
    const double span = *hi - *lo;
    for (auto& v : row) v = span > 0.0 ? (v - min_v) / span : 1.0;

    Tensor probs = softmax(out.logits);
    AttentionMap map;
    map.heatmap = Tensor({grid, grid}, std::move(row));
    map.predicted = predict(out.logits)[0];
    map.confidence = probs[static_cast<std::size_t>(map.predicted)];
    return map;
}

inline void write_heatmap_csv(const std::string& path, const Tensor& heatmap) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os.precision(8);
    const std::size_t rows = heatmap.shape()[0];
    const std::size_t cols = heatmap.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) os << (c ? "," : "") << heatmap[r * cols + c];
        os << '\n';
    }
}

}  // namespace lnl

#endif
