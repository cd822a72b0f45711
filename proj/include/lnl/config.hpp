#ifndef LNL_CONFIG_HPP
#define LNL_CONFIG_HPP

#include <cstddef>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace lnl {

enum class FfnVariant { mlp, locally_ff };

inline std::string to_string(FfnVariant v) { return v == FfnVariant::mlp ? "mlp" : "locally_ff"; }

inline FfnVariant parse_ffn_variant(const std::string& s) {
    if (s == "mlp") return FfnVariant::mlp;
    if (s == "locally_ff" || s == "locally-ff" || s == "loc") return FfnVariant::locally_ff;
    throw std::invalid_argument("unknown ffn variant '" + s + "' (expected mlp or locally_ff)");
}

/// Architectural hyperparameters of an LNL network.
struct LnlConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;   // p: visual sentence side
    std::size_t word_size = 4;    // s: visual word side
    std::size_t word_dim = 16;    // c
    std::size_t sentence_dim = 64;  // d
    std::size_t depth = 4;        // L
    std::size_t inner_heads = 2;
    std::size_t outer_heads = 4;
    std::size_t ffn_ratio = 4;    // gamma
    std::size_t dw_kernel = 3;    // k
    FfnVariant ffn_variant = FfnVariant::locally_ff;
    bool moex_enabled = false;
    double moex_lambda = 0.9;
    std::size_t num_classes = 10;

    static constexpr std::size_t channels = 3;

    std::size_t patch_grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return patch_grid() * patch_grid(); }  // n
    std::size_t word_grid() const { return patch_size / word_size; }
    std::size_t words_per_patch() const { return word_grid() * word_grid(); }  // m

    void validate() const {
        auto fail = [](const std::string& what) { throw std::invalid_argument("invalid LnlConfig: " + what); };
        if (image_size == 0 || patch_size == 0 || word_size == 0) fail("sizes must be positive");
        if (image_size % patch_size != 0) {
            fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                 std::to_string(patch_size));
        }
        if (patch_size % word_size != 0) {
            fail("patch_size " + std::to_string(patch_size) + " is not divisible by word_size " +
                 std::to_string(word_size));
        }
        if (word_dim == 0 || sentence_dim == 0 || depth == 0 || ffn_ratio == 0) fail("dims must be positive");
        if (inner_heads == 0 || word_dim % inner_heads != 0) fail("word_dim must be divisible by inner_heads");
        if (outer_heads == 0 || sentence_dim % outer_heads != 0) fail("sentence_dim must be divisible by outer_heads");
        if (dw_kernel % 2 == 0) fail("dw_kernel must be odd");
        if (!(moex_lambda > 0.0 && moex_lambda < 1.0)) fail("moex_lambda must lie in (0, 1)");
        if (num_classes < 2) fail("num_classes must be at least 2");
    }

    /// UTF-8 key=value lines, one per field.
    std::string to_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "image_size=" << image_size << '\n'
           << "patch_size=" << patch_size << '\n'
           << "word_size=" << word_size << '\n'
           << "word_dim=" << word_dim << '\n'
           << "sentence_dim=" << sentence_dim << '\n'
           << "depth=" << depth << '\n'
           << "inner_heads=" << inner_heads << '\n'
           << "outer_heads=" << outer_heads << '\n'
           << "ffn_ratio=" << ffn_ratio << '\n'
           << "dw_kernel=" << dw_kernel << '\n'
           << "ffn_variant=" << to_string(ffn_variant) << '\n'
           << "moex_enabled=" << (moex_enabled ? "true" : "false") << '\n'
           << "moex_lambda=" << moex_lambda << '\n'
           << "num_classes=" << num_classes << '\n';
        return os.str();
    }

    /// Applies one key=value setting; unknown keys are rejected.
    void set(const std::string& key, const std::string& value) {
        auto as_size = [&] {
            std::size_t pos = 0;
            unsigned long long v = std::stoull(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("bad integer for " + key + ": " + value);
            return static_cast<std::size_t>(v);
        };
        if (key == "image_size") image_size = as_size();
        else if (key == "patch_size") patch_size = as_size();
        else if (key == "word_size") word_size = as_size();
        else if (key == "word_dim") word_dim = as_size();
        else if (key == "sentence_dim") sentence_dim = as_size();
        else if (key == "depth") depth = as_size();
        else if (key == "inner_heads") inner_heads = as_size();
        else if (key == "outer_heads") outer_heads = as_size();
        else if (key == "ffn_ratio") ffn_ratio = as_size();
        else if (key == "dw_kernel") dw_kernel = as_size();
        else if (key == "ffn_variant") ffn_variant = parse_ffn_variant(value);
        else if (key == "moex_enabled") moex_enabled = (value == "true" || value == "1");
        else if (key == "moex_lambda") moex_lambda = std::stod(value);
        else if (key == "num_classes") num_classes = as_size();
        else throw std::invalid_argument("unknown LnlConfig key '" + key + "'");
    }

    static LnlConfig from_text(const std::string& text) {
        LnlConfig cfg;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos) throw std::invalid_argument("malformed config line '" + line + "'");
            cfg.set(line.substr(0, eq), line.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }

    bool operator==(const LnlConfig&) const = default;
};

namespace presets {

/// Tiny: TNT-T dimensions with the locality FFN.
inline LnlConfig lnl_ti(std::size_t num_classes = 43) {
    LnlConfig c;
    c.image_size = 224;
    c.patch_size = 16;
    c.word_size = 4;
    c.word_dim = 24;
    c.sentence_dim = 192;
    c.depth = 12;
    c.inner_heads = 4;
    c.outer_heads = 3;
    c.num_classes = num_classes;
    return c;
}

/// Small: TNT-S dimensions with the locality FFN.
inline LnlConfig lnl_s(std::size_t num_classes = 43) {
    LnlConfig c = lnl_ti(num_classes);
    c.sentence_dim = 384;
    c.outer_heads = 6;
    return c;
}

/// Desk-scale config for CPU training.
inline LnlConfig lnl_micro(std::size_t num_classes = 4) {
    LnlConfig c;
    c.num_classes = num_classes;
    return c;
}

inline LnlConfig by_name(const std::string& name, std::size_t num_classes) {
    if (name == "ti" || name == "lnl-ti") return lnl_ti(num_classes);
    if (name == "s" || name == "lnl-s") return lnl_s(num_classes);
    if (name == "micro" || name == "lnl-micro") return lnl_micro(num_classes);
    throw std::invalid_argument("unknown model preset '" + name + "' (expected ti, s or micro)");
}

}  // namespace presets

}  // namespace lnl

#endif
