#ifndef LNL_NN_HPP
#define LNL_NN_HPP

#include <cmath>
#include <string>
#include <vector>

#include "lnl/ops.hpp"
#include "lnl/rng.hpp"

namespace lnl {

/// A trainable tensor and its dotted path inside the model.
struct NamedParam {
    std::string name;
    Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

inline Tensor make_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

inline void fill_truncated_normal(Tensor& t, Rng& rng, double stddev) {
    for (auto& v : t.mutable_data()) v = rng.truncated_normal(stddev);
}

inline void fill_uniform(Tensor& t, Rng& rng, double bound) {
    for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
}

inline void fill_constant(Tensor& t, double value) {
    for (auto& v : t.mutable_data()) v = value;
}

struct Linear {
    Tensor weight;  // [out, in]
    Tensor bias;    // [out]

    Linear() = default;
    Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
        : weight(make_param({out_features, in_features})), bias(make_param({out_features})) {
        // Xavier/Glorot uniform, zero bias
        fill_uniform(weight, rng, std::sqrt(6.0 / static_cast<double>(in_features + out_features)));
    }

    std::size_t in_features() const { return weight.shape()[1]; }
    std::size_t out_features() const { return weight.shape()[0]; }

    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;
    double eps = 1e-6;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim, double eps_ = 1e-6)
        : gamma(Tensor::ones({dim}, true)), beta(make_param({dim})), eps(eps_) {
        if (!(eps > 0.0)) throw std::invalid_argument("LayerNorm eps must be positive");
    }

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

struct MsaOutput {
    Tensor out;   // [B, T, d]
    Tensor attn;  // [B, h, T, T]
};

/// Multi-head scaled dot-product self-attention.
struct MultiHeadAttention {
    std::size_t heads = 1;
    Linear query, key, value, proj;

    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t heads_, Rng& rng) : heads(heads_) {
        if (heads == 0 || dim % heads != 0) {
            throw std::invalid_argument("attention dim " + std::to_string(dim) + " is not divisible by " +
                                        std::to_string(heads) + " heads");
        }
        query = Linear(dim, dim, rng);
        key = Linear(dim, dim, rng);
        value = Linear(dim, dim, rng);
        proj = Linear(dim, dim, rng);
    }

    MsaOutput operator()(const Tensor& x) const {
        if (x.rank() != 3) throw ShapeError("attention input must be [B, T, d], got " + shape_str(x.shape()));
        const std::size_t batch = x.shape()[0];
        const std::size_t tokens = x.shape()[1];
        const std::size_t dim = x.shape()[2];
        if (dim % heads != 0) throw std::invalid_argument("attention dim is not divisible by the head count");
        const std::size_t head_dim = dim / heads;

        auto split_heads = [&](const Tensor& t) {
            return permute(reshape(t, {batch, tokens, heads, head_dim}), {0, 2, 1, 3});
        };
        Tensor q = split_heads(query(x));
        Tensor k = split_heads(key(x));
        Tensor v = split_heads(value(x));
        Tensor scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
        Tensor attn = softmax(scores);
        Tensor mixed = permute(matmul(attn, v), {0, 2, 1, 3});
        return {proj(reshape(mixed, {batch, tokens, dim})), attn};
    }

    void collect(const std::string& prefix, ParamList& out) const {
        query.collect(prefix + ".query", out);
        key.collect(prefix + ".key", out);
        value.collect(prefix + ".value", out);
        proj.collect(prefix + ".proj", out);
    }
};

struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(std::size_t dim, std::size_t hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

    Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

    void collect(const std::string& prefix, ParamList& out) const {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

/// Per-channel k x k kernel, stride 1, shape-preserving zero padding.
struct DepthwiseConv {
    Tensor weight;  // [C, 1, k, k]
    Tensor bias;    // [C]

    DepthwiseConv() = default;
    DepthwiseConv(std::size_t channels, std::size_t kernel, Rng& rng)
        : weight(make_param({channels, 1, kernel, kernel})), bias(make_param({channels})) {
        if (kernel % 2 == 0) throw std::invalid_argument("depth-wise kernel size must be odd");
        fill_uniform(weight, rng, 1.0 / static_cast<double>(kernel));
    }

    std::size_t channels() const { return weight.shape()[0]; }
    std::size_t kernel() const { return weight.shape()[2]; }

    Tensor operator()(const Tensor& x) const { return depthwise_conv2d(x, weight, bias); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

inline std::size_t exact_sqrt(std::size_t n) {
    auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (r * r != n) throw ShapeError("token count " + std::to_string(n) + " is not a perfect square");
    return r;
}

/// [B, T, d] -> [B, d, sqrt(T), sqrt(T)]; token r*side + c lands at (r, c).
inline Tensor seq_to_image(const Tensor& z) {
    if (z.rank() != 3) throw ShapeError("seq_to_image expects [B, T, d], got " + shape_str(z.shape()));
    const std::size_t side = exact_sqrt(z.shape()[1]);
    return reshape(permute(z, {0, 2, 1}), {z.shape()[0], z.shape()[2], side, side});
}

/// [B, d, H, W] -> [B, H*W, d].
inline Tensor image_to_seq(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("image_to_seq expects [B, C, H, W], got " + shape_str(x.shape()));
    return permute(reshape(x, {x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]}), {0, 2, 1});
}

}  // namespace lnl

#endif
