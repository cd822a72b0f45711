#ifndef LNL_MOEX_HPP
#define LNL_MOEX_HPP

#include <stdexcept>
#include <vector>

#include "lnl/model.hpp"
#include "lnl/ops.hpp"
#include "lnl/rng.hpp"

namespace lnl {

/// Normalized features plus the per-sample, per-channel moments taken along the token axis.
struct MoexMoments {
    Tensor normalized;  // [B, T, d]
    Tensor mu;          // [B, 1, d]
    Tensor sigma;       // [B, 1, d], >= eps
};

inline constexpr double kMoexEps = 1e-5;

/// sigma = max(population std, eps), so constant channels normalize to zero.
inline MoexMoments pono_normalize(const Tensor& z, double eps = kMoexEps) {
    if (z.rank() != 3) throw ShapeError("pono_normalize expects [B, T, d], got " + shape_str(z.shape()));
    if (!(eps > 0.0)) throw std::invalid_argument("pono_normalize: eps must be positive");
    Tensor mu = mean(z, 1, true);
    Tensor centered = z - mu;
    Tensor var = mean(centered * centered, 1, true);
    Tensor sigma = sqrt(clamp_min(var, eps * eps));
    return {centered / sigma, mu, sigma};
}

/// Inverse of the normalization: normalized * sigma + mu.
inline Tensor denormalize(const Tensor& normalized, const Tensor& mu, const Tensor& sigma) {
    return normalized * sigma + mu;
}

/// sigma_B * (Z_A - mu_A) / sigma_A + mu_B, i.e. A's normalized features with B's moments.
inline Tensor moment_exchange(const MoexMoments& a, const Tensor& mu_b, const Tensor& sigma_b) {
    if (mu_b.shape() != a.mu.shape() || sigma_b.shape() != a.sigma.shape()) {
        throw ShapeError("moment_exchange: moments " + shape_str(mu_b.shape()) + "/" + shape_str(sigma_b.shape()) +
                         " do not match " + shape_str(a.mu.shape()));
    }
    return a.normalized * sigma_b + mu_b;
}

inline void check_lambda(double lambda) {
    if (!(lambda > 0.0 && lambda < 1.0)) {
        throw std::invalid_argument("MoEx lambda must lie in (0, 1), got " + std::to_string(lambda));
    }
}

/// lambda * CE(logits, y_a) + (1 - lambda) * CE(logits, y_b), batch-averaged.
inline Tensor moex_loss(const Tensor& logits, std::span<const int> labels_a, std::span<const int> labels_b,
                        double lambda) {
    check_lambda(lambda);
    return scale(cross_entropy(logits, labels_a), lambda) + scale(cross_entropy(logits, labels_b), 1.0 - lambda);
}

struct MoexBatchPlan {
    std::vector<std::size_t> pairing;  // sample a takes the moments of pairing[a]
    double lambda = 0.9;
    std::size_t apply_layer = 0;
};

inline MoexBatchPlan make_moex_plan(std::size_t batch, double lambda, std::size_t apply_layer, Rng& rng) {
    check_lambda(lambda);
    return {rng.permutation(batch), lambda, apply_layer};
}

struct MoexApplied {
    Tensor features;
    std::vector<int> labels_a;
    std::vector<int> labels_b;
};

/// Replaces every sample's moments with those of its partner. Training only.
inline MoexApplied apply_moex(const Tensor& features, std::span<const int> labels, const MoexBatchPlan& plan,
                              Mode mode) {
    if (mode != Mode::train) throw std::logic_error("apply_moex is a training-only augmentation");
    check_lambda(plan.lambda);
    if (features.rank() != 3) throw ShapeError("apply_moex expects [B, T, d], got " + shape_str(features.shape()));
    const std::size_t batch = features.shape()[0];
    if (plan.pairing.size() != batch || labels.size() != batch) {
        throw ShapeError("apply_moex: pairing/labels do not match batch size " + std::to_string(batch));
    }
    std::vector<bool> seen(batch, false);
    for (auto p : plan.pairing) {
        if (p >= batch || seen[p]) throw std::invalid_argument("apply_moex: pairing is not a permutation");
        seen[p] = true;
    }
    MoexMoments moments = pono_normalize(features);
    Tensor mixed = moment_exchange(moments, index_select(moments.mu, plan.pairing),
                                   index_select(moments.sigma, plan.pairing));
    MoexApplied out{mixed, std::vector<int>(labels.begin(), labels.end()), std::vector<int>(batch)};
    for (std::size_t a = 0; a < batch; ++a) out.labels_b[a] = labels[plan.pairing[a]];
    return out;
}

/// Sentence hook that exchanges the patch-token moments after block `plan.apply_layer`.
/// The class token is not part of the spatial grid and is passed through.
inline SentenceHook moex_sentence_hook(const MoexBatchPlan& plan, std::span<const int> labels,
                                       MoexApplied& applied) {
    return [&plan, labels, &applied](const Tensor& z, std::size_t layer) {
        if (layer != plan.apply_layer) return z;
        const std::size_t n = z.shape()[1] - 1;
        applied = apply_moex(slice(z, 1, 1, n), labels, plan, Mode::train);
        return concat({slice(z, 1, 0, 1), applied.features}, 1);
    };
}

}  // namespace lnl

#endif
