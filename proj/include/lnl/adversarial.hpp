#ifndef LNL_ADVERSARIAL_HPP
#define LNL_ADVERSARIAL_HPP

#include <cmath>
#include <concepts>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lnl/ops.hpp"
#include "lnl/rng.hpp"

namespace lnl {

/// Anything that maps an input batch to logits [B, K].
template <class M>
concept Classifier = requires(const M& model, const Tensor& x) {
    { model.logits(x) } -> std::convertible_to<Tensor>;
};

enum class AttackFamily { fgsm, pgd };

inline std::string to_string(AttackFamily f) { return f == AttackFamily::fgsm ? "fgsm" : "pgd"; }

inline AttackFamily parse_attack_family(const std::string& s) {
    if (s == "fgsm") return AttackFamily::fgsm;
    if (s == "pgd") return AttackFamily::pgd;
    throw std::invalid_argument("unknown attack '" + s + "' (expected fgsm or pgd)");
}

/// L-infinity white-box attack settings, in [0, 1] input units.
struct AttackSpec {
    AttackFamily family = AttackFamily::fgsm;
    double epsilon = 1.0 / 255.0;
    double alpha = 0.5 / 255.0;
    std::size_t steps = 5;
    double clamp_lo = 0.0;
    double clamp_hi = 1.0;
    bool random_start = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(epsilon > 0.0)) throw std::invalid_argument("attack epsilon must be positive");
        if (!(clamp_lo < clamp_hi)) throw std::invalid_argument("attack clamp range is empty");
        if (family == AttackFamily::pgd) {
            if (!(alpha > 0.0)) throw std::invalid_argument("PGD step size must be positive");
            if (steps == 0) throw std::invalid_argument("PGD needs at least one step");
        }
    }

    static AttackSpec fgsm(double eps) { return {AttackFamily::fgsm, eps, eps, 1}; }
    static AttackSpec pgd(double eps, double alpha, std::size_t steps) { return {AttackFamily::pgd, eps, alpha, steps}; }
};

namespace detail {

/// Projects v onto [x0 - eps, x0 + eps] intersected with [lo, hi] so that
/// |result - x0| <= eps holds in floating point.
inline double project(double v, double x0, double eps, double lo, double hi) {
    double upper = x0 + eps;
    while (upper - x0 > eps) upper = std::nextafter(upper, x0);
    double lower = x0 - eps;
    while (x0 - lower > eps) lower = std::nextafter(lower, x0);
    return std::clamp(std::clamp(v, lower, upper), lo, hi);
}

template <Classifier M>
Tensor input_gradient(const M& model, const Tensor& x, std::span<const int> labels) {
    Tensor leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
    Tensor loss = cross_entropy(model.logits(leaf), labels);
    return grad(loss, leaf);
}

/// x0 + step * sign(g) re-projected; shared by FGSM and every PGD step.
inline Tensor signed_step(const Tensor& x0, const Tensor& current, const Tensor& g, double step,
                          const AttackSpec& spec) {
    std::vector<double> out(x0.numel());
    auto base = x0.data();
    auto cur = current.data();
    auto gv = g.data();
    for (std::size_t k = 0; k < out.size(); ++k) {
        double s = static_cast<double>((gv[k] > 0.0) - (gv[k] < 0.0));
        out[k] = project(cur[k] + step * s, base[k], spec.epsilon, spec.clamp_lo, spec.clamp_hi);
    }
    return Tensor(x0.shape(), std::move(out));
}

inline void check_attack_input(const Tensor& x, const AttackSpec& spec) {
    for (double v : x.data()) {
        if (v < spec.clamp_lo || v > spec.clamp_hi) throw std::invalid_argument("attack input outside clamp range");
    }
}

}  // namespace detail

/// x_adv = clamp(x + eps * sign(grad_x loss), 0, 1).
template <Classifier M>
Tensor fgsm(const M& model, const Tensor& x, std::span<const int> labels, const AttackSpec& spec) {
    spec.validate();
    detail::check_attack_input(x, spec);
    Tensor g = detail::input_gradient(model, x, labels);
    return detail::signed_step(x, x, g, spec.epsilon, spec);
}

/// Called with (step index, iterate) after each projection.
using PgdObserver = std::function<void(std::size_t, const Tensor&)>;

/// t steps of signed ascent, projecting onto the eps-ball and clamp range after each.
template <Classifier M>
Tensor pgd(const M& model, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
           const PgdObserver& observe = {}) {
    spec.validate();
    if (spec.family != AttackFamily::pgd) throw std::invalid_argument("pgd called with a non-PGD spec");
    detail::check_attack_input(x, spec);
    Tensor current = x;
    if (spec.random_start) {
        Rng rng(spec.seed);
        std::vector<double> start(x.numel());
        auto base = x.data();
        for (std::size_t k = 0; k < start.size(); ++k) {
            start[k] = detail::project(base[k] + rng.uniform(-spec.epsilon, spec.epsilon), base[k], spec.epsilon,
                                       spec.clamp_lo, spec.clamp_hi);
        }
        current = Tensor(x.shape(), std::move(start));
    }
    for (std::size_t t = 0; t < spec.steps; ++t) {
        Tensor g = detail::input_gradient(model, current, labels);
        current = detail::signed_step(x, current, g, spec.alpha, spec);
        if (observe) observe(t, current);
    }
    return current;
}

template <Classifier M>
Tensor attack(const M& model, const Tensor& x, std::span<const int> labels, const AttackSpec& spec) {
    return spec.family == AttackFamily::fgsm ? fgsm(model, x, labels, spec) : pgd(model, x, labels, spec);
}

struct RobustResult {
    double clean_accuracy = 0.0;
    double robust_accuracy = 0.0;
    std::size_t samples = 0;
};

/// Top-1 prediction per row, lowest index on ties.
inline std::vector<int> predict(const Tensor& logits) {
    Tensor idx = argmax(logits, 1);
    std::vector<int> out(idx.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(idx[i]);
    return out;
}

/**
 * Clean and robust top-1 accuracy. A sample counts as robust only when it is
 * classified correctly both before and after the attack. epsilon == 0 is the
 * null attack. `batches` yields (images, labels) pairs until it returns false.
 */
template <Classifier M, class BatchSource>
RobustResult robust_accuracy(const M& model, BatchSource&& batches, const AttackSpec& spec) {
    const bool null_attack = spec.epsilon == 0.0;
    if (!null_attack) spec.validate();
    std::size_t total = 0;
    std::size_t clean_ok = 0;
    std::size_t robust_ok = 0;
    Tensor images;
    std::vector<int> labels;
    while (batches(images, labels)) {
        std::vector<int> clean_pred;
        {
            NoGradGuard no_grad;
            clean_pred = predict(model.logits(images));
        }
        std::vector<int> adv_pred = clean_pred;
        if (!null_attack) {
            Tensor adv = attack(model, images, labels, spec);
            NoGradGuard no_grad;
            adv_pred = predict(model.logits(adv));
        }
        for (std::size_t i = 0; i < labels.size(); ++i) {
            bool clean = clean_pred[i] == labels[i];
            clean_ok += clean;
            robust_ok += clean && adv_pred[i] == labels[i];
        }
        total += labels.size();
    }
    if (total == 0) throw std::invalid_argument("robust_accuracy: empty dataset");
    return {static_cast<double>(clean_ok) / static_cast<double>(total),
            static_cast<double>(robust_ok) / static_cast<double>(total), total};
}

}  // namespace lnl

#endif
