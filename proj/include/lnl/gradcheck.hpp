#ifndef LNL_GRADCHECK_HPP
#define LNL_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <vector>

#include "lnl/rng.hpp"
#include "lnl/tensor.hpp"

namespace lnl {

struct GradCheckResult {
    double max_relative_error = 0.0;  // over all checked inputs
    std::size_t evaluations = 0;
};

/**
 * Compares analytic gradients of a scalar function against central finite
 * differences. Per input, the error is ||analytic - numeric|| / max(||analytic||,
 * ||numeric||), with both gradients below `floor` in norm counting as a match.
 * The inputs must be requires_grad leaves; their .grad is reset.
 */
inline GradCheckResult gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-4,
                                 double floor = 1e-10) {
    for (auto& t : inputs) t.zero_grad();
    Tensor loss = f();
    backward(loss);
    GradCheckResult result;
    for (auto& t : inputs) {
        std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                    : std::vector<double>(t.numel(), 0.0);
        std::vector<double> numeric(t.numel());
        auto values = t.mutable_data();
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double saved = values[k];
            values[k] = saved + h;
            double up = f().item();
            values[k] = saved - h;
            double down = f().item();
            values[k] = saved;
            numeric[k] = (up - down) / (2.0 * h);
            result.evaluations += 2;
        }
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t k = 0; k < numeric.size(); ++k) {
            diff += (analytic[k] - numeric[k]) * (analytic[k] - numeric[k]);
            na += analytic[k] * analytic[k];
            nn += numeric[k] * numeric[k];
        }
        double scale = std::max(std::sqrt(na), std::sqrt(nn));
        double err = scale < floor ? 0.0 : std::sqrt(diff) / scale;
        result.max_relative_error = std::max(result.max_relative_error, err);
        t.zero_grad();
    }
    return result;
}

/**
 * Directional variant for inputs too large to perturb one entry at a time:
 * per input and per random unit direction v, compares <grad, v> against
 * (f(x + h v) - f(x - h v)) / 2h.
 */
inline GradCheckResult gradcheck_directional(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                             std::size_t directions, Rng& rng, double h = 1e-4,
                                             double floor = 1e-10) {
    for (auto& t : inputs) t.zero_grad();
    backward(f());
    GradCheckResult result;
    for (auto& t : inputs) {
        std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                    : std::vector<double>(t.numel(), 0.0);
        auto values = t.mutable_data();
        const std::vector<double> saved(values.begin(), values.end());
        for (std::size_t d = 0; d < directions; ++d) {
            std::vector<double> v(values.size());
            double norm = 0.0;
            for (auto& x : v) {
                x = rng.normal();
                norm += x * x;
            }
            norm = std::sqrt(norm);
            double a = 0.0;
            for (std::size_t k = 0; k < v.size(); ++k) {
                v[k] /= norm;
                a += analytic[k] * v[k];
            }
            for (std::size_t k = 0; k < v.size(); ++k) values[k] = saved[k] + h * v[k];
            const double up = f().item();
            for (std::size_t k = 0; k < v.size(); ++k) values[k] = saved[k] - h * v[k];
            const double down = f().item();
            std::copy(saved.begin(), saved.end(), values.begin());
            result.evaluations += 2;
            const double n = (up - down) / (2.0 * h);
            const double scale = std::max(std::abs(a), std::abs(n));
            const double err = scale < floor ? 0.0 : std::abs(a - n) / scale;
            result.max_relative_error = std::max(result.max_relative_error, err);
        }
        t.zero_grad();
    }
    return result;
}

}  // namespace lnl

#endif
