#ifndef LNL_OPS_HPP
#define LNL_OPS_HPP

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

#include "lnl/tensor.hpp"

namespace lnl {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline std::size_t normalize_axis(int axis, std::size_t rank) {
    auto r = static_cast<int>(rank);
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " is invalid for a rank-" + std::to_string(rank) + " tensor");
    }
    return static_cast<std::size_t>(a);
}

/// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
    std::size_t outer = 1, length = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.length = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

/// For each flat index of `out`, the flat index of `in` it reads under trailing broadcasting.
inline std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
    const std::size_t rank = out.size();
    const std::size_t offset = rank - in.size();
    std::vector<std::size_t> in_strides(rank, 0);
    auto raw = strides_of(in);
    for (std::size_t i = 0; i < in.size(); ++i) in_strides[offset + i] = in[i] == 1 ? 0 : raw[i];

    std::vector<std::size_t> index(shape_numel(out));
    std::vector<std::size_t> counter(rank, 0);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < index.size(); ++k) {
        index[k] = pos;
        for (std::size_t d = rank; d-- > 0;) {
            ++counter[d];
            pos += in_strides[d];
            if (counter[d] < out[d]) break;
            pos -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    return index;
}

}  // namespace detail

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

namespace detail {

// f(x, y) -> value; grad_a(x, y, out) and grad_b(x, y, out) -> local partials.
template <class F, class GradA, class GradB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, GradA grad_a, GradB grad_b) {
    Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    const std::size_t n = shape_numel(out_shape);
    const bool direct_a = a.shape() == out_shape;
    const bool direct_b = b.shape() == out_shape;
    auto ia = std::make_shared<const std::vector<std::size_t>>(direct_a ? std::vector<std::size_t>{}
                                                                        : broadcast_index(out_shape, a.shape()));
    auto ib = std::make_shared<const std::vector<std::size_t>>(direct_b ? std::vector<std::size_t>{}
                                                                        : broadcast_index(out_shape, b.shape()));
    auto av = a.data();
    auto bv = b.data();
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k) {
        out[k] = f(av[direct_a ? k : (*ia)[k]], bv[direct_b ? k : (*ib)[k]]);
    }
    const auto* pa = a.id();
    const auto* pb = b.id();
    return make_result(std::move(out_shape), std::move(out), name, {a, b},
                       [=](std::span<const double> y, std::span<const double> g, GradBuffers gin) {
                           const auto& xa = pa->data;
                           const auto& xb = pb->data;
                           for (std::size_t k = 0; k < g.size(); ++k) {
                               std::size_t ka = direct_a ? k : (*ia)[k];
                               std::size_t kb = direct_b ? k : (*ib)[k];
                               if (gin[0]) (*gin[0])[ka] += g[k] * grad_a(xa[ka], xb[kb], y[k]);
                               if (gin[1]) (*gin[1])[kb] += g[k] * grad_b(xa[ka], xb[kb], y[k]);
                           }
                       });
}

// f(x) -> value; df(x, y) -> derivative.
template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& a, F f, DF df) {
    auto av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t k = 0; k < av.size(); ++k) out[k] = f(av[k]);
    const auto* pa = a.id();
    return make_result(a.shape(), std::move(out), name, {a},
                       [=](std::span<const double> y, std::span<const double> g, GradBuffers gin) {
                           const auto& x = pa->data;
                           for (std::size_t k = 0; k < g.size(); ++k) (*gin[0])[k] += g[k] * df(x[k], y[k]);
                       });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    for (double v : b.data()) {
        if (v == 0.0) throw DomainError("div: division by zero");
    }
    return detail::binary_op(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

inline Tensor scale(const Tensor& a, double s) {
    return detail::unary_op(
        "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    return detail::unary_op(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) throw DomainError("log: argument must be positive");
    }
    return detail::unary_op(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
    for (double v : a.data()) {
        if (v < 0.0) throw DomainError("sqrt: argument must be non-negative");
    }
    return detail::unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y) {
            if (y == 0.0) throw DomainError("sqrt: gradient is unbounded at zero");
            return 0.5 / y;
        });
}

/// Gradient passes where lo <= x <= hi.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
    return detail::unary_op(
        "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Tensor clamp_min(const Tensor& a, double lo) { return clamp(a, lo, std::numeric_limits<double>::max()); }

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Exact GELU, x * Phi(x).
inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return detail::unary_op(
        "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [inv_sqrt_2pi](double x, double) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        });
}

/// sign(0) = 0. Not differentiable; the result is never on the tape.
inline Tensor sign(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto av = a.data();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<double>((av[k] > 0.0) - (av[k] < 0.0));
    return Tensor(a.shape(), std::move(out));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }

// ---------------------------------------------------------------------------
// Reductions

namespace detail {
inline Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
    Shape out = shape;
    if (keepdim) {
        out[axis] = 1;
    } else {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    return out;
}
}  // namespace detail

inline Tensor sum(const Tensor& a, int axis, bool keepdim = false) {
    auto ax = detail::normalize_axis(axis, a.rank());
    auto s = detail::split_at(a.shape(), ax);
    auto av = a.data();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.length; ++j)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += av[(o * s.length + j) * s.inner + i];
    return detail::make_result(detail::reduced_shape(a.shape(), ax, keepdim), std::move(out), "sum", {a},
                               [s](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
                                   auto& ga = *gin[0];
                                   for (std::size_t o = 0; o < s.outer; ++o)
                                       for (std::size_t j = 0; j < s.length; ++j)
                                           for (std::size_t i = 0; i < s.inner; ++i)
                                               ga[(o * s.length + j) * s.inner + i] += g[o * s.inner + i];
                               });
}

/// Sum of every element, as a rank-0 tensor.
inline Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return detail::make_result({}, {total}, "sum_all", {a},
                               [](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
                                   for (auto& v : *gin[0]) v += g[0];
                               });
}

inline Tensor mean(const Tensor& a, int axis, bool keepdim = false) {
    auto ax = detail::normalize_axis(axis, a.rank());
    return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[ax]));
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Maximum along an axis; the gradient goes to the lowest-index maximizer.
inline Tensor max(const Tensor& a, int axis, bool keepdim = false) {
    auto ax = detail::normalize_axis(axis, a.rank());
    auto s = detail::split_at(a.shape(), ax);
    auto av = a.data();
    std::vector<double> out(s.outer * s.inner);
    auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            std::size_t best = 0;
            double value = av[o * s.length * s.inner + i];
            for (std::size_t j = 1; j < s.length; ++j) {
                double v = av[(o * s.length + j) * s.inner + i];
                if (v > value) {
                    value = v;
                    best = j;
                }
            }
            out[o * s.inner + i] = value;
            (*arg)[o * s.inner + i] = (o * s.length + best) * s.inner + i;
        }
    }
    return detail::make_result(detail::reduced_shape(a.shape(), ax, keepdim), std::move(out), "max", {a},
                               [arg](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
                                   for (std::size_t k = 0; k < g.size(); ++k) (*gin[0])[(*arg)[k]] += g[k];
                               });
}

/// Index of the maximum along an axis (lowest index on ties), as doubles.
inline Tensor argmax(const Tensor& a, int axis, bool keepdim = false) {
    auto ax = detail::normalize_axis(axis, a.rank());
    auto s = detail::split_at(a.shape(), ax);
    auto av = a.data();
    std::vector<double> out(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            std::size_t best = 0;
            double value = av[o * s.length * s.inner + i];
            for (std::size_t j = 1; j < s.length; ++j) {
                double v = av[(o * s.length + j) * s.inner + i];
                if (v > value) {
                    value = v;
                    best = j;
                }
            }
            out[o * s.inner + i] = static_cast<double>(best);
        }
    }
    return Tensor(detail::reduced_shape(a.shape(), ax, keepdim), std::move(out));
}

// ---------------------------------------------------------------------------
// Shape manipulation. Every op copies.

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return detail::make_result(std::move(shape), std::move(out), "reshape", {a},
                               [](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
                                   for (std::size_t k = 0; k < g.size(); ++k) (*gin[0])[k] += g[k];
                               });
}

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
    const std::size_t rank = a.rank();
    if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch for " + shape_str(a.shape()));
    std::vector<bool> seen(rank, false);
    for (auto p : perm) {
        if (p >= rank || seen[p]) throw ShapeError("permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = a.shape()[perm[i]];
    auto in_strides = detail::strides_of(a.shape());
    // source offset for each output position
    auto index = std::make_shared<std::vector<std::size_t>>(a.numel());
    std::vector<std::size_t> counter(rank, 0);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < index->size(); ++k) {
        (*index)[k] = pos;
        for (std::size_t d = rank; d-- > 0;) {
            ++counter[d];
            pos += in_strides[perm[d]];
            if (counter[d] < out_shape[d]) break;
            pos -= in_strides[perm[d]] * counter[d];
            counter[d] = 0;
        }
    }
    auto av = a.data();
    std::vector<double> out(a.numel());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[(*index)[k]];
    return detail::make_result(std::move(out_shape), std::move(out), "permute", {a},
                               [index](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
                                   for (std::size_t k = 0; k < g.size(); ++k) (*gin[0])[(*index)[k]] += g[k];
                               });
}

inline Tensor transpose(const Tensor& a, int axis0, int axis1) {
    std::vector<std::size_t> perm(a.rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[detail::normalize_axis(axis0, a.rank())], perm[detail::normalize_axis(axis1, a.rank())]);
    return permute(a, perm);
}

/// out[k] = a[index[k]]; gradients scatter-add back.
inline Tensor gather(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
    if (shape_numel(shape) != index->size()) throw ShapeError("gather: index count does not match output shape");
    auto av = a.data();
    std::vector<double> out(index->size());
    for (std::size_t k = 0; k < out.size(); ++k) {
        if ((*index)[k] >= av.size()) throw ShapeError("gather: index out of range");
        out[k] = av[(*index)[k]];
    }
    return detail::make_result(std::move(shape), std::move(out), "gather", {a},
                               [index](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
                                   for (std::size_t k = 0; k < g.size(); ++k) (*gin[0])[(*index)[k]] += g[k];
                               });
}

inline Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
    auto ax = detail::normalize_axis(axis, a.rank());
    auto s = detail::split_at(a.shape(), ax);
    if (length == 0 || start + length > s.length) {
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for " + shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[ax] = length;
    auto av = a.data();
    std::vector<double> out(s.outer * length * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        const double* src = av.data() + (o * s.length + start) * s.inner;
        std::copy(src, src + length * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
    }
    return detail::make_result(
        std::move(out_shape), std::move(out), "slice", {a},
        [s, start, length](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
            auto& ga = *gin[0];
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t k = 0; k < length * s.inner; ++k)
                    ga[(o * s.length + start) * s.inner + k] += g[o * length * s.inner + k];
        });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no tensors");
    auto ax = detail::normalize_axis(axis, parts[0].rank());
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    std::vector<std::size_t> lengths;
    for (const auto& p : parts) {
        Shape probe = p.shape();
        if (probe.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < probe.size(); ++d) {
            if (d != ax && probe[d] != parts[0].shape()[d]) {
                throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(probe) +
                                 " differ off-axis");
            }
        }
        lengths.push_back(probe[ax]);
        out_shape[ax] += probe[ax];
    }
    auto s = detail::split_at(out_shape, ax);
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        auto pv = parts[p].data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            const double* src = pv.data() + o * lengths[p] * s.inner;
            std::copy(src, src + lengths[p] * s.inner,
                      out.begin() + static_cast<std::ptrdiff_t>((o * s.length + offset) * s.inner));
        }
        offset += lengths[p];
    }
    return detail::make_result(std::move(out_shape), std::move(out), "concat", parts,
                               [s, lengths](std::span<const double>, std::span<const double> g,
                                            detail::GradBuffers gin) {
                                   std::size_t offset = 0;
                                   for (std::size_t p = 0; p < lengths.size(); ++p) {
                                       if (gin[p]) {
                                           auto& gp = *gin[p];
                                           for (std::size_t o = 0; o < s.outer; ++o)
                                               for (std::size_t k = 0; k < lengths[p] * s.inner; ++k)
                                                   gp[o * lengths[p] * s.inner + k] +=
                                                       g[(o * s.length + offset) * s.inner + k];
                                       }
                                       offset += lengths[p];
                                   }
                               });
}

/// Broadcasts `a` to `shape` (trailing alignment); gradients sum back.
inline Tensor expand(const Tensor& a, Shape shape) {
    if (broadcast_shapes(a.shape(), shape) != shape) {
        throw ShapeError("cannot expand " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    auto index = std::make_shared<const std::vector<std::size_t>>(detail::broadcast_index(shape, a.shape()));
    return gather(a, index, std::move(shape));
}

/// Rows of `a` along axis 0 picked by `rows`.
inline Tensor index_select(const Tensor& a, const std::vector<std::size_t>& rows) {
    if (a.rank() == 0) throw ShapeError("index_select on a scalar");
    const std::size_t inner = a.numel() / a.shape()[0];
    auto index = std::make_shared<std::vector<std::size_t>>();
    index->reserve(rows.size() * inner);
    for (auto r : rows) {
        if (r >= a.shape()[0]) throw ShapeError("index_select: row " + std::to_string(r) + " out of range");
        for (std::size_t k = 0; k < inner; ++k) index->push_back(r * inner + k);
    }
    Shape shape = a.shape();
    shape[0] = rows.size();
    return gather(a, std::move(index), std::move(shape));
}

// ---------------------------------------------------------------------------
// Matrix products

/**
 * a[..., m, k] x b[k, n] or a[..., m, k] x b[..., k, n] with identical
 * leading extents.
 */
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    auto mismatch = [&] {
        return ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    };
    if (a.rank() < 2 || b.rank() < 2) throw mismatch();
    const std::size_t m = a.shape()[a.rank() - 2];
    const std::size_t k = a.shape()[a.rank() - 1];
    const std::size_t kb = b.shape()[b.rank() - 2];
    const std::size_t n = b.shape()[b.rank() - 1];
    if (k != kb) throw mismatch();
    const bool shared_b = b.rank() == 2;
    if (!shared_b && (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())))
        throw mismatch();
    const std::size_t batch = a.numel() / (m * k);

    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(batch * m * n);
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < batch; ++i) {
        detail::ConstMatMap A(av.data() + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
        detail::ConstMatMap B(bv.data() + (shared_b ? 0 : i * k * n), static_cast<Eigen::Index>(k),
                              static_cast<Eigen::Index>(n));
        detail::MatMap C(out.data() + i * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
        C.noalias() = A * B;
    }
    const auto* pa = a.id();
    const auto* pb = b.id();
    return detail::make_result(
        std::move(out_shape), std::move(out), "matmul", {a, b},
        [=](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
            const auto M = static_cast<Eigen::Index>(m);
            const auto K = static_cast<Eigen::Index>(k);
            const auto N = static_cast<Eigen::Index>(n);
            for (std::size_t i = 0; i < batch; ++i) {
                detail::ConstMatMap G(g.data() + i * m * n, M, N);
                detail::ConstMatMap A(pa->data.data() + i * m * k, M, K);
                const std::size_t boff = shared_b ? 0 : i * k * n;
                detail::ConstMatMap B(pb->data.data() + boff, K, N);
                if (gin[0]) {
                    detail::MatMap GA(gin[0]->data() + i * m * k, M, K);
                    GA.noalias() += G * B.transpose();
                }
                if (gin[1]) {
                    detail::MatMap GB(gin[1]->data() + boff, K, N);
                    GB.noalias() += A.transpose() * G;
                }
            }
        });
}

/// y = x W^T + b over the last axis. `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(weight.shape()));
    const std::size_t out_f = weight.shape()[0];
    const std::size_t in_f = weight.shape()[1];
    if (x.rank() == 0 || x.shape().back() != in_f) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not end in " + std::to_string(in_f));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != out_f)) {
        throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(out_f));
    }
    const std::size_t rows = x.numel() / in_f;
    const auto R = static_cast<Eigen::Index>(rows);
    const auto I = static_cast<Eigen::Index>(in_f);
    const auto O = static_cast<Eigen::Index>(out_f);
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    std::vector<double> out(rows * out_f);
    {
        detail::ConstMatMap X(x.data().data(), R, I);
        detail::ConstMatMap W(weight.data().data(), O, I);
        detail::MatMap Y(out.data(), R, O);
        Y.noalias() = X * W.transpose();
        if (bias.defined()) {
            Eigen::Map<const Eigen::RowVectorXd> b(bias.data().data(), O);
            Y.rowwise() += b;
        }
    }
    const auto* px = x.id();
    const auto* pw = weight.id();
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result(
        std::move(out_shape), std::move(out), "linear", std::move(inputs),
        [=](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
            detail::ConstMatMap G(g.data(), R, O);
            if (gin[0]) {
                detail::MatMap GX(gin[0]->data(), R, I);
                GX.noalias() += G * detail::ConstMatMap(pw->data.data(), O, I);
            }
            if (gin[1]) {
                detail::MatMap GW(gin[1]->data(), O, I);
                GW.noalias() += G.transpose() * detail::ConstMatMap(px->data.data(), R, I);
            }
            if (gin.size() > 2 && gin[2]) {
                Eigen::Map<Eigen::RowVectorXd> GB(gin[2]->data(), O);
                GB += G.colwise().sum();
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

/// Softmax over the last axis with max subtraction.
inline Tensor softmax(const Tensor& a) {
    if (a.rank() == 0) throw ShapeError("softmax on a scalar");
    const std::size_t len = a.shape().back();
    const std::size_t rows = a.numel() / len;
    auto av = a.data();
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * len;
        double* y = out.data() + r * len;
        double mx = *std::max_element(x, x + len);
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) total += (y[j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < len; ++j) y[j] /= total;
    }
    return detail::make_result(a.shape(), std::move(out), "softmax", {a},
                               [rows, len](std::span<const double> y, std::span<const double> g,
                                           detail::GradBuffers gin) {
                                   auto& ga = *gin[0];
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < len; ++j) dot += g[r * len + j] * y[r * len + j];
                                       for (std::size_t j = 0; j < len; ++j)
                                           ga[r * len + j] += y[r * len + j] * (g[r * len + j] - dot);
                                   }
                               });
}

inline Tensor log_softmax(const Tensor& a) {
    if (a.rank() == 0) throw ShapeError("log_softmax on a scalar");
    const std::size_t len = a.shape().back();
    const std::size_t rows = a.numel() / len;
    auto av = a.data();
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * len;
        double mx = *std::max_element(x, x + len);
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) total += std::exp(x[j] - mx);
        double lse = mx + std::log(total);
        for (std::size_t j = 0; j < len; ++j) out[r * len + j] = x[j] - lse;
    }
    return detail::make_result(a.shape(), std::move(out), "log_softmax", {a},
                               [rows, len](std::span<const double> y, std::span<const double> g,
                                           detail::GradBuffers gin) {
                                   auto& ga = *gin[0];
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       double gs = 0.0;
                                       for (std::size_t j = 0; j < len; ++j) gs += g[r * len + j];
                                       for (std::size_t j = 0; j < len; ++j)
                                           ga[r * len + j] += g[r * len + j] - std::exp(y[r * len + j]) * gs;
                                   }
                               });
}

/// Per-sample -log softmax(logits)[label] for logits [B x K].
inline Tensor cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [B, K], got " + shape_str(logits.shape()));
    const std::size_t batch = logits.shape()[0];
    const std::size_t classes = logits.shape()[1];
    if (labels.size() != batch) throw ShapeError("cross_entropy: label count does not match batch");
    auto rows = std::make_shared<std::vector<std::size_t>>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[b]) + " outside [0, " +
                                    std::to_string(classes) + ")");
        }
        (*rows)[b] = b * classes + static_cast<std::size_t>(labels[b]);
    }
    return neg(gather(log_softmax(logits), rows, {batch}));
}

/// Batch-mean cross-entropy.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    return mean(cross_entropy_per_sample(logits, labels));
}

/**
 * Layer normalization over the last axis: (x - mean) / sqrt(var + eps),
 * then gamma * xhat + beta. Population variance.
 */
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
    if (x.rank() == 0) throw ShapeError("layer_norm on a scalar");
    const std::size_t d = x.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layer_norm: affine parameters must be [" + std::to_string(d) + "]");
    }
    const std::size_t rows = x.numel() / d;
    auto xv = x.data();
    auto gv = gamma.data();
    auto bv = beta.data();
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        double rstd = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = gv[j] * (xr[j] - mu) * rstd + bv[j];
    }
    const auto* px = x.id();
    const auto* pg = gamma.id();
    return detail::make_result(
        x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
        [=](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
            const auto& xs = px->data;
            const auto& gs = pg->data;
            std::vector<double> xhat(d);
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = xs.data() + r * d;
                const double* gr = g.data() + r * d;
                double mu = 0.0;
                for (std::size_t j = 0; j < d; ++j) mu += xr[j];
                mu *= inv_d;
                double var = 0.0;
                for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var *= inv_d;
                double rstd = 1.0 / std::sqrt(var + eps);
                double sum_gx = 0.0;
                double sum_gx_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    xhat[j] = (xr[j] - mu) * rstd;
                    double gxhat = gr[j] * gs[j];
                    sum_gx += gxhat;
                    sum_gx_xhat += gxhat * xhat[j];
                }
                if (gin[0]) {
                    auto& gx = *gin[0];
                    for (std::size_t j = 0; j < d; ++j)
                        gx[r * d + j] += rstd * (gr[j] * gs[j] - inv_d * sum_gx - xhat[j] * inv_d * sum_gx_xhat);
                }
                if (gin[1])
                    for (std::size_t j = 0; j < d; ++j) (*gin[1])[j] += gr[j] * xhat[j];
                if (gin[2])
                    for (std::size_t j = 0; j < d; ++j) (*gin[2])[j] += gr[j];
            }
        });
}

/**
 * Depth-wise 2-D correlation: x[B, C, H, W] with weight[C, 1, k, k], zero
 * padding (k-1)/2, stride 1, so spatial size is preserved. `bias` may be
 * undefined.
 */
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 4 || weight.shape()[1] != 1 || weight.shape()[2] != weight.shape()[3]) {
        throw ShapeError("depthwise_conv2d: weight must be [C, 1, k, k], got " + shape_str(weight.shape()));
    }
    const std::size_t channels = weight.shape()[0];
    const std::size_t k = weight.shape()[2];
    if (k % 2 == 0) throw std::invalid_argument("depthwise_conv2d: kernel size must be odd, got " + std::to_string(k));
    if (x.rank() != 4) throw ShapeError("depthwise_conv2d: input must be [B, C, H, W], got " + shape_str(x.shape()));
    if (x.shape()[1] != channels) {
        throw ShapeError("depthwise_conv2d: input has " + std::to_string(x.shape()[1]) + " channels, kernel has " +
                         std::to_string(channels));
    }
    if (bias.defined() && bias.shape() != Shape{channels}) throw ShapeError("depthwise_conv2d: bias must be [C]");
    const std::size_t batch = x.shape()[0];
    const std::size_t height = x.shape()[2];
    const std::size_t width = x.shape()[3];
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto H = static_cast<std::ptrdiff_t>(height);
    const auto W = static_cast<std::ptrdiff_t>(width);
    const auto K = static_cast<std::ptrdiff_t>(k);

    // Visits each (output pixel, tap) pair that lands inside the input.
    auto for_each_tap = [=](auto&& visit) {
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
                const std::size_t plane = (b * channels + c) * height * width;
                for (std::ptrdiff_t oy = 0; oy < H; ++oy) {
                    for (std::ptrdiff_t ky = 0; ky < K; ++ky) {
                        std::ptrdiff_t iy = oy + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (std::ptrdiff_t kx = 0; kx < K; ++kx) {
                            const std::size_t widx = (c * k + static_cast<std::size_t>(ky)) * k + static_cast<std::size_t>(kx);
                            std::ptrdiff_t ox_lo = std::max<std::ptrdiff_t>(0, pad - kx);
                            std::ptrdiff_t ox_hi = std::min<std::ptrdiff_t>(W, W + pad - kx);
                            for (std::ptrdiff_t ox = ox_lo; ox < ox_hi; ++ox) {
                                std::ptrdiff_t ix = ox + kx - pad;
                                visit(plane + static_cast<std::size_t>(oy * W + ox),
                                      plane + static_cast<std::size_t>(iy * W + ix), widx);
                            }
                        }
                    }
                }
            }
        }
    };

    auto xv = x.data();
    auto wv = weight.data();
    std::vector<double> out(x.numel(), 0.0);
    for_each_tap([&](std::size_t o, std::size_t i, std::size_t w) { out[o] += xv[i] * wv[w]; });
    if (bias.defined()) {
        auto bv = bias.data();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t p = 0; p < height * width; ++p) out[(b * channels + c) * height * width + p] += bv[c];
    }
    const auto* px = x.id();
    const auto* pw = weight.id();
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result(
        x.shape(), std::move(out), "depthwise_conv2d", std::move(inputs),
        [=](std::span<const double>, std::span<const double> g, detail::GradBuffers gin) {
            const auto& xs = px->data;
            const auto& ws = pw->data;
            if (gin[0]) {
                auto& gx = *gin[0];
                for_each_tap([&](std::size_t o, std::size_t i, std::size_t w) { gx[i] += g[o] * ws[w]; });
            }
            if (gin[1]) {
                auto& gw = *gin[1];
                for_each_tap([&](std::size_t o, std::size_t i, std::size_t w) { gw[w] += g[o] * xs[i]; });
            }
            if (gin.size() > 2 && gin[2]) {
                auto& gb = *gin[2];
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t c = 0; c < channels; ++c)
                        for (std::size_t p = 0; p < height * width; ++p)
                            gb[c] += g[(b * channels + c) * height * width + p];
            }
        });
}

}  // namespace lnl

#endif
