#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "rged/tensor.hpp"

namespace rged {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline bool is_scalar(const Tensor& t) { return t.rank() == 0; }

enum class Binary { add, sub, mul };

inline Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
    const bool a_scalar = is_scalar(a) && !is_scalar(b);
    const bool b_scalar = is_scalar(b) && !is_scalar(a);
    if (!a_scalar && !b_scalar) require_same_shape(a, b, name);
    const Shape shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(shape);
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = ad[a_scalar ? 0 : i];
        const double y = bd[b_scalar ? 0 : i];
        out[i] = kind == Binary::add ? x + y : kind == Binary::sub ? x - y : x * y;
    }
    return make_result(name, shape, std::move(out), {&a, &b}, [a, b, a_scalar, b_scalar, kind](Node& self) {
        const auto g = std::span<const double>(self.grad);
        auto ga = grad_of(a.node());
        auto gb = grad_of(b.node());
        const auto ad = a.data();
        const auto bd = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t ia = a_scalar ? 0 : i;
            const std::size_t ib = b_scalar ? 0 : i;
            switch (kind) {
            case Binary::add:
                if (!ga.empty()) ga[ia] += g[i];
                if (!gb.empty()) gb[ib] += g[i];
                break;
            case Binary::sub:
                if (!ga.empty()) ga[ia] += g[i];
                if (!gb.empty()) gb[ib] -= g[i];
                break;
            case Binary::mul:
                if (!ga.empty()) ga[ia] += g[i] * bd[ib];
                if (!gb.empty()) gb[ib] += g[i] * ad[ia];
                break;
            }
        }
    });
}

template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
    return make_result(name, x.shape(), std::move(out), {&x}, [x, df](Node& self) {
        auto gx = grad_of(x.node());
        const auto xd = x.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(xd[i], self.data[i]);
    });
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// Same-shape elementwise sum; a rank-0 operand broadcasts.
inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::mul, "mul"); }

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
    return detail::unary(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

/// a*x + b*y for constant coefficients.
inline Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
    detail::require_same_shape(x, y, "axpby");
    const auto xd = x.data();
    const auto yd = y.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * xd[i] + b * yd[i];
    return detail::make_result("axpby", x.shape(), std::move(out), {&x, &y}, [x, y, a, b](detail::Node& self) {
        auto gx = detail::grad_of(x.node());
        auto gy = detail::grad_of(y.node());
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (!gx.empty()) gx[i] += a * self.grad[i];
            if (!gy.empty()) gy[i] += b * self.grad[i];
        }
    });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(
        x, "sigmoid",
        [](double v) {
            // Kept strictly inside (0, 1): saturated inputs round to the
            // neighbouring representable values instead of 0 or 1.
            constexpr double lo = std::numeric_limits<double>::min();
            constexpr double hi = 1.0 - 0x1.0p-53;
            double y;
            if (v >= 0) {
                y = 1.0 / (1.0 + std::exp(-v));
            } else {
                const double e = std::exp(v);
                y = e / (1.0 + e);
            }
            return std::clamp(y, lo, hi);
        },
        [](double, double y) { return y * (1.0 - y); });
}

/// Elementwise clamp; the gradient passes only where the input is inside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo <= hi)) throw ContractError("clamp: empty range");
    return detail::unary(
        x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return v >= lo && v <= hi ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
    return detail::unary(
        x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + v * pdf;
        });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_result("sum", Shape{}, {s}, {&x}, [x](detail::Node& self) {
        auto gx = detail::grad_of(x.node());
        for (double& g : gx) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Sum of squares.
inline Tensor squared_norm(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    return detail::make_result("squared_norm", Shape{}, {s}, {&x}, [x](detail::Node& self) {
        auto gx = detail::grad_of(x.node());
        const auto xd = x.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * xd[i] * self.grad[0];
    });
}

/// Mean squared error over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mse");
    return scale(squared_norm(sub(a, b)), 1.0 / static_cast<double>(a.numel()));
}

/// Column means of a (p x q) matrix, giving a length-q vector.
inline Tensor mean_pool_rows(const Tensor& x) {
    detail::require_rank(x, 2, "mean_pool_rows");
    const std::size_t p = x.dim(0), q = x.dim(1);
    if (p == 0) throw DimensionError("mean_pool_rows: no rows to pool");
    std::vector<double> out(q, 0.0);
    const auto xd = x.data();
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[j] += xd[i * q + j];
    for (double& v : out) v /= static_cast<double>(p);
    return detail::make_result("mean_pool_rows", Shape{q}, std::move(out), {&x}, [x, p, q](detail::Node& self) {
        auto gx = detail::grad_of(x.node());
        const double inv = 1.0 / static_cast<double>(p);
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) gx[i * q + j] += self.grad[j] * inv;
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
    if (b.dim(0) != q) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(p * r, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        double* __restrict orow = out.data() + i * r;
        for (std::size_t k = 0; k < q; ++k) {
            const double av = ad[i * q + k];
            const double* __restrict brow = bd.data() + k * r;
            for (std::size_t j = 0; j < r; ++j) orow[j] += av * brow[j];
        }
    }
    return detail::make_result("matmul", Shape{p, r}, std::move(out), {&a, &b}, [a, b, p, q, r](detail::Node& self) {
        const double* g = self.grad.data();
        auto ga = detail::grad_of(a.node());
        auto gb = detail::grad_of(b.node());
        const auto ad = a.data();
        const auto bd = b.data();
        if (!ga.empty()) {
            // ga += g * b^T, accumulated as row updates so the inner loop is
            // a contiguous axpy rather than a strict-order reduction.
            std::vector<double> bt(q * r);
            for (std::size_t k = 0; k < q; ++k)
                for (std::size_t j = 0; j < r; ++j) bt[j * q + k] = bd[k * r + j];
            for (std::size_t i = 0; i < p; ++i) {
                double* __restrict garow = ga.data() + i * q;
                for (std::size_t j = 0; j < r; ++j) {
                    const double gv = g[i * r + j];
                    const double* __restrict btrow = bt.data() + j * q;
                    for (std::size_t k = 0; k < q; ++k) garow[k] += gv * btrow[k];
                }
            }
        }
        if (!gb.empty()) {
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t k = 0; k < q; ++k) {
                    const double av = ad[i * q + k];
                    const double* __restrict grow = g + i * r;
                    double* __restrict gbrow = gb.data() + k * r;
                    for (std::size_t j = 0; j < r; ++j) gbrow[j] += av * grow[j];
                }
        }
    });
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    const std::size_t p = x.dim(0), q = x.dim(1);
    const auto xd = x.data();
    std::vector<double> out(p * q);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[j * p + i] = xd[i * q + j];
    return detail::make_result("transpose", Shape{q, p}, std::move(out), {&x}, [x, p, q](detail::Node& self) {
        auto gx = detail::grad_of(x.node());
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) gx[i * q + j] += self.grad[j * p + i];
    });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return detail::make_result("reshape", std::move(shape), std::move(out), {&x}, [x](detail::Node& self) {
        auto gx = detail::grad_of(x.node());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    });
}

/// Adds a length-q bias vector to every row of a (p x q) matrix.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 2, "add_bias");
    detail::require_rank(bias, 1, "add_bias");
    const std::size_t p = x.dim(0), q = x.dim(1);
    if (bias.dim(0) != q) throw DimensionError("add_bias: bias length does not match columns");
    const auto xd = x.data();
    const auto bd = bias.data();
    std::vector<double> out(p * q);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] = xd[i * q + j] + bd[j];
    return detail::make_result("add_bias", x.shape(), std::move(out), {&x, &bias}, [x, bias, p, q](detail::Node& self) {
        auto gx = detail::grad_of(x.node());
        auto gb = detail::grad_of(bias.node());
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) {
                const double g = self.grad[i * q + j];
                if (!gx.empty()) gx[i * q + j] += g;
                if (!gb.empty()) gb[j] += g;
            }
    });
}

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_bias(matmul(x, weight), bias);
}

/// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::require_rank(x, 2, "slice_rows");
    const std::size_t q = x.dim(1);
    if (begin > end || end > x.dim(0)) throw DimensionError("slice_rows: range out of bounds");
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * q),
                            x.data().begin() + static_cast<std::ptrdiff_t>(end * q));
    return detail::make_result("slice_rows", Shape{end - begin, q}, std::move(out), {&x},
                               [x, begin, q](detail::Node& self) {
                                   auto gx = detail::grad_of(x.node());
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) gx[begin * q + i] += self.grad[i];
                               });
}

/// Single row as a rank-1 vector.
inline Tensor row(const Tensor& x, std::size_t i) { return reshape(slice_rows(x, i, i + 1), Shape{x.dim(1)}); }

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "concat_rows");
    detail::require_rank(b, 2, "concat_rows");
    if (a.dim(1) != b.dim(1)) throw DimensionError("concat_rows: column counts differ");
    std::vector<double> out(a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t na = a.numel();
    return detail::make_result("concat_rows", Shape{a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {&a, &b},
                               [a, b, na](detail::Node& self) {
                                   auto ga = detail::grad_of(a.node());
                                   auto gb = detail::grad_of(b.node());
                                   for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                                   for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[na + i];
                               });
}

/// Stacks equal-length vectors as the rows of a matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows: nothing to stack");
    const std::size_t q = rows[0].numel();
    std::vector<double> out;
    out.reserve(rows.size() * q);
    std::vector<const Tensor*> inputs;
    for (const Tensor& r : rows) {
        detail::require_rank(r, 1, "stack_rows");
        if (r.numel() != q) throw DimensionError("stack_rows: rows differ in length");
        out.insert(out.end(), r.data().begin(), r.data().end());
        inputs.push_back(&r);
    }
    return detail::make_result("stack_rows", Shape{rows.size(), q}, std::move(out), inputs,
                               [rows, q](detail::Node& self) {
                                   for (std::size_t i = 0; i < rows.size(); ++i) {
                                       auto g = detail::grad_of(rows[i].node());
                                       for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[i * q + j];
                                   }
                               });
}

/// Joins (h,w,c1) and (h,w,c2) along the channel axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 3, "concat_channels");
    detail::require_rank(b, 3, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1)) {
        throw DimensionError("concat_channels: spatial extents differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::size_t pixels = a.dim(0) * a.dim(1), ca = a.dim(2), cb = b.dim(2), c = ca + cb;
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(pixels * c);
    for (std::size_t p = 0; p < pixels; ++p) {
        std::copy_n(ad.data() + p * ca, ca, out.data() + p * c);
        std::copy_n(bd.data() + p * cb, cb, out.data() + p * c + ca);
    }
    return detail::make_result("concat_channels", Shape{a.dim(0), a.dim(1), c}, std::move(out), {&a, &b},
                               [a, b, pixels, ca, cb, c](detail::Node& self) {
                                   auto ga = detail::grad_of(a.node());
                                   auto gb = detail::grad_of(b.node());
                                   for (std::size_t p = 0; p < pixels; ++p) {
                                       if (!ga.empty())
                                           for (std::size_t k = 0; k < ca; ++k) ga[p * ca + k] += self.grad[p * c + k];
                                       if (!gb.empty())
                                           for (std::size_t k = 0; k < cb; ++k)
                                               gb[p * cb + k] += self.grad[p * c + ca + k];
                                   }
                               });
}

/// Row lookup: out[i] = table[ids[i]].
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    detail::require_rank(table, 2, "embedding");
    const std::size_t rows = table.dim(0), d = table.dim(1);
    std::vector<double> out(ids.size() * d);
    const auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) throw DimensionError("embedding: id out of range");
        std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    return detail::make_result("embedding", Shape{ids.size(), d}, std::move(out), {&table},
                               [table, ids, d](detail::Node& self) {
                                   auto gt = detail::grad_of(table.node());
                                   for (std::size_t i = 0; i < ids.size(); ++i)
                                       for (std::size_t j = 0; j < d; ++j)
                                           gt[static_cast<std::size_t>(ids[i]) * d + j] += self.grad[i * d + j];
                               });
}

// ---------------------------------------------------------------------------
// Normalisation and attention pieces

/// Row-wise softmax stabilised by the row max. Columns with key_mask[j]
/// true are excluded (probability exactly 0); a row with every column
/// excluded is a contract error.
inline Tensor softmax_rows(const Tensor& x, const std::vector<bool>& key_mask = {}) {
    detail::require_rank(x, 2, "softmax_rows");
    const std::size_t p = x.dim(0), q = x.dim(1);
    if (!key_mask.empty() && key_mask.size() != q) throw DimensionError("softmax_rows: mask length differs from columns");
    const auto xd = x.data();
    std::vector<double> out(p * q, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < q; ++j)
            if (key_mask.empty() || !key_mask[j]) mx = std::max(mx, xd[i * q + j]);
        if (q > 0 && mx == -std::numeric_limits<double>::infinity()) {
            throw ContractError("softmax_rows: every column of a row is masked");
        }
        double z = 0.0;
        for (std::size_t j = 0; j < q; ++j) {
            if (!key_mask.empty() && key_mask[j]) continue;
            const double e = std::exp(xd[i * q + j] - mx);
            out[i * q + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] /= z;
    }
    return detail::make_result("softmax_rows", x.shape(), std::move(out), {&x}, [x, p, q](detail::Node& self) {
        auto gx = detail::grad_of(x.node());
        for (std::size_t i = 0; i < p; ++i) {
            const double* y = self.data.data() + i * q;
            const double* g = self.grad.data() + i * q;
            double dot = 0.0;
            for (std::size_t j = 0; j < q; ++j) dot += y[j] * g[j];
            for (std::size_t j = 0; j < q; ++j) gx[i * q + j] += y[j] * (g[j] - dot);
        }
    });
}

/// Rows scaled to unit Euclidean norm; a zero row is degenerate.
inline Tensor l2_normalize_rows(const Tensor& x) {
    detail::require_rank(x, 2, "l2_normalize_rows");
    const std::size_t p = x.dim(0), q = x.dim(1);
    const auto xd = x.data();
    std::vector<double> out(p * q);
    std::vector<double> norms(p);
    for (std::size_t i = 0; i < p; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < q; ++j) s += xd[i * q + j] * xd[i * q + j];
        norms[i] = std::sqrt(s);
        if (norms[i] == 0.0) throw DegenerateInputError("l2_normalize_rows: zero-norm row " + std::to_string(i));
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] = xd[i * q + j] / norms[i];
    }
    return detail::make_result("l2_normalize_rows", x.shape(), std::move(out), {&x},
                               [x, p, q, norms](detail::Node& self) {
                                   auto gx = detail::grad_of(x.node());
                                   for (std::size_t i = 0; i < p; ++i) {
                                       const double* y = self.data.data() + i * q;
                                       const double* g = self.grad.data() + i * q;
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < q; ++j) dot += y[j] * g[j];
                                       for (std::size_t j = 0; j < q; ++j)
                                           gx[i * q + j] += (g[j] - y[j] * dot) / norms[i];
                                   }
                               });
}

namespace detail {

inline Tensor layernorm_impl(const Tensor& x, const Tensor* gamma, const Tensor* beta, double eps) {
    require_rank(x, 2, "layernorm_rows");
    const std::size_t p = x.dim(0), q = x.dim(1);
    if (gamma && (gamma->rank() != 1 || gamma->dim(0) != q)) throw DimensionError("layernorm_rows: gain length");
    if (beta && (beta->rank() != 1 || beta->dim(0) != q)) throw DimensionError("layernorm_rows: bias length");
    const auto xd = x.data();
    std::vector<double> normed(p * q);
    std::vector<double> inv_std(p);
    for (std::size_t i = 0; i < p; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < q; ++j) mu += xd[i * q + j];
        mu /= static_cast<double>(q);
        double var = 0.0;
        for (std::size_t j = 0; j < q; ++j) var += (xd[i * q + j] - mu) * (xd[i * q + j] - mu);
        var /= static_cast<double>(q);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < q; ++j) normed[i * q + j] = (xd[i * q + j] - mu) * inv_std[i];
    }
    std::vector<double> out = normed;
    if (gamma || beta) {
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) {
                double v = normed[i * q + j];
                if (gamma) v *= gamma->data()[j];
                if (beta) v += beta->data()[j];
                out[i * q + j] = v;
            }
    }
    Tensor g = gamma ? *gamma : Tensor();
    Tensor b = beta ? *beta : Tensor();
    return make_result("layernorm_rows", x.shape(), std::move(out), {&x, &g, &b},
                       [x, g, b, p, q, normed = std::move(normed), inv_std](Node& self) {
                           auto gx = grad_of(x.node());
                           auto gg = g.defined() ? grad_of(g.node()) : std::span<double>{};
                           auto gb = b.defined() ? grad_of(b.node()) : std::span<double>{};
                           std::vector<double> dy(q);
                           for (std::size_t i = 0; i < p; ++i) {
                               double mean_dy = 0.0, mean_dy_y = 0.0;
                               for (std::size_t j = 0; j < q; ++j) {
                                   const double go = self.grad[i * q + j];
                                   const double y = normed[i * q + j];
                                   if (!gg.empty()) gg[j] += go * y;
                                   if (!gb.empty()) gb[j] += go;
                                   dy[j] = g.defined() ? go * g.data()[j] : go;
                                   mean_dy += dy[j];
                                   mean_dy_y += dy[j] * y;
                               }
                               if (gx.empty()) continue;
                               mean_dy /= static_cast<double>(q);
                               mean_dy_y /= static_cast<double>(q);
                               for (std::size_t j = 0; j < q; ++j)
                                   gx[i * q + j] += inv_std[i] * (dy[j] - mean_dy - normed[i * q + j] * mean_dy_y);
                           }
                       });
}

} // namespace detail

inline constexpr double kLayerNormEps = 1e-12;

/// Zero-mean, unit-variance rows.
inline Tensor layernorm_rows(const Tensor& x, double eps = kLayerNormEps) {
    return detail::layernorm_impl(x, nullptr, nullptr, eps);
}

/// Normalised rows followed by a per-column gain and bias.
inline Tensor layernorm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
    return detail::layernorm_impl(x, &gain, &bias, eps);
}

/// Cosine similarity of two equal-length vectors as a rank-0 tensor.
inline Tensor cosine(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 1, "cosine");
    detail::require_same_shape(a, b, "cosine");
    if (a.numel() == 0) throw DimensionError("cosine: empty vectors");
    const auto ad = a.data();
    const auto bd = b.data();
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < ad.size(); ++i) {
        dot += ad[i] * bd[i];
        na += ad[i] * ad[i];
        nb += bd[i] * bd[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine: zero-norm input");
    const double c = std::clamp(dot / (na * nb), -1.0, 1.0);
    return detail::make_result("cosine", Shape{}, {c}, {&a, &b}, [a, b, na, nb, c](detail::Node& self) {
        const double g = self.grad[0];
        auto ga = detail::grad_of(a.node());
        auto gb = detail::grad_of(b.node());
        const auto ad = a.data();
        const auto bd = b.data();
        for (std::size_t i = 0; i < ad.size(); ++i) {
            if (!ga.empty()) ga[i] += g * (bd[i] / (na * nb) - c * ad[i] / (na * na));
            if (!gb.empty()) gb[i] += g * (ad[i] / (na * nb) - c * bd[i] / (nb * nb));
        }
    });
}

/// Mean over rows of -log softmax(logits)[row, target[row]].
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& targets) {
    detail::require_rank(logits, 2, "cross_entropy_rows");
    const std::size_t p = logits.dim(0), q = logits.dim(1);
    if (targets.size() != p) throw DimensionError("cross_entropy_rows: one target per row required");
    const auto ld = logits.data();
    std::vector<double> probs(p * q);
    double loss = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        if (targets[i] >= q) throw DimensionError("cross_entropy_rows: target out of range");
        double mx = ld[i * q];
        for (std::size_t j = 1; j < q; ++j) mx = std::max(mx, ld[i * q + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < q; ++j) z += std::exp(ld[i * q + j] - mx);
        const double lse = mx + std::log(z);
        loss += lse - ld[i * q + targets[i]];
        for (std::size_t j = 0; j < q; ++j) probs[i * q + j] = std::exp(ld[i * q + j] - lse);
    }
    loss /= static_cast<double>(p);
    return detail::make_result("cross_entropy_rows", Shape{}, {loss}, {&logits},
                               [logits, targets, probs = std::move(probs), p, q](detail::Node& self) {
                                   auto gl = detail::grad_of(logits.node());
                                   const double s = self.grad[0] / static_cast<double>(p);
                                   for (std::size_t i = 0; i < p; ++i)
                                       for (std::size_t j = 0; j < q; ++j)
                                           gl[i * q + j] += s * (probs[i * q + j] - (j == targets[i] ? 1.0 : 0.0));
                               });
}

// ---------------------------------------------------------------------------
// Spatial kernels on (h, w, c) maps

/// Same-padded, stride-1 convolution. weight is (k, k, c_in, c_out) with
/// odd k; bias is (c_out).
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_rank(x, 3, "conv2d");
    detail::require_rank(weight, 4, "conv2d");
    detail::require_rank(bias, 1, "conv2d");
    const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
    const std::size_t k = weight.dim(0), cout = weight.dim(3);
    if (weight.dim(1) != k || k % 2 == 0 || weight.dim(2) != cin || bias.dim(0) != cout) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                             shape_str(x.shape()));
    }
    const long r = static_cast<long>(k / 2);
    const auto xd = x.data();
    const auto wd = weight.data();
    const auto bd = bias.data();
    std::vector<double> out(h * w * cout);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
            double* o = out.data() + (y * w + xx) * cout;
            for (std::size_t c = 0; c < cout; ++c) o[c] = bd[c];
            for (long ky = -r; ky <= r; ++ky) {
                const long sy = static_cast<long>(y) + ky;
                if (sy < 0 || sy >= static_cast<long>(h)) continue;
                for (long kx = -r; kx <= r; ++kx) {
                    const long sx = static_cast<long>(xx) + kx;
                    if (sx < 0 || sx >= static_cast<long>(w)) continue;
                    const double* in = xd.data() + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * cin;
                    const double* wk =
                        wd.data() + (static_cast<std::size_t>(ky + r) * k + static_cast<std::size_t>(kx + r)) * cin * cout;
                    for (std::size_t i = 0; i < cin; ++i) {
                        const double v = in[i];
                        const double* wrow = wk + i * cout;
                        for (std::size_t c = 0; c < cout; ++c) o[c] += v * wrow[c];
                    }
                }
            }
        }
    }
    return detail::make_result(
        "conv2d", Shape{h, w, cout}, std::move(out), {&x, &weight, &bias},
        [x, weight, bias, h, w, cin, cout, k, r](detail::Node& self) {
            auto gx = detail::grad_of(x.node());
            auto gw = detail::grad_of(weight.node());
            auto gb = detail::grad_of(bias.node());
            const auto xd = x.data();
            const auto wd = weight.data();
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const double* g = self.grad.data() + (y * w + xx) * cout;
                    if (!gb.empty())
                        for (std::size_t c = 0; c < cout; ++c) gb[c] += g[c];
                    for (long ky = -r; ky <= r; ++ky) {
                        const long sy = static_cast<long>(y) + ky;
                        if (sy < 0 || sy >= static_cast<long>(h)) continue;
                        for (long kx = -r; kx <= r; ++kx) {
                            const long sx = static_cast<long>(xx) + kx;
                            if (sx < 0 || sx >= static_cast<long>(w)) continue;
                            const std::size_t src = (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * cin;
                            const std::size_t woff =
                                (static_cast<std::size_t>(ky + r) * k + static_cast<std::size_t>(kx + r)) * cin * cout;
                            for (std::size_t i = 0; i < cin; ++i) {
                                const double* wrow = wd.data() + woff + i * cout;
                                if (!gx.empty()) {
                                    double s = 0.0;
                                    for (std::size_t c = 0; c < cout; ++c) s += g[c] * wrow[c];
                                    gx[src + i] += s;
                                }
                                if (!gw.empty()) {
                                    const double v = xd[src + i];
                                    double* gwrow = gw.data() + woff + i * cout;
                                    for (std::size_t c = 0; c < cout; ++c) gwrow[c] += v * g[c];
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Feature-wise modulation: x * (1 + scale[c]) + shift[c].
inline Tensor channel_affine(const Tensor& x, const Tensor& scale_c, const Tensor& shift_c) {
    detail::require_rank(x, 3, "channel_affine");
    const std::size_t c = x.dim(2), pixels = x.dim(0) * x.dim(1);
    if (scale_c.rank() != 1 || shift_c.rank() != 1 || scale_c.dim(0) != c || shift_c.dim(0) != c) {
        throw DimensionError("channel_affine: modulation length differs from channel count");
    }
    const auto xd = x.data();
    const auto sd = scale_c.data();
    const auto td = shift_c.data();
    std::vector<double> out(xd.size());
    for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t k = 0; k < c; ++k) out[p * c + k] = xd[p * c + k] * (1.0 + sd[k]) + td[k];
    return detail::make_result("channel_affine", x.shape(), std::move(out), {&x, &scale_c, &shift_c},
                               [x, scale_c, shift_c, c, pixels](detail::Node& self) {
                                   auto gx = detail::grad_of(x.node());
                                   auto gs = detail::grad_of(scale_c.node());
                                   auto gt = detail::grad_of(shift_c.node());
                                   const auto xd = x.data();
                                   const auto sd = scale_c.data();
                                   for (std::size_t p = 0; p < pixels; ++p)
                                       for (std::size_t k = 0; k < c; ++k) {
                                           const double g = self.grad[p * c + k];
                                           if (!gx.empty()) gx[p * c + k] += g * (1.0 + sd[k]);
                                           if (!gs.empty()) gs[k] += g * xd[p * c + k];
                                           if (!gt.empty()) gt[k] += g;
                                       }
                               });
}

/// Nearest-neighbour upsampling of an (h, w) map by an integer factor.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
    detail::require_rank(x, 2, "upsample_nearest");
    const std::size_t h = x.dim(0), w = x.dim(1), H = h * factor, W = w * factor;
    const auto xd = x.data();
    std::vector<double> out(H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) out[y * W + xx] = xd[(y / factor) * w + xx / factor];
    return detail::make_result("upsample_nearest", Shape{H, W}, std::move(out), {&x},
                               [x, w, W, H, factor](detail::Node& self) {
                                   auto gx = detail::grad_of(x.node());
                                   for (std::size_t y = 0; y < H; ++y)
                                       for (std::size_t xx = 0; xx < W; ++xx)
                                           gx[(y / factor) * w + xx / factor] += self.grad[y * W + xx];
                               });
}

/// Splits an (h, w, c) image into non-overlapping p x p patches, one row
/// per patch in raster order, each flattened as (dy, dx, channel).
inline Tensor patchify(const Tensor& x, std::size_t p) {
    detail::require_rank(x, 3, "patchify");
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (p == 0 || h % p != 0 || w % p != 0) throw DimensionError("patchify: extent not divisible by patch size");
    const std::size_t gh = h / p, gw = w / p, cols = p * p * c;
    const auto xd = x.data();
    std::vector<double> out(gh * gw * cols);
    auto src = [=](std::size_t patch, std::size_t j) {
        const std::size_t py = patch / gw, px = patch % gw;
        const std::size_t dy = j / (p * c), dx = (j / c) % p, k = j % c;
        return ((py * p + dy) * w + px * p + dx) * c + k;
    };
    for (std::size_t i = 0; i < gh * gw; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = xd[src(i, j)];
    return detail::make_result("patchify", Shape{gh * gw, cols}, std::move(out), {&x},
                               [x, gh, gw, cols, src](detail::Node& self) {
                                   auto gx = detail::grad_of(x.node());
                                   for (std::size_t i = 0; i < gh * gw; ++i)
                                       for (std::size_t j = 0; j < cols; ++j) gx[src(i, j)] += self.grad[i * cols + j];
                               });
}

/// Inverse of patchify: rows of p x p x c patches back to an (h, w, c) image.
inline Tensor unpatchify(const Tensor& x, std::size_t h, std::size_t w, std::size_t p) {
    detail::require_rank(x, 2, "unpatchify");
    if (p == 0 || h % p != 0 || w % p != 0 || x.dim(1) % (p * p) != 0 || x.dim(0) != (h / p) * (w / p)) {
        throw DimensionError("unpatchify: " + shape_str(x.shape()) + " does not tile a " + std::to_string(h) + "x" +
                             std::to_string(w) + " image");
    }
    const std::size_t c = x.dim(1) / (p * p), gw = w / p, cols = x.dim(1);
    const auto xd = x.data();
    std::vector<double> out(h * w * c);
    auto dst = [=](std::size_t patch, std::size_t j) {
        const std::size_t py = patch / gw, px = patch % gw;
        const std::size_t dy = j / (p * c), dx = (j / c) % p, k = j % c;
        return ((py * p + dy) * w + px * p + dx) * c + k;
    };
    for (std::size_t i = 0; i < x.dim(0); ++i)
        for (std::size_t j = 0; j < cols; ++j) out[dst(i, j)] = xd[i * cols + j];
    const std::size_t n = x.dim(0);
    return detail::make_result("unpatchify", Shape{h, w, c}, std::move(out), {&x}, [x, n, cols, dst](detail::Node& self) {
        auto gx = detail::grad_of(x.node());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += self.grad[dst(i, j)];
    });
}

/// m * a + (1 - m) * b with an (h, w) mask shared across channels of the
/// (h, w, c) operands.
inline Tensor blend_mask(const Tensor& a, const Tensor& b, const Tensor& m) {
    detail::require_rank(a, 3, "blend_mask");
    detail::require_same_shape(a, b, "blend_mask");
    detail::require_rank(m, 2, "blend_mask");
    if (m.dim(0) != a.dim(0) || m.dim(1) != a.dim(1)) throw DimensionError("blend_mask: mask extent differs");
    const std::size_t pixels = m.numel(), c = a.dim(2);
    const auto ad = a.data();
    const auto bd = b.data();
    const auto md = m.data();
    std::vector<double> out(ad.size());
    for (std::size_t p = 0; p < pixels; ++p) {
        const double mv = md[p];
        for (std::size_t k = 0; k < c; ++k) out[p * c + k] = mv * ad[p * c + k] + (1.0 - mv) * bd[p * c + k];
    }
    return detail::make_result("blend_mask", a.shape(), std::move(out), {&a, &b, &m},
                               [a, b, m, pixels, c](detail::Node& self) {
                                   auto ga = detail::grad_of(a.node());
                                   auto gb = detail::grad_of(b.node());
                                   auto gm = detail::grad_of(m.node());
                                   const auto ad = a.data();
                                   const auto bd = b.data();
                                   const auto md = m.data();
                                   for (std::size_t p = 0; p < pixels; ++p)
                                       for (std::size_t k = 0; k < c; ++k) {
                                           const double g = self.grad[p * c + k];
                                           if (!ga.empty()) ga[p * c + k] += g * md[p];
                                           if (!gb.empty()) gb[p * c + k] += g * (1.0 - md[p]);
                                           if (!gm.empty()) gm[p] += g * (ad[p * c + k] - bd[p * c + k]);
                                       }
                               });
}

} // namespace rged
