#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "anyad/blas.hpp"
#include "anyad/graph.hpp"

// Primitive ops recorded on the tape. Values are computed eagerly; each op
// installs a closure that adds into its inputs' adjoints. Reductions use
// double accumulators regardless of the tensor scalar type.
namespace anyad::ops {

template <typename T>
using Id = typename GraphT<T>::NodeId;

namespace detail {

inline constexpr double kInvSqrt2 = 0.7071067811865475244;
inline constexpr double kInvSqrt2Pi = 0.3989422804014326779;

template <typename T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.dims != b.dims)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.dims) + " vs " + shape_str(b.dims));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Id<T> add(GraphT<T>& g, Id<T> a, Id<T> b) {
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    detail::check_same_shape("add", va, vb);
    TensorT<T> out(va.dims);
    for (std::int64_t i = 0; i < va.numel(); ++i) out.data[i] = va.data[i] + vb.data[i];
    return g.record("add", {a, b}, std::move(out), [a, b](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        if (gr.needs_grad(a)) {
            auto& da = gr.adjoint(a);
            for (std::size_t i = 0; i < adj.size(); ++i) da[i] += adj[i];
        }
        if (gr.needs_grad(b)) {
            auto& db = gr.adjoint(b);
            for (std::size_t i = 0; i < adj.size(); ++i) db[i] += adj[i];
        }
    });
}

template <typename T>
Id<T> sub(GraphT<T>& g, Id<T> a, Id<T> b) {
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    detail::check_same_shape("sub", va, vb);
    TensorT<T> out(va.dims);
    for (std::int64_t i = 0; i < va.numel(); ++i) out.data[i] = va.data[i] - vb.data[i];
    return g.record("sub", {a, b}, std::move(out), [a, b](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        if (gr.needs_grad(a)) {
            auto& da = gr.adjoint(a);
            for (std::size_t i = 0; i < adj.size(); ++i) da[i] += adj[i];
        }
        if (gr.needs_grad(b)) {
            auto& db = gr.adjoint(b);
            for (std::size_t i = 0; i < adj.size(); ++i) db[i] -= adj[i];
        }
    });
}

template <typename T>
Id<T> mul(GraphT<T>& g, Id<T> a, Id<T> b) {
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    detail::check_same_shape("mul", va, vb);
    TensorT<T> out(va.dims);
    for (std::int64_t i = 0; i < va.numel(); ++i) out.data[i] = va.data[i] * vb.data[i];
    auto pa = g.value_ptr(a);
    auto pb = g.value_ptr(b);
    return g.record("mul", {a, b}, std::move(out), [a, b, pa, pb](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        if (gr.needs_grad(a)) {
            auto& da = gr.adjoint(a);
            for (std::size_t i = 0; i < adj.size(); ++i) da[i] += adj[i] * pb->data[i];
        }
        if (gr.needs_grad(b)) {
            auto& db = gr.adjoint(b);
            for (std::size_t i = 0; i < adj.size(); ++i) db[i] += adj[i] * pa->data[i];
        }
    });
}

template <typename T>
Id<T> scale(GraphT<T>& g, Id<T> a, T c) {
    const auto& va = g.value(a);
    TensorT<T> out(va.dims);
    for (std::int64_t i = 0; i < va.numel(); ++i) out.data[i] = va.data[i] * c;
    return g.record("scale", {a}, std::move(out), [a, c](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        auto& da = gr.adjoint(a);
        for (std::size_t i = 0; i < adj.size(); ++i) da[i] += adj[i] * c;
    });
}

// a + alpha * b, used to compose weighted loss sums.
template <typename T>
Id<T> add_scaled(GraphT<T>& g, Id<T> a, Id<T> b, T alpha) {
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    detail::check_same_shape("add_scaled", va, vb);
    TensorT<T> out(va.dims);
    for (std::int64_t i = 0; i < va.numel(); ++i) out.data[i] = va.data[i] + alpha * vb.data[i];
    return g.record("add_scaled", {a, b}, std::move(out), [a, b, alpha](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        if (gr.needs_grad(a)) {
            auto& da = gr.adjoint(a);
            for (std::size_t i = 0; i < adj.size(); ++i) da[i] += adj[i];
        }
        if (gr.needs_grad(b)) {
            auto& db = gr.adjoint(b);
            for (std::size_t i = 0; i < adj.size(); ++i) db[i] += adj[i] * alpha;
        }
    });
}

// x + b where b's shape equals a trailing suffix of x's shape. Covers bias
// vectors [D] and positional grids [T,D] broadcast over the batch.
template <typename T>
Id<T> add_broadcast(GraphT<T>& g, Id<T> x, Id<T> b) {
    const auto& vx = g.value(x);
    const auto& vb = g.value(b);
    if (vb.rank() > vx.rank() ||
        !std::equal(vb.dims.begin(), vb.dims.end(), vx.dims.end() - static_cast<std::ptrdiff_t>(vb.rank())))
        throw ShapeError("add_broadcast: " + shape_str(vb.dims) + " is not a suffix of " + shape_str(vx.dims));
    const std::int64_t block = vb.numel();
    const std::int64_t rows = vx.numel() / block;
    TensorT<T> out(vx.dims);
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < block; ++j) out.data[r * block + j] = vx.data[r * block + j] + vb.data[j];
    return g.record("add_broadcast", {x, b}, std::move(out), [x, b, rows, block](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        if (gr.needs_grad(x)) {
            auto& dx = gr.adjoint(x);
            for (std::size_t i = 0; i < adj.size(); ++i) dx[i] += adj[i];
        }
        if (gr.needs_grad(b)) {
            auto& db = gr.adjoint(b);
            for (std::int64_t j = 0; j < block; ++j) {
                double s = 0.0;
                for (std::int64_t r = 0; r < rows; ++r) s += static_cast<double>(adj[r * block + j]);
                db[j] += static_cast<T>(s);
            }
        }
    });
}

template <typename T>
Id<T> relu(GraphT<T>& g, Id<T> a) {
    const auto& va = g.value(a);
    TensorT<T> out(va.dims);
    for (std::int64_t i = 0; i < va.numel(); ++i) out.data[i] = va.data[i] > T(0) ? va.data[i] : T(0);
    auto pa = g.value_ptr(a);
    return g.record("relu", {a}, std::move(out), [a, pa](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        auto& da = gr.adjoint(a);
        for (std::size_t i = 0; i < adj.size(); ++i)
            if (pa->data[i] > T(0)) da[i] += adj[i];
    });
}

// Exact GELU, x * Phi(x) with the Gaussian CDF via erf.
template <typename T>
Id<T> gelu(GraphT<T>& g, Id<T> a) {
    const auto& va = g.value(a);
    TensorT<T> out(va.dims);
    for (std::int64_t i = 0; i < va.numel(); ++i) {
        const double x = static_cast<double>(va.data[i]);
        out.data[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * detail::kInvSqrt2)));
    }
    auto pa = g.value_ptr(a);
    return g.record("gelu", {a}, std::move(out), [a, pa](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        auto& da = gr.adjoint(a);
        for (std::size_t i = 0; i < adj.size(); ++i) {
            const double x = static_cast<double>(pa->data[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x * detail::kInvSqrt2));
            const double pdf = detail::kInvSqrt2Pi * std::exp(-0.5 * x * x);
            da[i] += adj[i] * static_cast<T>(cdf + x * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

template <typename T>
Id<T> reshape(GraphT<T>& g, Id<T> a, Shape dims) {
    const auto& va = g.value(a);
    if (shape_numel(dims) != va.numel())
        throw ShapeError("reshape: cannot view " + shape_str(va.dims) + " as " + shape_str(dims));
    TensorT<T> out(std::move(dims), va.data);
    return g.record("reshape", {a}, std::move(out), [a](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        auto& da = gr.adjoint(a);
        for (std::size_t i = 0; i < adj.size(); ++i) da[i] += adj[i];
    });
}

// [d0,d1,d2,d3] -> [d0,d2,d1,d3]; used for attention head split/merge.
template <typename T>
Id<T> transpose_12(GraphT<T>& g, Id<T> a) {
    const auto& va = g.value(a);
    if (va.rank() != 4) throw ShapeError("transpose_12 expects rank 4, got " + shape_str(va.dims));
    const std::int64_t d0 = va.dims[0], d1 = va.dims[1], d2 = va.dims[2], d3 = va.dims[3];
    TensorT<T> out({d0, d2, d1, d3});
    for (std::int64_t i = 0; i < d0; ++i)
        for (std::int64_t j = 0; j < d1; ++j)
            for (std::int64_t k = 0; k < d2; ++k)
                std::memcpy(&out.data[((i * d2 + k) * d1 + j) * d3], &va.data[((i * d1 + j) * d2 + k) * d3],
                            sizeof(T) * static_cast<std::size_t>(d3));
    return g.record("transpose_12", {a}, std::move(out), [a, d0, d1, d2, d3](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        auto& da = gr.adjoint(a);
        for (std::int64_t i = 0; i < d0; ++i)
            for (std::int64_t k = 0; k < d2; ++k)
                for (std::int64_t j = 0; j < d1; ++j) {
                    const T* src = &adj[((i * d2 + k) * d1 + j) * d3];
                    T* dst = &da[((i * d1 + j) * d2 + k) * d3];
                    for (std::int64_t l = 0; l < d3; ++l) dst[l] += src[l];
                }
    });
}

// Tiles x over a new leading batch dimension; gradient sums over the copies.
template <typename T>
Id<T> broadcast_to_batch(GraphT<T>& g, Id<T> x, std::int64_t batch) {
    const auto& vx = g.value(x);
    Shape dims;
    dims.reserve(vx.rank() + 1);
    dims.push_back(batch);
    dims.insert(dims.end(), vx.dims.begin(), vx.dims.end());
    TensorT<T> out(std::move(dims));
    const std::int64_t block = vx.numel();
    for (std::int64_t b = 0; b < batch; ++b)
        std::memcpy(&out.data[b * block], vx.data.data(), sizeof(T) * static_cast<std::size_t>(block));
    return g.record("broadcast_to_batch", {x}, std::move(out), [x, batch, block](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        auto& dx = gr.adjoint(x);
        for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t i = 0; i < block; ++i) dx[i] += adj[b * block + i];
    });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// Batched matrix product with optional transposes of the trailing two dims.
// Either both operands carry identical leading batch dims, or `b` is a rank-2
// weight shared across the batch (its gradient then sums over the batch).
template <typename T>
Id<T> matmul(GraphT<T>& g, Id<T> a, Id<T> b, bool trans_a = false, bool trans_b = false) {
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    if (va.rank() < 2 || vb.rank() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(va.dims) + " and " +
                         shape_str(vb.dims));
    const bool b_shared = vb.rank() == 2 && va.rank() > 2;
    if (!b_shared && va.rank() != vb.rank())
        throw ShapeError("matmul: rank mismatch " + shape_str(va.dims) + " vs " + shape_str(vb.dims));

    Shape batch_dims(va.dims.begin(), va.dims.end() - 2);
    if (!b_shared && !std::equal(batch_dims.begin(), batch_dims.end(), vb.dims.begin()))
        throw ShapeError("matmul: batch dims differ, " + shape_str(va.dims) + " vs " + shape_str(vb.dims));

    const std::int64_t m = trans_a ? va.dims[va.rank() - 1] : va.dims[va.rank() - 2];
    const std::int64_t ka = trans_a ? va.dims[va.rank() - 2] : va.dims[va.rank() - 1];
    const std::int64_t kb = trans_b ? vb.dims[vb.rank() - 1] : vb.dims[vb.rank() - 2];
    const std::int64_t n = trans_b ? vb.dims[vb.rank() - 2] : vb.dims[vb.rank() - 1];
    if (ka != kb)
        throw ShapeError("matmul: inner dims disagree, " + shape_str(va.dims) + (trans_a ? "^T" : "") + " vs " +
                         shape_str(vb.dims) + (trans_b ? "^T" : ""));

    const std::int64_t batch = shape_numel(batch_dims);
    const std::int64_t a_block = m * ka;
    const std::int64_t b_block = kb * n;
    const std::int64_t c_block = m * n;

    Shape out_dims = batch_dims;
    out_dims.push_back(m);
    out_dims.push_back(n);
    TensorT<T> out(std::move(out_dims));
    const std::size_t um = static_cast<std::size_t>(m), un = static_cast<std::size_t>(n),
                      uk = static_cast<std::size_t>(ka);
    for (std::int64_t i = 0; i < batch; ++i)
        gemm(trans_a, trans_b, um, un, uk, T(1), va.data.data() + i * a_block,
             vb.data.data() + (b_shared ? 0 : i * b_block), T(0), out.data.data() + i * c_block);

    auto pa = g.value_ptr(a);
    auto pb = g.value_ptr(b);
    auto bw = [a, b, pa, pb, trans_a, trans_b, b_shared, batch, a_block, b_block, c_block, um, un,
               uk](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        if (gr.needs_grad(a)) {
            auto& da = gr.adjoint(a);
            for (std::int64_t i = 0; i < batch; ++i) {
                const T* gi = adj.data() + i * c_block;
                const T* bi = pb->data.data() + (b_shared ? 0 : i * b_block);
                T* dai = da.data() + i * a_block;
                if (!trans_a) {
                    // dA += op(G x B): (m,k)
                    gemm(false, !trans_b, um, uk, un, T(1), gi, bi, T(1), dai);
                } else if (!trans_b) {
                    // A is (k,m): dA += B x G^T
                    gemm(false, true, uk, um, un, T(1), bi, gi, T(1), dai);
                } else {
                    // A is (k,m), B is (n,k): dA += B^T x G^T
                    gemm(true, true, uk, um, un, T(1), bi, gi, T(1), dai);
                }
            }
        }
        if (gr.needs_grad(b)) {
            auto& db = gr.adjoint(b);
            for (std::int64_t i = 0; i < batch; ++i) {
                const T* gi = adj.data() + i * c_block;
                const T* ai = pa->data.data() + i * a_block;
                T* dbi = db.data() + (b_shared ? 0 : i * b_block);
                if (!trans_b) {
                    // B is (k,n): dB += op(A)^T x G
                    gemm(!trans_a, false, uk, un, um, T(1), ai, gi, T(1), dbi);
                } else if (!trans_a) {
                    // B is (n,k): dB += G^T x A
                    gemm(true, false, un, uk, um, T(1), gi, ai, T(1), dbi);
                } else {
                    // B is (n,k), A is (k,m): dB += G^T x A^T
                    gemm(true, true, un, uk, um, T(1), gi, ai, T(1), dbi);
                }
            }
        }
    };
    return g.record("matmul", {a, b}, std::move(out), std::move(bw));
}

// ---------------------------------------------------------------------------
// normalization and reductions
// ---------------------------------------------------------------------------

template <typename T>
Id<T> softmax_lastdim(GraphT<T>& g, Id<T> a) {
    const auto& va = g.value(a);
    if (va.rank() < 1 || va.dims.back() < 1)
        throw ShapeError("softmax_lastdim: need a non-empty last dim, got " + shape_str(va.dims));
    const std::int64_t L = va.dims.back();
    const std::int64_t rows = va.numel() / L;
    TensorT<T> out(va.dims);
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* x = va.data.data() + r * L;
        T* y = out.data.data() + r * L;
        T mx = x[0];
        for (std::int64_t j = 1; j < L; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < L; ++j) {
            const double e = std::exp(static_cast<double>(x[j] - mx));
            y[j] = static_cast<T>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < L; ++j) y[j] = static_cast<T>(static_cast<double>(y[j]) * inv);
    }
    return g.record("softmax_lastdim", {a}, std::move(out), [a, rows, L](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        const auto& s = gr.value(self).data;
        auto& da = gr.adjoint(a);
        for (std::int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < L; ++j)
                dot += static_cast<double>(adj[r * L + j]) * static_cast<double>(s[r * L + j]);
            for (std::int64_t j = 0; j < L; ++j)
                da[r * L + j] += static_cast<T>(static_cast<double>(s[r * L + j]) *
                                                (static_cast<double>(adj[r * L + j]) - dot));
        }
    });
}

template <typename T>
Id<T> layer_norm(GraphT<T>& g, Id<T> x, Id<T> gamma, Id<T> beta, double eps) {
    const auto& vx = g.value(x);
    const auto& vg = g.value(gamma);
    const auto& vb = g.value(beta);
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    const std::int64_t D = vx.dims.back();
    if (vg.dims != Shape{D} || vb.dims != Shape{D})
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(D) + "], got " + shape_str(vg.dims) +
                         " and " + shape_str(vb.dims));
    const std::int64_t rows = vx.numel() / D;
    TensorT<T> out(vx.dims);
    auto xhat = std::make_shared<std::vector<T>>(vx.data.size());
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = vx.data.data() + r * D;
        double mu = 0.0;
        for (std::int64_t j = 0; j < D; ++j) mu += static_cast<double>(xr[j]);
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (std::int64_t j = 0; j < D; ++j) {
            const double c = static_cast<double>(xr[j]) - mu;
            var += c * c;
        }
        var /= static_cast<double>(D);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[static_cast<std::size_t>(r)] = static_cast<T>(rs);
        for (std::int64_t j = 0; j < D; ++j) {
            const T xh = static_cast<T>((static_cast<double>(xr[j]) - mu) * rs);
            (*xhat)[static_cast<std::size_t>(r * D + j)] = xh;
            out.data[r * D + j] = xh * vg.data[j] + vb.data[j];
        }
    }
    auto pg = g.value_ptr(gamma);
    auto bw = [x, gamma, beta, pg, xhat, rstd, rows, D](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        if (gr.needs_grad(beta)) {
            auto& db = gr.adjoint(beta);
            for (std::int64_t j = 0; j < D; ++j) {
                double s = 0.0;
                for (std::int64_t r = 0; r < rows; ++r) s += static_cast<double>(adj[r * D + j]);
                db[j] += static_cast<T>(s);
            }
        }
        if (gr.needs_grad(gamma)) {
            auto& dg = gr.adjoint(gamma);
            for (std::int64_t j = 0; j < D; ++j) {
                double s = 0.0;
                for (std::int64_t r = 0; r < rows; ++r)
                    s += static_cast<double>(adj[r * D + j]) * static_cast<double>((*xhat)[r * D + j]);
                dg[j] += static_cast<T>(s);
            }
        }
        if (gr.needs_grad(x)) {
            auto& dx = gr.adjoint(x);
            for (std::int64_t r = 0; r < rows; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (std::int64_t j = 0; j < D; ++j) {
                    const double h = static_cast<double>(adj[r * D + j]) * static_cast<double>(pg->data[j]);
                    m1 += h;
                    m2 += h * static_cast<double>((*xhat)[r * D + j]);
                }
                m1 /= static_cast<double>(D);
                m2 /= static_cast<double>(D);
                const double rs = static_cast<double>((*rstd)[static_cast<std::size_t>(r)]);
                for (std::int64_t j = 0; j < D; ++j) {
                    const double h = static_cast<double>(adj[r * D + j]) * static_cast<double>(pg->data[j]);
                    dx[r * D + j] +=
                        static_cast<T>(rs * (h - m1 - static_cast<double>((*xhat)[r * D + j]) * m2));
                }
            }
        }
    };
    return g.record("layer_norm", {x, gamma, beta}, std::move(out), std::move(bw));
}

template <typename T>
Id<T> mean_all(GraphT<T>& g, Id<T> a) {
    const auto& va = g.value(a);
    double s = 0.0;
    for (T v : va.data) s += static_cast<double>(v);
    const std::int64_t n = va.numel();
    TensorT<T> out(Shape{}, {static_cast<T>(s / static_cast<double>(n))});
    return g.record("mean_all", {a}, std::move(out), [a, n](GraphT<T>& gr, Id<T> self) {
        const T go = gr.adjoint(self)[0];
        auto& da = gr.adjoint(a);
        const T c = go / static_cast<T>(n);
        for (auto& v : da) v += c;
    });
}

template <typename T>
Id<T> sum_lastdim(GraphT<T>& g, Id<T> a) {
    const auto& va = g.value(a);
    if (va.rank() < 1) throw ShapeError("sum_lastdim: need rank >= 1");
    const std::int64_t L = va.dims.back();
    const std::int64_t rows = va.numel() / L;
    Shape dims(va.dims.begin(), va.dims.end() - 1);
    TensorT<T> out(std::move(dims));
    for (std::int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::int64_t j = 0; j < L; ++j) s += static_cast<double>(va.data[r * L + j]);
        out.data[r] = static_cast<T>(s);
    }
    return g.record("sum_lastdim", {a}, std::move(out), [a, rows, L](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        auto& da = gr.adjoint(a);
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < L; ++j) da[r * L + j] += adj[r];
    });
}

// Mean over all leading dims: [..., D] -> [D].
template <typename T>
Id<T> mean_over_rows(GraphT<T>& g, Id<T> a) {
    const auto& va = g.value(a);
    if (va.rank() < 1) throw ShapeError("mean_over_rows: need rank >= 1");
    const std::int64_t D = va.dims.back();
    const std::int64_t rows = va.numel() / D;
    TensorT<T> out({D});
    for (std::int64_t j = 0; j < D; ++j) {
        double s = 0.0;
        for (std::int64_t r = 0; r < rows; ++r) s += static_cast<double>(va.data[r * D + j]);
        out.data[j] = static_cast<T>(s / static_cast<double>(rows));
    }
    return g.record("mean_over_rows", {a}, std::move(out), [a, rows, D](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        auto& da = gr.adjoint(a);
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < D; ++j) da[r * D + j] += adj[j] / static_cast<T>(rows);
    });
}

// ---------------------------------------------------------------------------
// cosine distances
// ---------------------------------------------------------------------------

namespace detail {

// Gradient factors of 1 - <a,b>/(max(|a|,eps) * max(|b|,eps)) w.r.t. a.
// When |a| is clamped to eps the norm contributes no gradient.
template <typename T>
inline void cosine_row_grad(const T* a, const T* b, std::int64_t D, double dot, double na, double nb,
                            double eps, double coef, T* da) {
    const double ca = std::max(na, eps), cb = std::max(nb, eps);
    const double den = ca * cb;
    const double t1 = coef / den;
    const double t2 = (na > eps) ? coef * dot / (den * ca * na) : 0.0;
    for (std::int64_t j = 0; j < D; ++j)
        da[j] += static_cast<T>(-t1 * static_cast<double>(b[j]) + t2 * static_cast<double>(a[j]));
}

}  // namespace detail

// Row-wise cosine distance over matched rows (last dim reduced):
// out_r = 1 - <a_r,b_r>/(max(|a_r|,eps)*max(|b_r|,eps)), in [0, 2].
template <typename T>
Id<T> cosine_distance_rows(GraphT<T>& g, Id<T> a, Id<T> b, double eps = 1e-8) {
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    detail::check_same_shape("cosine_distance_rows", va, vb);
    if (eps <= 0.0) throw ContractError("cosine_distance_rows: eps must be positive");
    const std::int64_t D = va.dims.back();
    const std::int64_t rows = va.numel() / D;
    Shape dims(va.dims.begin(), va.dims.end() - 1);
    TensorT<T> out(std::move(dims));
    auto saved = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * 3);
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* ar = va.data.data() + r * D;
        const T* br = vb.data.data() + r * D;
        double dot = 0.0, naa = 0.0, nbb = 0.0;
        for (std::int64_t j = 0; j < D; ++j) {
            dot += static_cast<double>(ar[j]) * static_cast<double>(br[j]);
            naa += static_cast<double>(ar[j]) * static_cast<double>(ar[j]);
            nbb += static_cast<double>(br[j]) * static_cast<double>(br[j]);
        }
        const double na = std::sqrt(naa), nb = std::sqrt(nbb);
        (*saved)[r * 3] = dot;
        (*saved)[r * 3 + 1] = na;
        (*saved)[r * 3 + 2] = nb;
        out.data[r] = static_cast<T>(1.0 - dot / (std::max(na, eps) * std::max(nb, eps)));
    }
    auto pa = g.value_ptr(a);
    auto pb = g.value_ptr(b);
    auto bw = [a, b, pa, pb, saved, rows, D, eps](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        for (std::int64_t r = 0; r < rows; ++r) {
            const double coef = static_cast<double>(adj[r]);
            if (coef == 0.0) continue;
            const double dot = (*saved)[r * 3], na = (*saved)[r * 3 + 1], nb = (*saved)[r * 3 + 2];
            if (gr.needs_grad(a))
                detail::cosine_row_grad(pa->data.data() + r * D, pb->data.data() + r * D, D, dot, na, nb, eps,
                                        coef, gr.adjoint(a).data() + r * D);
            if (gr.needs_grad(b))
                detail::cosine_row_grad(pb->data.data() + r * D, pa->data.data() + r * D, D, dot, nb, na, eps,
                                        coef, gr.adjoint(b).data() + r * D);
        }
    };
    return g.record("cosine_distance_rows", {a, b}, std::move(out), std::move(bw));
}

// All-pairs cosine distance between tokens and prototypes:
// tokens [B,T,D] x protos [B,N,D] -> [B,T,N].
template <typename T>
Id<T> pairwise_cosine_distance(GraphT<T>& g, Id<T> tokens, Id<T> protos, double eps = 1e-8) {
    const auto& vt = g.value(tokens);
    const auto& vp = g.value(protos);
    if (vt.rank() != 3 || vp.rank() != 3 || vt.dims[0] != vp.dims[0] || vt.dims[2] != vp.dims[2])
        throw ShapeError("pairwise_cosine_distance: want [B,T,D] x [B,N,D], got " + shape_str(vt.dims) + " vs " +
                         shape_str(vp.dims));
    const std::int64_t B = vt.dims[0], Tn = vt.dims[1], N = vp.dims[1], D = vt.dims[2];
    TensorT<T> out({B, Tn, N});
    auto tok_norm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * Tn));
    auto pro_norm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * N));
    auto dots = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * Tn * N));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t t = 0; t < Tn; ++t) {
            const T* x = vt.data.data() + (b * Tn + t) * D;
            double s = 0.0;
            for (std::int64_t j = 0; j < D; ++j) s += static_cast<double>(x[j]) * static_cast<double>(x[j]);
            (*tok_norm)[b * Tn + t] = std::sqrt(s);
        }
        for (std::int64_t n = 0; n < N; ++n) {
            const T* x = vp.data.data() + (b * N + n) * D;
            double s = 0.0;
            for (std::int64_t j = 0; j < D; ++j) s += static_cast<double>(x[j]) * static_cast<double>(x[j]);
            (*pro_norm)[b * N + n] = std::sqrt(s);
        }
        for (std::int64_t t = 0; t < Tn; ++t) {
            const T* x = vt.data.data() + (b * Tn + t) * D;
            for (std::int64_t n = 0; n < N; ++n) {
                const T* y = vp.data.data() + (b * N + n) * D;
                double dot = 0.0;
                for (std::int64_t j = 0; j < D; ++j) dot += static_cast<double>(x[j]) * static_cast<double>(y[j]);
                (*dots)[(b * Tn + t) * N + n] = dot;
                const double den = std::max((*tok_norm)[b * Tn + t], eps) * std::max((*pro_norm)[b * N + n], eps);
                out.data[(b * Tn + t) * N + n] = static_cast<T>(1.0 - dot / den);
            }
        }
    }
    auto pt = g.value_ptr(tokens);
    auto pp = g.value_ptr(protos);
    auto bw = [tokens, protos, pt, pp, tok_norm, pro_norm, dots, B, Tn, N, D, eps](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        const bool gt = gr.needs_grad(tokens), gp = gr.needs_grad(protos);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t t = 0; t < Tn; ++t)
                for (std::int64_t n = 0; n < N; ++n) {
                    const double coef = static_cast<double>(adj[(b * Tn + t) * N + n]);
                    if (coef == 0.0) continue;
                    const double dot = (*dots)[(b * Tn + t) * N + n];
                    const double na = (*tok_norm)[b * Tn + t], nb = (*pro_norm)[b * N + n];
                    const T* x = pt->data.data() + (b * Tn + t) * D;
                    const T* y = pp->data.data() + (b * N + n) * D;
                    if (gt)
                        detail::cosine_row_grad(x, y, D, dot, na, nb, eps, coef,
                                                gr.adjoint(tokens).data() + (b * Tn + t) * D);
                    if (gp)
                        detail::cosine_row_grad(y, x, D, dot, nb, na, eps, coef,
                                                gr.adjoint(protos).data() + (b * N + n) * D);
                }
    };
    return g.record("pairwise_cosine_distance", {tokens, protos}, std::move(out), std::move(bw));
}

// ---------------------------------------------------------------------------
// min over the last dim (subgradient through the argmin)
// ---------------------------------------------------------------------------

template <typename T>
struct MinResult {
    Id<T> values;
    std::vector<std::int64_t> argmin;  // ties broken by smallest index
};

template <typename T>
MinResult<T> min_lastdim(GraphT<T>& g, Id<T> a) {
    const auto& va = g.value(a);
    if (va.rank() < 1) throw ShapeError("min_lastdim: need rank >= 1");
    const std::int64_t L = va.dims.back();
    const std::int64_t rows = va.numel() / L;
    Shape dims(va.dims.begin(), va.dims.end() - 1);
    TensorT<T> out(std::move(dims));
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* x = va.data.data() + r * L;
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < L; ++j)
            if (x[j] < x[best]) best = j;
        (*arg)[static_cast<std::size_t>(r)] = best;
        out.data[r] = x[best];
    }
    Id<T> id = g.record("min_lastdim", {a}, std::move(out), [a, arg, rows, L](GraphT<T>& gr, Id<T> self) {
        const auto& adj = gr.adjoint(self);
        auto& da = gr.adjoint(a);
        for (std::int64_t r = 0; r < rows; ++r) da[r * L + (*arg)[static_cast<std::size_t>(r)]] += adj[r];
    });
    return {id, *arg};
}

}  // namespace anyad::ops
