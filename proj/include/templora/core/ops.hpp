#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/graph.hpp"
#include "templora/core/rng.hpp"
#include "templora/core/tensor.hpp"

namespace templora {

using TokenId = std::int32_t;

namespace kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
    return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <class T>
MatMap<T> as_matrix(Tensor<T>& t) {
    return MatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

/// Column block [c0, c0+width) of a row-major matrix with `ld` columns.
template <class T>
ConstStridedMap<T> block(const T* base, std::size_t rows, std::size_t ld, std::size_t c0, std::size_t width) {
    return ConstStridedMap<T>(base + c0, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width),
                              Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}
template <class T>
StridedMap<T> block(T* base, std::size_t rows, std::size_t ld, std::size_t c0, std::size_t width) {
    return StridedMap<T>(base + c0, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

/// Effective rotary base after NTK-aware rescaling: base * s^(d / (d - 2)).
inline double ntk_rope_base(double base, double ntk_scale, std::size_t head_dim) {
    if (ntk_scale <= 1.0) return base;
    const double d = static_cast<double>(head_dim);
    return base * std::pow(ntk_scale, d / (d - 2.0));
}

/// Rotates consecutive pairs (2i, 2i+1) of every head of every row in place.
/// `sign` = -1 applies the inverse rotation.
template <class T>
void rope_rotate(T* x, std::size_t rows, std::size_t width, std::size_t head_dim, std::span<const std::int64_t> positions,
                 double base, int sign = 1) {
    const std::size_t half = head_dim / 2;
    std::vector<double> inv_freq(half);
    for (std::size_t i = 0; i < half; ++i) {
        inv_freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    }
    std::vector<T> cs(half), sn(half);
    for (std::size_t r = 0; r < rows; ++r) {
        const double pos = static_cast<double>(positions[r]);
        for (std::size_t i = 0; i < half; ++i) {
            const double angle = pos * inv_freq[i];
            cs[i] = static_cast<T>(std::cos(angle));
            sn[i] = static_cast<T>(sign * std::sin(angle));
        }
        T* row = x + r * width;
        for (std::size_t h = 0; h < width; h += head_dim) {
            for (std::size_t i = 0; i < half; ++i) {
                const T a = row[h + 2 * i];
                const T b = row[h + 2 * i + 1];
                row[h + 2 * i] = a * cs[i] - b * sn[i];
                row[h + 2 * i + 1] = a * sn[i] + b * cs[i];
            }
        }
    }
}

template <class T>
void check_finite(std::span<const T> v, const char* what) {
    for (T x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
    }
}

/// Per-row stable log-softmax evaluated at `target`.
template <class T>
double row_nll(std::span<const T> logits, TokenId target) {
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (T v : logits) sum += std::exp(static_cast<double>(v) - mx);
    return mx + std::log(sum) - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

}  // namespace kernels

/// Borrowed cached keys/values that precede the new tokens in attention.
/// Rows are [length x width], row-major; treated as constants.
template <class T>
struct KvPrefix {
    const T* keys = nullptr;
    const T* values = nullptr;
    std::size_t length = 0;
};

namespace ops {

namespace detail {
template <class T>
Graph<T>& graph_of(Var<T> v) {
    return *v.graph;
}
template <class T>
void accumulate(Graph<T>& g, std::size_t id, const Tensor<T>& delta) {
    auto dst = g.grad(id).values();
    auto src = delta.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}
}  // namespace detail

/// a[m x k] * b[k x n].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& A = a.value();
    const auto& B = b.value();
    templora::detail::require_shape(A.rank() == 2 && B.rank() == 2 && A.cols() == B.rows(),
                                    "matmul: " + shape_str(A.shape()) + " * " + shape_str(B.shape()));
    Tensor<T> out = Tensor<T>::matrix(A.rows(), B.cols());
    kernels::as_matrix(out).noalias() = kernels::as_matrix(A) * kernels::as_matrix(B);
    const std::size_t ia = a.id, ib = b.id;
    return a.graph->make(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Graph<T>& g, std::size_t self) {
        auto dC = kernels::as_matrix(g.grad(self));
        if (g.requires_grad(ia)) kernels::as_matrix(g.grad(ia)).noalias() += dC * kernels::as_matrix(g.value(ib)).transpose();
        if (g.requires_grad(ib)) kernels::as_matrix(g.grad(ib)).noalias() += kernels::as_matrix(g.value(ia)).transpose() * dC;
    });
}

/// x[t x in] * w[out x in]^T: the projection convention used for all weights.
template <class T>
Var<T> linear(Var<T> x, Var<T> w) {
    const auto& X = x.value();
    const auto& W = w.value();
    templora::detail::require_shape(W.rank() == 2 && X.cols() == W.cols(),
                                    "linear: x " + shape_str(X.shape()) + " vs w " + shape_str(W.shape()));
    Tensor<T> out = Tensor<T>::matrix(X.rows(), W.rows());
    kernels::as_matrix(out).noalias() = kernels::as_matrix(X) * kernels::as_matrix(W).transpose();
    const std::size_t ix = x.id, iw = w.id;
    return x.graph->make(std::move(out), x.requires_grad() || w.requires_grad(), [ix, iw](Graph<T>& g, std::size_t self) {
        auto dY = kernels::as_matrix(g.grad(self));
        if (g.requires_grad(ix)) kernels::as_matrix(g.grad(ix)).noalias() += dY * kernels::as_matrix(g.value(iw));
        if (g.requires_grad(iw)) kernels::as_matrix(g.grad(iw)).noalias() += dY.transpose() * kernels::as_matrix(g.value(ix));
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    const auto& A = a.value();
    const auto& B = b.value();
    templora::detail::require_shape(A.shape() == B.shape(), "add: " + shape_str(A.shape()) + " + " + shape_str(B.shape()));
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.graph->make(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Graph<T>& g, std::size_t self) {
        const Tensor<T>& d = g.grad(self);
        if (g.requires_grad(ia)) detail::accumulate(g, ia, d);
        if (g.requires_grad(ib)) detail::accumulate(g, ib, d);
    });
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    const auto& A = a.value();
    const auto& B = b.value();
    templora::detail::require_shape(A.shape() == B.shape(), "mul: " + shape_str(A.shape()) + " * " + shape_str(B.shape()));
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.graph->make(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Graph<T>& g, std::size_t self) {
        const Tensor<T>& d = g.grad(self);
        if (g.requires_grad(ia)) {
            auto& ga = g.grad(ia);
            const auto& vb = g.value(ib);
            for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * vb[i];
        }
        if (g.requires_grad(ib)) {
            auto& gb = g.grad(ib);
            const auto& va = g.value(ia);
            for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i] * va[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= s;
    const std::size_t ia = a.id;
    return a.graph->make(std::move(out), a.requires_grad(), [ia, s](Graph<T>& g, std::size_t self) {
        const Tensor<T>& d = g.grad(self);
        auto& ga = g.grad(ia);
        for (std::size_t i = 0; i < d.size(); ++i) ga[i] += s * d[i];
    });
}

/// Sum of all elements, as a [1] tensor.
template <class T>
Var<T> sum(Var<T> a) {
    T total{0};
    for (T v : a.value().values()) total += v;
    const std::size_t ia = a.id;
    return a.graph->make(Tensor<T>({1}, total), a.requires_grad(), [ia](Graph<T>& g, std::size_t self) {
        const T d = g.grad(self)[0];
        for (auto& v : g.grad(ia).values()) v += d;
    });
}

/// x * sigmoid(x).
template <class T>
Var<T> silu(Var<T> x) {
    Tensor<T> out = x.value();
    for (auto& v : out.values()) v = v / (T{1} + std::exp(-v));
    const std::size_t ix = x.id;
    return x.graph->make(std::move(out), x.requires_grad(), [ix](Graph<T>& g, std::size_t self) {
        const Tensor<T>& d = g.grad(self);
        const Tensor<T>& X = g.value(ix);
        auto& gx = g.grad(ix);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const T s = T{1} / (T{1} + std::exp(-X[i]));
            gx[i] += d[i] * s * (T{1} + X[i] * (T{1} - s));
        }
    });
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
template <class T>
Var<T> softmax_rows(Var<T> x) {
    const Tensor<T>& X = x.value();
    kernels::check_finite(X.values(), "softmax_rows");
    Tensor<T> out = X;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        T mx = row[0];
        for (T v : row) mx = std::max(mx, v);
        T total{0};
        for (auto& v : row) total += (v = std::exp(v - mx));
        for (auto& v : row) v /= total;
    }
    const std::size_t ix = x.id;
    return x.graph->make(std::move(out), x.requires_grad(), [ix](Graph<T>& g, std::size_t self) {
        const Tensor<T>& d = g.grad(self);
        const Tensor<T>& y = g.value(self);
        auto& gx = g.grad(ix);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            auto yr = y.row(r);
            auto dr = d.row(r);
            T dot{0};
            for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * dr[c];
            auto gr = gx.row(r);
            for (std::size_t c = 0; c < yr.size(); ++c) gr[c] += yr[c] * (dr[c] - dot);
        }
    });
}

/// Each row scaled by 1/sqrt(mean(x^2) + eps), then multiplied by gamma.
template <class T>
Var<T> rmsnorm(Var<T> x, Var<T> gamma, T eps) {
    const Tensor<T>& X = x.value();
    const Tensor<T>& G = gamma.value();
    templora::detail::require_shape(G.size() == X.cols() && X.cols() > 0,
                                    "rmsnorm: gamma " + shape_str(G.shape()) + " vs x " + shape_str(X.shape()));
    if (!(eps > T{0})) throw ConfigError("rmsnorm: eps must be positive");
    const std::size_t rows = X.rows(), d = X.cols();
    Tensor<T> out = X;
    Tensor<T> inv({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        auto xr = X.row(r);
        T ms{0};
        for (T v : xr) ms += v * v;
        ms /= static_cast<T>(d);
        inv[r] = T{1} / std::sqrt(ms + eps);
        auto orow = out.row(r);
        for (std::size_t c = 0; c < d; ++c) orow[c] = xr[c] * inv[r] * G[c];
    }
    const std::size_t ix = x.id, ig = gamma.id;
    return x.graph->make(std::move(out), x.requires_grad() || gamma.requires_grad(),
                         [ix, ig, inv = std::move(inv)](Graph<T>& g, std::size_t self) {
                             const Tensor<T>& dY = g.grad(self);
                             const Tensor<T>& X = g.value(ix);
                             const Tensor<T>& G = g.value(ig);
                             const std::size_t rows = X.rows(), d = X.cols();
                             if (g.requires_grad(ig)) {
                                 auto& gg = g.grad(ig);
                                 for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t c = 0; c < d; ++c) gg[c] += dY.at(r, c) * X.at(r, c) * inv[r];
                             }
                             if (g.requires_grad(ix)) {
                                 auto& gx = g.grad(ix);
                                 for (std::size_t r = 0; r < rows; ++r) {
                                     T dot{0};
                                     for (std::size_t c = 0; c < d; ++c) dot += dY.at(r, c) * G[c] * X.at(r, c);
                                     const T k = inv[r] * inv[r] * inv[r] * dot / static_cast<T>(d);
                                     for (std::size_t c = 0; c < d; ++c)
                                         gx.at(r, c) += inv[r] * dY.at(r, c) * G[c] - k * X.at(r, c);
                                 }
                             }
                         });
}

/// Rows of `table` selected by `ids`.
template <class T>
Var<T> embedding(Var<T> table, std::span<const TokenId> ids) {
    const Tensor<T>& E = table.value();
    const std::size_t d = E.cols();
    Tensor<T> out = Tensor<T>::matrix(ids.size(), d);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= E.rows()) {
            throw ConfigError("embedding: token id " + std::to_string(ids[r]) + " outside vocabulary");
        }
        std::copy_n(E.row(static_cast<std::size_t>(ids[r])).data(), d, out.row(r).data());
    }
    const std::size_t it = table.id;
    return table.graph->make(std::move(out), table.requires_grad(),
                             [it, idv = std::vector<TokenId>(ids.begin(), ids.end())](Graph<T>& g, std::size_t self) {
                                 const Tensor<T>& d = g.grad(self);
                                 auto& gt = g.grad(it);
                                 for (std::size_t r = 0; r < idv.size(); ++r) {
                                     auto src = d.row(r);
                                     auto dst = gt.row(static_cast<std::size_t>(idv[r]));
                                     for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                                 }
                             });
}

/// Rotary position embedding over heads of width `head_dim`. `ntk_scale` > 1
/// rescales the frequency base (dynamic NTK-aware extension).
template <class T>
Var<T> rope(Var<T> x, std::span<const std::int64_t> positions, std::size_t head_dim, double base, double ntk_scale = 1.0) {
    const Tensor<T>& X = x.value();
    if (head_dim == 0 || head_dim % 2 != 0) throw ConfigError("rope: head dimension must be even");
    templora::detail::require_shape(X.cols() % head_dim == 0 && positions.size() == X.rows(),
                                    "rope: x " + shape_str(X.shape()) + " with " + std::to_string(positions.size()) +
                                        " positions");
    const double eff = kernels::ntk_rope_base(base, ntk_scale, head_dim);
    Tensor<T> out = X;
    kernels::rope_rotate(out.data(), out.rows(), out.cols(), head_dim, positions, eff, 1);
    const std::size_t ix = x.id;
    return x.graph->make(std::move(out), x.requires_grad(),
                         [ix, head_dim, eff, pos = std::vector<std::int64_t>(positions.begin(), positions.end())](
                             Graph<T>& g, std::size_t self) {
                             Tensor<T> d = g.grad(self);
                             kernels::rope_rotate(d.data(), d.rows(), d.cols(), head_dim, pos, eff, -1);
                             detail::accumulate(g, ix, d);
                         });
}

/// Multi-head causal attention of t new queries over (prefix keys ++ new keys).
///
/// q, k, v are [t x width] with heads laid out as contiguous column blocks.
/// New query i sees every prefix entry and new keys 0..i. The prefix is
/// constant; gradients flow only into q, k, v.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t n_heads, KvPrefix<T> prefix = {}) {
    using kernels::block;
    const Tensor<T>& Q = q.value();
    const Tensor<T>& K = k.value();
    const Tensor<T>& V = v.value();
    templora::detail::require_shape(Q.shape() == K.shape() && Q.shape() == V.shape() && Q.rank() == 2,
                                    "attention: q/k/v shapes differ");
    const std::size_t t = Q.rows(), width = Q.cols();
    templora::detail::require_shape(n_heads > 0 && width % n_heads == 0, "attention: width not divisible by heads");
    const std::size_t dh = width / n_heads;
    const std::size_t P = prefix.length;
    const std::size_t L = P + t;
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));

    // probs: [heads][t x L]
    Tensor<T> probs({n_heads, t, L});
    Tensor<T> out = Tensor<T>::matrix(t, width);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t c0 = h * dh;
        kernels::MatMap<T> S(probs.data() + h * t * L, static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(L));
        auto Qh = block(Q.data(), t, width, c0, dh);
        if (P > 0) S.leftCols(static_cast<Eigen::Index>(P)).noalias() = Qh * block(prefix.keys, P, width, c0, dh).transpose();
        S.rightCols(static_cast<Eigen::Index>(t)).noalias() = Qh * block(K.data(), t, width, c0, dh).transpose();
        for (std::size_t i = 0; i < t; ++i) {
            T* row = S.data() + i * L;
            const std::size_t valid = P + i + 1;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < valid; ++j) mx = std::max(mx, row[j] *= scale);
            T total{0};
            for (std::size_t j = 0; j < valid; ++j) total += (row[j] = std::exp(row[j] - mx));
            const T inv = T{1} / total;
            for (std::size_t j = 0; j < valid; ++j) row[j] *= inv;
            for (std::size_t j = valid; j < L; ++j) row[j] = T{0};
        }
        auto Oh = block(out.data(), t, width, c0, dh);
        Oh.noalias() = S.rightCols(static_cast<Eigen::Index>(t)) * block(V.data(), t, width, c0, dh);
        if (P > 0) Oh.noalias() += S.leftCols(static_cast<Eigen::Index>(P)) * block(prefix.values, P, width, c0, dh);
    }

    const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
    const std::size_t iq = q.id, ik = k.id, iv = v.id;
    return q.graph->make(
        std::move(out), rg, [iq, ik, iv, n_heads, dh, t, P, L, scale, prefix, probs = std::move(probs)](Graph<T>& g, std::size_t self) {
            const std::size_t width = n_heads * dh;
            const Tensor<T>& dO = g.grad(self);
            const Tensor<T>& Q = g.value(iq);
            const Tensor<T>& K = g.value(ik);
            const Tensor<T>& V = g.value(iv);
            kernels::RowMat<T> dS(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(L));
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t c0 = h * dh;
                kernels::ConstMatMap<T> Pm(probs.data() + h * t * L, static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(L));
                auto dOh = block(dO.data(), t, width, c0, dh);
                // dP, then softmax backward in place.
                dS.rightCols(static_cast<Eigen::Index>(t)).noalias() = dOh * block(V.data(), t, width, c0, dh).transpose();
                if (P > 0) dS.leftCols(static_cast<Eigen::Index>(P)).noalias() = dOh * block(prefix.values, P, width, c0, dh).transpose();
                for (std::size_t i = 0; i < t; ++i) {
                    const T dot = Pm.row(static_cast<Eigen::Index>(i)).dot(dS.row(static_cast<Eigen::Index>(i)));
                    dS.row(static_cast<Eigen::Index>(i)) =
                        Pm.row(static_cast<Eigen::Index>(i)).cwiseProduct(
                            (dS.row(static_cast<Eigen::Index>(i)).array() - dot).matrix()) * scale;
                }
                if (g.requires_grad(iv)) {
                    block(g.grad(iv).data(), t, width, c0, dh).noalias() += Pm.rightCols(static_cast<Eigen::Index>(t)).transpose() * dOh;
                }
                if (g.requires_grad(iq)) {
                    auto dQh = block(g.grad(iq).data(), t, width, c0, dh);
                    dQh.noalias() += dS.rightCols(static_cast<Eigen::Index>(t)) * block(K.data(), t, width, c0, dh);
                    if (P > 0) dQh.noalias() += dS.leftCols(static_cast<Eigen::Index>(P)) * block(prefix.keys, P, width, c0, dh);
                }
                if (g.requires_grad(ik)) {
                    block(g.grad(ik).data(), t, width, c0, dh).noalias() +=
                        dS.rightCols(static_cast<Eigen::Index>(t)).transpose() * block(Q.data(), t, width, c0, dh);
                }
            }
        });
}

/// Inverted dropout; identity when p == 0.
template <class T>
Var<T> dropout(Var<T> x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1)");
    if (p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    Tensor<T> mask(x.value().shape());
    for (auto& m : mask.values()) m = rng.uniform() < p ? T{0} : keep_scale;
    Tensor<T> out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    const std::size_t ix = x.id;
    return x.graph->make(std::move(out), x.requires_grad(), [ix, mask = std::move(mask)](Graph<T>& g, std::size_t self) {
        const Tensor<T>& d = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t i = 0; i < d.size(); ++i) gx[i] += d[i] * mask[i];
    });
}

/// Mean negative log-likelihood over rows with mask != 0. An empty mask means all rows.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask = {}) {
    const Tensor<T>& Z = logits.value();
    const std::size_t rows = Z.rows(), vocab = Z.cols();
    templora::detail::require_shape(targets.size() == rows, "cross_entropy: targets/logits row mismatch");
    templora::detail::require_shape(mask.empty() || mask.size() == rows, "cross_entropy: mask/logits row mismatch");
    std::size_t active = 0;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask.empty() && mask[r] == 0) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw ConfigError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, V)");
        }
        total += kernels::row_nll<T>(Z.row(r), targets[r]);
        ++active;
    }
    if (active == 0) throw ConfigError("cross_entropy: every position is masked");
    const std::size_t iz = logits.id;
    return logits.graph->make(
        Tensor<T>({1}, static_cast<T>(total / static_cast<double>(active))), logits.requires_grad(),
        [iz, active, tg = std::vector<TokenId>(targets.begin(), targets.end()),
         mk = std::vector<std::uint8_t>(mask.begin(), mask.end())](Graph<T>& g, std::size_t self) {
            const T d = g.grad(self)[0] / static_cast<T>(active);
            const Tensor<T>& Z = g.value(iz);
            auto& gz = g.grad(iz);
            for (std::size_t r = 0; r < Z.rows(); ++r) {
                if (!mk.empty() && mk[r] == 0) continue;
                auto z = Z.row(r);
                T mx = z[0];
                for (T v : z) mx = std::max(mx, v);
                T total{0};
                for (T v : z) total += std::exp(v - mx);
                auto gr = gz.row(r);
                for (std::size_t c = 0; c < z.size(); ++c) gr[c] += d * std::exp(z[c] - mx) / total;
                gr[static_cast<std::size_t>(tg[r])] -= d;
            }
        });
}

}  // namespace ops

/// Per-row negative log-likelihoods (no graph involvement).
template <class T>
std::vector<double> token_nll(const Tensor<T>& logits, std::span<const TokenId> targets) {
    detail::require_shape(targets.size() == logits.rows(), "token_nll: targets/logits row mismatch");
    std::vector<double> out(targets.size());
    for (std::size_t r = 0; r < targets.size(); ++r) out[r] = kernels::row_nll<T>(logits.row(r), targets[r]);
    return out;
}

}  // namespace templora
