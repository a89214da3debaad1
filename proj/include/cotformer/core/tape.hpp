// Copyright (c) 2026 cotformer.cpp contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cotformer/core/array.hpp"
#include "cotformer/core/kernels.hpp"

namespace cotformer {

template <typename T>
class Tape;

// Lightweight handle to a tape node.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::int32_t id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Array<T>& value() const;
    const Array<T>& grad() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, which is a
// topological order by construction; backward() walks it in reverse so
// gradient accumulation order is deterministic run to run.
//
// Single-threaded per graph. Node values are written once and never mutated.
template <typename T>
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Array<T> value) { return make(std::move(value), nullptr); }

    Var<T> make(Array<T> value, BackwardFn bw) {
        if (check_finite_ && !value.all_finite())
            throw std::runtime_error("Tape: non-finite value produced by a primitive");
        nodes_.push_back(Node{std::move(value), Array<T>{}, std::move(bw)});
        return Var<T>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    const Array<T>& value(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Array<T>& grad(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    // Gradient buffer for a node, allocated as zeros on first touch.
    Array<T>& grad_buffer(std::int32_t id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.data.empty()) n.grad = Array<T>::zeros(n.value.shape);
        return n.grad;
    }
    bool has_grad(std::int32_t id) const {
        return !nodes_[static_cast<std::size_t>(id)].grad.data.empty();
    }

    // Reverse sweep from a scalar loss node. Nodes that never received a
    // gradient are skipped; fan-out accumulates by addition.
    void backward(Var<T> loss) {
        if (!loss.valid() || loss.tape != this) throw std::invalid_argument("backward: foreign node");
        if (value(loss.id).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        grad_buffer(loss.id).data[0] = T(1);
        for (std::int32_t id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.data.empty() || !n.backward) continue;
            n.backward(*this);
        }
    }

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

    void set_check_finite(bool on) { check_finite_ = on; }

    // Forward multiply-accumulate counter; incremented by matmul and the
    // fused attention primitive only (the convention the analytic cost
    // model uses: projections, score/value products, feed-forward).
    std::uint64_t macs = 0;

  private:
    struct Node {
        Array<T> value;
        Array<T> grad;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    bool check_finite_ = false;
};

template <typename T>
const Array<T>& Var<T>::value() const {
    return tape->value(id);
}
template <typename T>
const Array<T>& Var<T>::grad() const {
    return tape->grad(id);
}

namespace detail {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
    if (a.tape != b.tape) throw std::invalid_argument("operands belong to different tapes");
    return *a.tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast primitives
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    const Array<T>&av = a.value(), &bv = b.value();
    if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
    Array<T> out = av;
    for (std::int64_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
    return t.make(std::move(out), [ia = a.id, ib = b.id, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        Array<T>&ga = tp.grad_buffer(ia), &gb = tp.grad_buffer(ib);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            ga.data[i] += g.data[i];
            gb.data[i] += g.data[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    const Array<T>&av = a.value(), &bv = b.value();
    if (!av.same_shape(bv)) throw std::invalid_argument("sub: shape mismatch");
    Array<T> out = av;
    for (std::int64_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
    return t.make(std::move(out), [ia = a.id, ib = b.id, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        Array<T>&ga = tp.grad_buffer(ia), &gb = tp.grad_buffer(ib);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            ga.data[i] += g.data[i];
            gb.data[i] -= g.data[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    const Array<T>&av = a.value(), &bv = b.value();
    if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
    Array<T> out = av;
    for (std::int64_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
    return t.make(std::move(out), [ia = a.id, ib = b.id, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        const Array<T>&av2 = tp.value(ia), &bv2 = tp.value(ib);
        Array<T>&ga = tp.grad_buffer(ia), &gb = tp.grad_buffer(ib);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            ga.data[i] += g.data[i] * bv2.data[i];
            gb.data[i] += g.data[i] * av2.data[i];
        }
    });
}

template <typename T>
Var<T> scalar_mul(Var<T> x, T c) {
    Tape<T>& t = *x.tape;
    Array<T> out = x.value();
    for (auto& v : out.data) v *= c;
    return t.make(std::move(out), [ix = x.id, c, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        Array<T>& gx = tp.grad_buffer(ix);
        for (std::int64_t i = 0; i < g.numel(); ++i) gx.data[i] += c * g.data[i];
    });
}

// x[R x C] + v broadcast over rows (v has C elements).
template <typename T>
Var<T> add_rowvec(Var<T> x, Var<T> v) {
    Tape<T>& t = detail::same_tape(x, v);
    const Array<T>&xv = x.value(), &vv = v.value();
    const std::int64_t C = xv.cols(), R = xv.rows();
    if (vv.numel() != C) throw std::invalid_argument("add_rowvec: vector length mismatch");
    Array<T> out = xv;
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c) out.data[r * C + c] += vv.data[c];
    return t.make(std::move(out), [ix = x.id, iv = v.id, R, C, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        Array<T>&gx = tp.grad_buffer(ix), &gv = tp.grad_buffer(iv);
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c) {
                gx.data[r * C + c] += g.data[r * C + c];
                gv.data[c] += g.data[r * C + c];
            }
    });
}

// Row r of x scaled by s[r]; s is [R] or [R x 1].
template <typename T>
Var<T> rowwise_scale(Var<T> x, Var<T> s) {
    Tape<T>& t = detail::same_tape(x, s);
    const Array<T>&xv = x.value(), &sv = s.value();
    const std::int64_t C = xv.cols(), R = xv.rows();
    if (sv.numel() != R) throw std::invalid_argument("rowwise_scale: scale length mismatch");
    Array<T> out = xv;
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c) out.data[r * C + c] *= sv.data[r];
    return t.make(std::move(out), [ix = x.id, is = s.id, R, C, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        const Array<T>&xv2 = tp.value(ix), &sv2 = tp.value(is);
        Array<T>&gx = tp.grad_buffer(ix), &gs = tp.grad_buffer(is);
        for (std::int64_t r = 0; r < R; ++r) {
            T acc = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                gx.data[r * C + c] += sv2.data[r] * g.data[r * C + c];
                acc += g.data[r * C + c] * xv2.data[r * C + c];
            }
            gs.data[r] += acc;
        }
    });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    Tape<T>& t = *x.tape;
    Array<T> out = x.value();
    for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    return t.make(std::move(out), [ix = x.id, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>&g = tp.grad(io), &y = tp.value(io);
        Array<T>& gx = tp.grad_buffer(ix);
        for (std::int64_t i = 0; i < g.numel(); ++i)
            gx.data[i] += g.data[i] * y.data[i] * (T(1) - y.data[i]);
    });
}

// Exact GELU, x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> x) {
    Tape<T>& t = *x.tape;
    Array<T> out = x.value();
    for (auto& v : out.data) {
        const T phi = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
        v = v * phi;
    }
    return t.make(std::move(out), [ix = x.id, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>&g = tp.grad(io), &xv = tp.value(ix);
        Array<T>& gx = tp.grad_buffer(ix);
        constexpr T inv_sqrt2pi = T(0.3989422804014326779);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const T v = xv.data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            gx.data[i] += g.data[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
Var<T> sum_all(Var<T> x) {
    Tape<T>& t = *x.tape;
    T acc = 0;
    for (T v : x.value().data) acc += v;
    return t.make(Array<T>::scalar(acc), [ix = x.id, io = std::int32_t(t.size())](Tape<T>& tp) {
        const T g = tp.grad(io).data[0];
        Array<T>& gx = tp.grad_buffer(ix);
        for (auto& v : gx.data) v += g;
    });
}

// ---------------------------------------------------------------------------
// Matrix primitives
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    const Array<T>&av = a.value(), &bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2) throw std::invalid_argument("matmul: 2-D operands required");
    const std::int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    if (bv.shape[0] != k) throw std::invalid_argument("matmul: inner extents differ");
    Array<T> out = Array<T>::zeros({m, n});
    detail::mm_nn(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    t.macs += static_cast<std::uint64_t>(m) * k * n;
    return t.make(std::move(out),
                  [ia = a.id, ib = b.id, m, k, n, io = std::int32_t(t.size())](Tape<T>& tp) {
                      const Array<T>& g = tp.grad(io);
                      const Array<T>&av2 = tp.value(ia), &bv2 = tp.value(ib);
                      Array<T>& ga = tp.grad_buffer(ia);
                      detail::mm_nt(g.data.data(), bv2.data.data(), ga.data.data(), m, n, k);
                      Array<T>& gb = tp.grad_buffer(ib);
                      detail::mm_tn(av2.data.data(), g.data.data(), gb.data.data(), k, m, n);
                  });
}

// Per-row standardization with affine transform. The variance denominator is
// sqrt(var + eps), population variance over the row.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
    Tape<T>& t = detail::same_tape(x, gain);
    detail::same_tape(x, bias);
    if (eps <= T(0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const Array<T>& xv = x.value();
    const std::int64_t R = xv.rows(), C = xv.cols();
    if (gain.value().numel() != C || bias.value().numel() != C)
        throw std::invalid_argument("layer_norm: gain/bias length mismatch");
    const T* gp = gain.value().data.data();
    const T* bp = bias.value().data.data();
    Array<T> out = Array<T>::zeros(xv.shape);
    Array<T> xhat = Array<T>::zeros(xv.shape);  // saved for backward
    std::vector<T> inv_sigma(static_cast<std::size_t>(R));
    for (std::int64_t r = 0; r < R; ++r) {
        const T* row = xv.data.data() + r * C;
        T mean = 0;
        for (std::int64_t c = 0; c < C; ++c) mean += row[c];
        mean /= T(C);
        T var = 0;
        for (std::int64_t c = 0; c < C; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= T(C);
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(r)] = is;
        for (std::int64_t c = 0; c < C; ++c) {
            const T xh = (row[c] - mean) * is;
            xhat.data[r * C + c] = xh;
            out.data[r * C + c] = xh * gp[c] + bp[c];
        }
    }
    return t.make(std::move(out), [ix = x.id, ig = gain.id, ib = bias.id, R, C,
                                   xhat = std::move(xhat), inv_sigma = std::move(inv_sigma),
                                   io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        const Array<T>& gv = tp.value(ig);
        Array<T>& gx = tp.grad_buffer(ix);
        Array<T>& gg = tp.grad_buffer(ig);
        Array<T>& gb = tp.grad_buffer(ib);
        for (std::int64_t r = 0; r < R; ++r) {
            const T* grow = g.data.data() + r * C;
            const T* xh = xhat.data.data() + r * C;
            const T is = inv_sigma[static_cast<std::size_t>(r)];
            T mean_gdy = 0, mean_gdy_xh = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                const T gdy = grow[c] * gv.data[c];
                mean_gdy += gdy;
                mean_gdy_xh += gdy * xh[c];
                gg.data[c] += grow[c] * xh[c];
                gb.data[c] += grow[c];
            }
            mean_gdy /= T(C);
            mean_gdy_xh /= T(C);
            for (std::int64_t c = 0; c < C; ++c) {
                const T gdy = grow[c] * gv.data[c];
                gx.data[r * C + c] += is * (gdy - mean_gdy - xh[c] * mean_gdy_xh);
            }
        }
    });
}

// Row-wise softmax, stabilized by row-max subtraction.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
    Tape<T>& t = *x.tape;
    const Array<T>& xv = x.value();
    const std::int64_t R = xv.rows(), C = xv.cols();
    Array<T> out = Array<T>::zeros(xv.shape);
    for (std::int64_t r = 0; r < R; ++r) {
        const T* row = xv.data.data() + r * C;
        T m = row[0];
        for (std::int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
        T denom = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            const T e = std::exp(row[c] - m);
            out.data[r * C + c] = e;
            denom += e;
        }
        for (std::int64_t c = 0; c < C; ++c) out.data[r * C + c] /= denom;
    }
    return t.make(std::move(out), [ix = x.id, R, C, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>&g = tp.grad(io), &y = tp.value(io);
        Array<T>& gx = tp.grad_buffer(ix);
        for (std::int64_t r = 0; r < R; ++r) {
            T dot = 0;
            for (std::int64_t c = 0; c < C; ++c) dot += g.data[r * C + c] * y.data[r * C + c];
            for (std::int64_t c = 0; c < C; ++c)
                gx.data[r * C + c] += y.data[r * C + c] * (g.data[r * C + c] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Rotary position encoding
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void rope_rotate(const Array<T>& in, Array<T>& out, const std::vector<std::int64_t>& positions,
                 int n_heads, T base, T sign) {
    const std::int64_t R = in.rows(), C = in.cols();
    const std::int64_t dh = C / n_heads;
    for (std::int64_t r = 0; r < R; ++r) {
        const T pos = T(positions[static_cast<std::size_t>(r)]);
        for (int h = 0; h < n_heads; ++h) {
            const std::int64_t off = r * C + h * dh;
            for (std::int64_t i = 0; i < dh / 2; ++i) {
                const T theta = sign * pos * std::pow(base, T(-2) * T(i) / T(dh));
                const T c = std::cos(theta), s = std::sin(theta);
                const T x0 = in.data[off + 2 * i], x1 = in.data[off + 2 * i + 1];
                out.data[off + 2 * i] = x0 * c - x1 * s;
                out.data[off + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

}  // namespace detail

// Rotates each head's (2i, 2i+1) pairs by pos * base^(-2i/d_head). Positions
// are the original token indices, shared by every repeat of a token.
template <typename T>
Var<T> rope(Var<T> x, const std::vector<std::int64_t>& positions, int n_heads, T base = T(10000)) {
    Tape<T>& t = *x.tape;
    const Array<T>& xv = x.value();
    const std::int64_t R = xv.rows(), C = xv.cols();
    if (R != static_cast<std::int64_t>(positions.size()))
        throw std::invalid_argument("rope: positions length mismatch");
    if (C % n_heads != 0) throw std::invalid_argument("rope: width not divisible by heads");
    const std::int64_t dh = C / n_heads;
    if (dh % 2 != 0) throw std::invalid_argument("rope: head dim must be even");
    Array<T> out = Array<T>::zeros(xv.shape);
    detail::rope_rotate(xv, out, positions, n_heads, base, T(1));
    return t.make(std::move(out),
                  [ix = x.id, positions, n_heads, base, io = std::int32_t(t.size())](Tape<T>& tp) {
                      // Inverse rotation, accumulated into the input gradient.
                      const Array<T>& g = tp.grad(io);
                      Array<T> tmp = Array<T>::zeros(g.shape);
                      detail::rope_rotate(g, tmp, positions, n_heads, base, T(-1));
                      Array<T>& gx = tp.grad_buffer(ix);
                      for (std::int64_t i = 0; i < g.numel(); ++i) gx.data[i] += tmp.data[i];
                  });
}

// ---------------------------------------------------------------------------
// Fused masked multi-head attention
// ---------------------------------------------------------------------------

// q [Sq x d], k/v [Skv x d] with heads folded into the width. allow is a row
// -major [Sq x Skv] byte mask; masked logits receive an additive -1e9 before
// the stabilized softmax so their probabilities (and gradients) are exactly
// zero. Every query row must keep at least one allowed key.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const std::vector<std::uint8_t>& allow, int n_heads) {
    Tape<T>& t = detail::same_tape(q, k);
    detail::same_tape(q, v);
    const Array<T>&qv = q.value(), &kv = k.value(), &vv = v.value();
    const std::int64_t Sq = qv.shape[0], d = qv.shape[1], Skv = kv.shape[0];
    if (kv.shape[1] != d || !vv.same_shape(kv)) throw std::invalid_argument("attention: k/v shape mismatch");
    if (static_cast<std::int64_t>(allow.size()) != Sq * Skv)
        throw std::invalid_argument("attention: mask size mismatch");
    if (d % n_heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
    for (std::int64_t i = 0; i < Sq; ++i) {
        bool any = false;
        for (std::int64_t j = 0; j < Skv; ++j) any = any || allow[static_cast<std::size_t>(i * Skv + j)];
        if (!any) throw std::invalid_argument("attention: query row with no allowed keys");
    }
    const std::int64_t dh = d / n_heads;
    const T scale = T(1) / std::sqrt(T(dh));
    constexpr T kMaskPenalty = T(-1e9);

    Array<T> probs = Array<T>::zeros({static_cast<std::int64_t>(n_heads) * Sq, Skv});
    Array<T> out = Array<T>::zeros({Sq, d});
    std::vector<T> logits(static_cast<std::size_t>(Skv));
    for (int h = 0; h < n_heads; ++h) {
        for (std::int64_t i = 0; i < Sq; ++i) {
            const T* qrow = qv.data.data() + i * d + h * dh;
            for (std::int64_t j = 0; j < Skv; ++j) {
                const T* krow = kv.data.data() + j * d + h * dh;
                T acc = 0;
                for (std::int64_t p = 0; p < dh; ++p) acc += qrow[p] * krow[p];
                logits[static_cast<std::size_t>(j)] =
                    acc * scale + (allow[static_cast<std::size_t>(i * Skv + j)] ? T(0) : kMaskPenalty);
            }
            T m = logits[0];
            for (std::int64_t j = 1; j < Skv; ++j) m = std::max(m, logits[static_cast<std::size_t>(j)]);
            T denom = 0;
            T* prow = probs.data.data() + (static_cast<std::int64_t>(h) * Sq + i) * Skv;
            for (std::int64_t j = 0; j < Skv; ++j) {
                const T e = std::exp(logits[static_cast<std::size_t>(j)] - m);
                prow[j] = e;
                denom += e;
            }
            for (std::int64_t j = 0; j < Skv; ++j) prow[j] /= denom;
            T* orow = out.data.data() + i * d + h * dh;
            for (std::int64_t j = 0; j < Skv; ++j) {
                const T pj = prow[j];
                if (pj == T(0)) continue;
                const T* vrow = vv.data.data() + j * d + h * dh;
                for (std::int64_t p = 0; p < dh; ++p) orow[p] += pj * vrow[p];
            }
        }
    }
    t.macs += 2ull * static_cast<std::uint64_t>(Sq) * Skv * d;  // score + value products
    return t.make(
        std::move(out),
        [iq = q.id, ik = k.id, iv = v.id, probs = std::move(probs), Sq, Skv, d, dh, n_heads, scale,
         io = std::int32_t(t.size())](Tape<T>& tp) {
            const Array<T>& g = tp.grad(io);
            const Array<T>&qv2 = tp.value(iq), &kv2 = tp.value(ik), &vv2 = tp.value(iv);
            Array<T>& gq = tp.grad_buffer(iq);
            Array<T>& gk = tp.grad_buffer(ik);
            Array<T>& gv = tp.grad_buffer(iv);
            std::vector<T> dp(static_cast<std::size_t>(Skv));
            for (int h = 0; h < n_heads; ++h) {
                for (std::int64_t i = 0; i < Sq; ++i) {
                    const T* prow = probs.data.data() + (static_cast<std::int64_t>(h) * Sq + i) * Skv;
                    const T* grow = g.data.data() + i * d + h * dh;
                    // dV += p^T * dout; dp = dout * V^T
                    for (std::int64_t j = 0; j < Skv; ++j) {
                        const T pj = prow[j];
                        const T* vrow = vv2.data.data() + j * d + h * dh;
                        T acc = 0;
                        for (std::int64_t p = 0; p < dh; ++p) acc += grow[p] * vrow[p];
                        dp[static_cast<std::size_t>(j)] = acc;
                        if (pj != T(0)) {
                            T* gvrow = gv.data.data() + j * d + h * dh;
                            for (std::int64_t p = 0; p < dh; ++p) gvrow[p] += pj * grow[p];
                        }
                    }
                    // softmax backward: ds = p * (dp - sum_j p_j dp_j)
                    T dot = 0;
                    for (std::int64_t j = 0; j < Skv; ++j) dot += prow[j] * dp[static_cast<std::size_t>(j)];
                    const T* qrow = qv2.data.data() + i * d + h * dh;
                    T* gqrow = gq.data.data() + i * d + h * dh;
                    for (std::int64_t j = 0; j < Skv; ++j) {
                        const T ds = prow[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale;
                        if (ds == T(0)) continue;
                        const T* krow = kv2.data.data() + j * d + h * dh;
                        T* gkrow = gk.data.data() + j * d + h * dh;
                        for (std::int64_t p = 0; p < dh; ++p) {
                            gqrow[p] += ds * krow[p];
                            gkrow[p] += ds * qrow[p];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Gather / scatter / concatenation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    if (parts.size() == 1) return parts[0];
    Tape<T>& t = *parts[0].tape;
    const std::int64_t C = parts[0].value().cols();
    std::int64_t R = 0;
    for (const auto& p : parts) {
        if (p.tape != &t) throw std::invalid_argument("concat_rows: mixed tapes");
        if (p.value().cols() != C) throw std::invalid_argument("concat_rows: column mismatch");
        R += p.value().rows();
    }
    Array<T> out = Array<T>::zeros({R, C});
    std::int64_t row = 0;
    std::vector<std::pair<std::int32_t, std::int64_t>> spans;  // (node id, row count)
    for (const auto& p : parts) {
        const Array<T>& pv = p.value();
        std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + row * C);
        spans.emplace_back(p.id, pv.rows());
        row += pv.rows();
    }
    return t.make(std::move(out), [spans = std::move(spans), C, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        std::int64_t row = 0;
        for (auto [id, rows] : spans) {
            Array<T>& gp = tp.grad_buffer(id);
            for (std::int64_t i = 0; i < rows * C; ++i) gp.data[i] += g.data[row * C + i];
            row += rows;
        }
    });
}

template <typename T>
Var<T> select_rows(Var<T> x, std::vector<std::int64_t> idx) {
    Tape<T>& t = *x.tape;
    const Array<T>& xv = x.value();
    const std::int64_t C = xv.cols(), R = xv.rows();
    for (auto i : idx)
        if (i < 0 || i >= R) throw std::out_of_range("select_rows: index out of range");
    Array<T> out = Array<T>::zeros({static_cast<std::int64_t>(idx.size()), C});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(xv.data.begin() + idx[r] * C, C, out.data.begin() + static_cast<std::int64_t>(r) * C);
    return t.make(std::move(out), [ix = x.id, idx = std::move(idx), C, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        Array<T>& gx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::int64_t c = 0; c < C; ++c)
                gx.data[idx[r] * C + c] += g.data[static_cast<std::int64_t>(r) * C + c];
    });
}

// base with rows[k] added at row idx[k]. Rows of base not referenced by idx
// are copied through bit-identically.
template <typename T>
Var<T> scatter_add_rows(Var<T> base, std::vector<std::int64_t> idx, Var<T> rows) {
    Tape<T>& t = detail::same_tape(base, rows);
    const Array<T>&bv = base.value(), &rv = rows.value();
    const std::int64_t C = bv.cols(), R = bv.rows();
    if (rv.cols() != C || rv.rows() != static_cast<std::int64_t>(idx.size()))
        throw std::invalid_argument("scatter_add_rows: rows shape mismatch");
    for (auto i : idx)
        if (i < 0 || i >= R) throw std::out_of_range("scatter_add_rows: index out of range");
    Array<T> out = bv;
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::int64_t c = 0; c < C; ++c)
            out.data[idx[r] * C + c] += rv.data[static_cast<std::int64_t>(r) * C + c];
    return t.make(std::move(out),
                  [ib = base.id, ir = rows.id, idx = std::move(idx), C, io = std::int32_t(t.size())](Tape<T>& tp) {
                      const Array<T>& g = tp.grad(io);
                      Array<T>& gb = tp.grad_buffer(ib);
                      for (std::int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
                      Array<T>& gr = tp.grad_buffer(ir);
                      for (std::size_t r = 0; r < idx.size(); ++r)
                          for (std::int64_t c = 0; c < C; ++c)
                              gr.data[static_cast<std::int64_t>(r) * C + c] += g.data[idx[r] * C + c];
                  });
}

// Same data, new extents.
template <typename T>
Var<T> reshape(Var<T> x, std::vector<std::int64_t> shape) {
    Tape<T>& t = *x.tape;
    if (Array<T>::numel_of(shape) != x.value().numel())
        throw std::invalid_argument("reshape: element count mismatch");
    Array<T> out(std::move(shape), x.value().data);
    return t.make(std::move(out), [ix = x.id, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        Array<T>& gx = tp.grad_buffer(ix);
        for (std::int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
    });
}

// base with row idx[k] replaced by rows[k]; untouched rows pass through
// bit-identically. Indices must be unique. Replaced base rows get no
// gradient; the replacement rows receive theirs.
template <typename T>
Var<T> replace_rows(Var<T> base, std::vector<std::int64_t> idx, Var<T> rows) {
    Tape<T>& t = detail::same_tape(base, rows);
    const Array<T>&bv = base.value(), &rv = rows.value();
    const std::int64_t C = bv.cols(), R = bv.rows();
    if (rv.cols() != C || rv.rows() != static_cast<std::int64_t>(idx.size()))
        throw std::invalid_argument("replace_rows: rows shape mismatch");
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(R), 0);
    for (auto i : idx) {
        if (i < 0 || i >= R) throw std::out_of_range("replace_rows: index out of range");
        if (seen[static_cast<std::size_t>(i)]++) throw std::invalid_argument("replace_rows: duplicate index");
    }
    Array<T> out = bv;
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(rv.data.begin() + static_cast<std::int64_t>(r) * C, C, out.data.begin() + idx[r] * C);
    return t.make(std::move(out),
                  [ib = base.id, ir = rows.id, idx = std::move(idx), R, C, io = std::int32_t(t.size())](Tape<T>& tp) {
                      const Array<T>& g = tp.grad(io);
                      std::vector<std::uint8_t> replaced(static_cast<std::size_t>(R), 0);
                      for (auto i : idx) replaced[static_cast<std::size_t>(i)] = 1;
                      Array<T>& gb = tp.grad_buffer(ib);
                      for (std::int64_t r = 0; r < R; ++r) {
                          if (replaced[static_cast<std::size_t>(r)]) continue;
                          for (std::int64_t c = 0; c < C; ++c) gb.data[r * C + c] += g.data[r * C + c];
                      }
                      Array<T>& gr = tp.grad_buffer(ir);
                      for (std::size_t r = 0; r < idx.size(); ++r)
                          for (std::int64_t c = 0; c < C; ++c)
                              gr.data[static_cast<std::int64_t>(r) * C + c] += g.data[idx[r] * C + c];
                  });
}

// Embedding lookup: rows of table selected by token id.
template <typename T>
Var<T> embedding(Var<T> table, const std::vector<std::int64_t>& ids) {
    Tape<T>& t = *table.tape;
    const Array<T>& tv = table.value();
    const std::int64_t V = tv.shape[0], d = tv.shape[1];
    for (auto id : ids)
        if (id < 0 || id >= V) throw std::out_of_range("embedding: token id outside vocabulary");
    Array<T> out = Array<T>::zeros({static_cast<std::int64_t>(ids.size()), d});
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(tv.data.begin() + ids[r] * d, d, out.data.begin() + static_cast<std::int64_t>(r) * d);
    return t.make(std::move(out), [it = table.id, ids, d, io = std::int32_t(t.size())](Tape<T>& tp) {
        const Array<T>& g = tp.grad(io);
        Array<T>& gt = tp.grad_buffer(it);
        for (std::size_t r = 0; r < ids.size(); ++r)
            for (std::int64_t c = 0; c < d; ++c)
                gt.data[ids[r] * d + c] += g.data[static_cast<std::int64_t>(r) * d + c];
    });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean negative log-likelihood of targets under row-wise softmax(logits).
// Log-sum-exp is computed against the row max; the running sums are kept in
// double so the value is insensitive to batch regrouping.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::int64_t>& targets) {
    Tape<T>& t = *logits.tape;
    const Array<T>& lv = logits.value();
    const std::int64_t R = lv.rows(), C = lv.cols();
    if (static_cast<std::int64_t>(targets.size()) != R)
        throw std::invalid_argument("cross_entropy: targets length mismatch");
    for (auto tgt : targets)
        if (tgt < 0 || tgt >= C) throw std::out_of_range("cross_entropy: target outside vocabulary");
    std::vector<T> lse(static_cast<std::size_t>(R));
    double total = 0;
    for (std::int64_t r = 0; r < R; ++r) {
        const T* row = lv.data.data() + r * C;
        T m = row[0];
        for (std::int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
        double denom = 0;
        for (std::int64_t c = 0; c < C; ++c) denom += std::exp(static_cast<double>(row[c] - m));
        const double l = static_cast<double>(m) + std::log(denom);
        lse[static_cast<std::size_t>(r)] = static_cast<T>(l);
        total += l - static_cast<double>(row[targets[static_cast<std::size_t>(r)]]);
    }
    Array<T> out = Array<T>::scalar(static_cast<T>(total / static_cast<double>(R)));
    return t.make(std::move(out), [il = logits.id, targets, lse = std::move(lse), R, C,
                                   io = std::int32_t(t.size())](Tape<T>& tp) {
        const T g = tp.grad(io).data[0] / T(R);
        const Array<T>& lv2 = tp.value(il);
        Array<T>& gl = tp.grad_buffer(il);
        for (std::int64_t r = 0; r < R; ++r) {
            const T* row = lv2.data.data() + r * C;
            T* grow = gl.data.data() + r * C;
            const T l = lse[static_cast<std::size_t>(r)];
            for (std::int64_t c = 0; c < C; ++c) grow[c] += g * std::exp(row[c] - l);
            grow[targets[static_cast<std::size_t>(r)]] -= g;
        }
    });
}

}  // namespace cotformer
