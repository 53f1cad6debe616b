#pragma once

#include <memory>
#include <string>
#include <vector>

#include "axial/ops.hpp"
#include "axial/tape.hpp"

namespace axial {

enum class Axis { Height, Width };
enum class PositionalMode { None, QueryOnly, Full };

// Attention window extent: the whole axis/lattice, or a centered local span.
struct Span {
    bool global = true;
    int m = 0;  // odd local span

    static Span Global() { return Span{true, 0}; }
    static Span Local(int m) {
        if (m < 1 || m % 2 == 0)
            throw ConfigError("local span must be a positive odd integer, got " +
                              std::to_string(m));
        return Span{false, m};
    }
    int radius() const { return global ? -1 : (m - 1) / 2; }
};

struct AxialAttentionConfig {
    Axis axis = Axis::Width;
    Span span = Span::Global();
    int heads = 1;
    int d_in = 0;
    int d_q = 0;   // per head
    int d_out = 0; // per head
    PositionalMode positional = PositionalMode::Full;
    // Construction-time axis length for Global span; tables cover offsets
    // +-(L-1) and longer axes are rejected at run time.
    int global_len = 0;

    int table_entries() const {
        return span.global ? 2 * global_len - 1 : 2 * span.m - 1;
    }
    int max_offset() const { return span.global ? global_len - 1 : span.m - 1; }
};

// Single-head projections plus the per-layer positional tables (shared by
// all heads of a layer). 1D tables are (1,1,K,d); 2D tables (1,Kh,Kw,d) with
// K = 2*max_offset+1 per axis.
template <typename T>
struct AttentionParams {
    Tensor<T> w_q;  // (d_q, d_in) as mat_shape
    Tensor<T> w_k;  // (d_q, d_in)
    Tensor<T> w_v;  // (d_out, d_in)
    Tensor<T> r_q;
    Tensor<T> r_k;
    Tensor<T> r_v;
};

template <typename T>
struct AttentionVars {
    Var w_q, w_k, w_v, r_q, r_k, r_v;
};

template <typename T>
AttentionVars<T> leaf_params(Tape<T>& t, const AttentionParams<T>& p,
                             bool requires_grad = false) {
    AttentionVars<T> v;
    v.w_q = t.leaf(p.w_q, requires_grad);
    v.w_k = t.leaf(p.w_k, requires_grad);
    v.w_v = t.leaf(p.w_v, requires_grad);
    if (p.r_q.numel()) v.r_q = t.leaf(p.r_q, requires_grad);
    if (p.r_k.numel()) v.r_k = t.leaf(p.r_k, requires_grad);
    if (p.r_v.numel()) v.r_v = t.leaf(p.r_v, requires_grad);
    return v;
}

// Window membership helper (also the spec's Window domain type). Members are
// clipped to the valid index range; no padding.
struct Window {
    int lo = 0, hi = -1;  // inclusive
    static Window around(int center, int axis_len, const Span& span) {
        if (span.global) return Window{0, axis_len - 1};
        const int r = span.radius();
        return Window{std::max(0, center - r),
                      std::min(axis_len - 1, center + r)};
    }
    int size() const { return hi - lo + 1; }
};

// Per-position linear map y[pos, o] = sum_i x[pos, i] * W[o, i]; weight is
// mat_shape(rows=out, cols=in).
template <typename T>
Var project(Tape<T>& t, Var x, Var w) {
    const auto xs = t.val(x).shape();
    const auto ws = t.val(w).shape();
    const int din = ws.w, dout = ws.h;
    if (xs.c != din)
        throw DimensionError("project channel mismatch: input " + xs.str() +
                             " vs weight " + ws.str());
    const std::size_t pos = xs.numel() / std::max(1, xs.c);
    Tensor<T> out(Shape4{xs.b, xs.h, xs.w, dout});
    {
        const T* xp = t.val(x).data();
        const T* wp = t.val(w).data();
        T* op = out.data();
        parallel_for(pos, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t p = lo; p < hi; ++p) {
                const T* xrow = xp + p * din;
                T* orow = op + p * dout;
                for (int o = 0; o < dout; ++o) {
                    T acc = 0;
                    const T* wrow = wp + std::size_t(o) * din;
                    for (int i = 0; i < din; ++i) acc += xrow[i] * wrow[i];
                    orow[o] = acc;
                }
            }
        });
    }
    const bool req = t.any_requires({x, w});
    return t.make_node(
        std::move(out),
        [x, w, din, dout, pos](Tape<T>& tp, Var o) {
            const auto& g = tp.grad(o);
            const T* gp = g.data();
            if (tp.requires_grad(x)) {
                auto& gx = tp.grad_buf(x);
                const T* wp = tp.val(w).data();
                T* gxp = gx.data();
                parallel_for(pos, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t p = lo; p < hi; ++p)
                        for (int i = 0; i < din; ++i) {
                            T acc = 0;
                            for (int oc = 0; oc < dout; ++oc)
                                acc += gp[p * dout + oc] *
                                       wp[std::size_t(oc) * din + i];
                            gxp[p * din + i] += acc;
                        }
                });
            }
            if (tp.requires_grad(w)) {
                auto& gw = tp.grad_buf(w);
                const T* xp = tp.val(x).data();
                T* gwp = gw.data();
                parallel_for(std::size_t(dout), [&](std::size_t lo,
                                                    std::size_t hi) {
                    for (std::size_t oc = lo; oc < hi; ++oc)
                        for (std::size_t p = 0; p < pos; ++p) {
                            const T gv = gp[p * dout + oc];
                            const T* xrow = xp + p * din;
                            T* gwrow = gwp + oc * din;
                            for (int i = 0; i < din; ++i)
                                gwrow[i] += gv * xrow[i];
                        }
                });
            }
        },
        req, "project");
}

template <typename T>
struct Qkv {
    Var q, k, v;
};

template <typename T>
Qkv<T> project_qkv(Tape<T>& t, Var x, Var w_q, Var w_k, Var w_v) {
    return Qkv<T>{project(t, x, w_q), project(t, x, w_k), project(t, x, w_v)};
}

// Attention weights exported for inspection: dense (lines, heads, L, L) for
// batch element 0, zeros outside each window.
struct AttentionCapture {
    int heads = 0, L = 0, lines = 0;
    std::vector<double> weights;
    double& at(int line, int head, int i, int j) {
        return weights[((std::size_t(line) * heads + head) * L + i) * L + j];
    }
};

namespace detail {

struct AttendSpec {
    int heads = 1;
    int d_q = 0, d_out = 0;  // per head
    PositionalMode mode = PositionalMode::Full;
    bool global = true;
    int m = 0;        // local span
    int max_off = 0;  // table covers [-max_off, max_off] per axis component
    std::string name = "attention";
};

// 1D position-sensitive attention along the width axis.
//   logits(i,j) = q_i.k_j [+ q_i.rq_{j-i}] [+ k_j.rk_{j-i}]
//   y_i = sum_j softmax_j(logits) * (v_j [+ rv_{j-i}])
// Lines (b x h) are independent; all parallel loops write disjoint slices.
template <typename T>
Var attend_width(Tape<T>& t, Var q, Var k, Var v, Var rq, Var rk, Var rv,
                 const AttendSpec& sp, AttentionCapture* capture = nullptr) {
    const auto qs = t.val(q).shape();
    const auto ks = t.val(k).shape();
    const auto vs = t.val(v).shape();
    const int N = sp.heads, dq = sp.d_q, dv = sp.d_out;
    if (qs.c != N * dq || ks.c != N * dq || vs.c != N * dv ||
        ks.b != qs.b || ks.h != qs.h || ks.w != qs.w || vs.b != qs.b ||
        vs.h != qs.h || vs.w != qs.w)
        throw DimensionError("attend_width shape mismatch: q " + qs.str() +
                             " k " + ks.str() + " v " + vs.str());
    const int W = qs.w;
    if (W == 0) throw DomainError(sp.name + ": empty attention axis");
    if (sp.global && W > sp.max_off + 1)
        throw SpanOverflowError(
            sp.name + ": global span table covers axis length up to " +
            std::to_string(sp.max_off + 1) + ", input axis is " +
            std::to_string(W));
    const int K = 2 * sp.max_off + 1;
    const bool use_q = sp.mode != PositionalMode::None;
    const bool use_kv = sp.mode == PositionalMode::Full;
    if (use_q && t.val(rq).shape() != Shape4{1, 1, K, dq})
        throw DimensionError(sp.name + ": r_q table " + t.val(rq).shape().str() +
                             ", expected (1,1," + std::to_string(K) + "," +
                             std::to_string(dq) + ")");
    if (use_kv && (t.val(rk).shape() != Shape4{1, 1, K, dq} ||
                   t.val(rv).shape() != Shape4{1, 1, K, dv}))
        throw DimensionError(sp.name + ": r_k/r_v table shape mismatch");

    const std::size_t lines = std::size_t(qs.b) * qs.h;
    const Span span = sp.global ? Span::Global() : Span::Local(sp.m);
    const bool req =
        t.any_requires({q, k, v}) || (use_q && t.requires_grad(rq)) ||
        (use_kv && (t.requires_grad(rk) || t.requires_grad(rv)));
    const bool save = req || capture;

    Tensor<T> out(Shape4{qs.b, qs.h, W, N * dv});
    Tensor<T> saved;
    if (save) saved = Tensor<T>(Shape4{int(lines), N, W, W});

    const T* qp = t.val(q).data();
    const T* kp = t.val(k).data();
    const T* vp = t.val(v).data();
    const T* rqp = use_q ? t.val(rq).data() : nullptr;
    const T* rkp = use_kv ? t.val(rk).data() : nullptr;
    const T* rvp = use_kv ? t.val(rv).data() : nullptr;
    T* op = out.data();
    T* sp_ = save ? saved.data() : nullptr;

    parallel_for(lines, [&](std::size_t lo, std::size_t hi) {
        std::vector<T> logits(W);
        for (std::size_t line = lo; line < hi; ++line) {
            const T* ql = qp + line * W * N * dq;
            const T* kl = kp + line * W * N * dq;
            const T* vl = vp + line * W * N * dv;
            T* ol = op + line * W * N * dv;
            for (int n = 0; n < N; ++n) {
                for (int i = 0; i < W; ++i) {
                    const Window win = Window::around(i, W, span);
                    const T* qi = ql + std::size_t(i) * N * dq + n * dq;
                    // logits over the window, fixed term order
                    for (int j = win.lo; j <= win.hi; ++j) {
                        const T* kj = kl + std::size_t(j) * N * dq + n * dq;
                        T qk = 0;
                        for (int c = 0; c < dq; ++c) qk += qi[c] * kj[c];
                        T l = qk;
                        const int off = j - i + sp.max_off;
                        if (use_q) {
                            const T* r = rqp + std::size_t(off) * dq;
                            T qr = 0;
                            for (int c = 0; c < dq; ++c) qr += qi[c] * r[c];
                            l += qr;
                        }
                        if (use_kv) {
                            const T* r = rkp + std::size_t(off) * dq;
                            T kr = 0;
                            for (int c = 0; c < dq; ++c) kr += kj[c] * r[c];
                            l += kr;
                        }
                        logits[j] = l;
                    }
                    // softmax with max subtraction, window members only
                    T mx = logits[win.lo];
                    for (int j = win.lo + 1; j <= win.hi; ++j)
                        mx = std::max(mx, logits[j]);
                    T denom = 0;
                    for (int j = win.lo; j <= win.hi; ++j) {
                        logits[j] = std::exp(logits[j] - mx);
                        denom += logits[j];
                    }
                    T* yi = ol + std::size_t(i) * N * dv + n * dv;
                    for (int c = 0; c < dv; ++c) yi[c] = T(0);
                    for (int j = win.lo; j <= win.hi; ++j) {
                        const T a = logits[j] / denom;
                        if (save)
                            sp_[((line * N + n) * W + i) * W + j] = a;
                        const T* vj = vl + std::size_t(j) * N * dv + n * dv;
                        if (use_kv) {
                            const T* r =
                                rvp + std::size_t(j - i + sp.max_off) * dv;
                            for (int c = 0; c < dv; ++c)
                                yi[c] += a * (vj[c] + r[c]);
                        } else {
                            for (int c = 0; c < dv; ++c) yi[c] += a * vj[c];
                        }
                    }
                }
            }
        }
    });

    if (capture) {
        capture->heads = N;
        capture->L = W;
        capture->lines = qs.h;
        capture->weights.assign(std::size_t(qs.h) * N * W * W, 0.0);
        for (int line = 0; line < qs.h; ++line)
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < W; ++i)
                    for (int j = 0; j < W; ++j)
                        capture->at(line, n, i, j) = double(
                            sp_[((std::size_t(line) * N + n) * W + i) * W + j]);
    }

    Var saved_v = save ? t.leaf(std::move(saved)) : Var{};
    auto spec = std::make_shared<AttendSpec>(sp);
    auto bw = [q, k, v, rq, rk, rv, saved_v, spec, N, dq, dv, W, lines, span,
               use_q, use_kv](Tape<T>& tp, Var o) {
        const auto& g = tp.grad(o);
        const T* gp = g.data();
        const T* qp = tp.val(q).data();
        const T* kp = tp.val(k).data();
        const T* vp = tp.val(v).data();
        const T* rqp = use_q ? tp.val(rq).data() : nullptr;
        const T* rkp = use_kv ? tp.val(rk).data() : nullptr;
        const T* rvp = use_kv ? tp.val(rv).data() : nullptr;
        const T* A = tp.val(saved_v).data();
        const int maxo = spec->max_off;
        const int K = 2 * maxo + 1;
        const bool need_q = tp.requires_grad(q);
        const bool need_k = tp.requires_grad(k);
        const bool need_v = tp.requires_grad(v);
        const bool need_rq = use_q && tp.requires_grad(rq);
        const bool need_rk = use_kv && tp.requires_grad(rk);
        const bool need_rv = use_kv && tp.requires_grad(rv);

        T* gq = need_q ? tp.grad_buf(q).data() : nullptr;
        T* gk = need_k ? tp.grad_buf(k).data() : nullptr;
        T* gv = need_v ? tp.grad_buf(v).data() : nullptr;
        // Per-line partial table gradients, reduced in line order afterwards
        // so the result is independent of the thread count.
        std::vector<T> prq, prk, prv;
        if (need_rq) prq.assign(lines * std::size_t(K) * dq, T(0));
        if (need_rk) prk.assign(lines * std::size_t(K) * dq, T(0));
        if (need_rv) prv.assign(lines * std::size_t(K) * dv, T(0));

        parallel_for(lines, [&](std::size_t llo, std::size_t lhi) {
            std::vector<T> da(W), dl(W);
            for (std::size_t line = llo; line < lhi; ++line) {
                const T* ql = qp + line * W * N * dq;
                const T* kl = kp + line * W * N * dq;
                const T* vl = vp + line * W * N * dv;
                const T* gl = gp + line * W * N * dv;
                T* gql = need_q ? gq + line * W * N * dq : nullptr;
                T* gkl = need_k ? gk + line * W * N * dq : nullptr;
                T* gvl = need_v ? gv + line * W * N * dv : nullptr;
                for (int n = 0; n < N; ++n) {
                    const T* An = A + (line * N + n) * std::size_t(W) * W;
                    for (int i = 0; i < W; ++i) {
                        const Window win = Window::around(i, W, span);
                        const T* gi = gl + std::size_t(i) * N * dv + n * dv;
                        const T* qi = ql + std::size_t(i) * N * dq + n * dq;
                        // d a_ij and the softmax Jacobian product
                        T s = 0;
                        for (int j = win.lo; j <= win.hi; ++j) {
                            const T* vj =
                                vl + std::size_t(j) * N * dv + n * dv;
                            T acc = 0;
                            if (use_kv) {
                                const T* r =
                                    rvp + std::size_t(j - i + maxo) * dv;
                                for (int c = 0; c < dv; ++c)
                                    acc += gi[c] * (vj[c] + r[c]);
                            } else {
                                for (int c = 0; c < dv; ++c)
                                    acc += gi[c] * vj[c];
                            }
                            da[j] = acc;
                            s += acc * An[std::size_t(i) * W + j];
                        }
                        for (int j = win.lo; j <= win.hi; ++j) {
                            const T a = An[std::size_t(i) * W + j];
                            dl[j] = a * (da[j] - s);
                        }
                        // scatter into dq, dk, dv and table partials
                        for (int j = win.lo; j <= win.hi; ++j) {
                            const T a = An[std::size_t(i) * W + j];
                            const T d = dl[j];
                            const int off = j - i + maxo;
                            const T* kj =
                                kl + std::size_t(j) * N * dq + n * dq;
                            if (need_q) {
                                T* gqi = gql + std::size_t(i) * N * dq + n * dq;
                                if (use_q) {
                                    const T* r = rqp + std::size_t(off) * dq;
                                    for (int c = 0; c < dq; ++c)
                                        gqi[c] += d * (kj[c] + r[c]);
                                } else {
                                    for (int c = 0; c < dq; ++c)
                                        gqi[c] += d * kj[c];
                                }
                            }
                            if (need_k) {
                                T* gkj = gkl + std::size_t(j) * N * dq + n * dq;
                                if (use_kv) {
                                    const T* r = rkp + std::size_t(off) * dq;
                                    for (int c = 0; c < dq; ++c)
                                        gkj[c] += d * (qi[c] + r[c]);
                                } else {
                                    for (int c = 0; c < dq; ++c)
                                        gkj[c] += d * qi[c];
                                }
                            }
                            if (need_v) {
                                T* gvj = gvl + std::size_t(j) * N * dv + n * dv;
                                for (int c = 0; c < dv; ++c)
                                    gvj[c] += a * gi[c];
                            }
                            if (need_rq) {
                                T* p = prq.data() +
                                       (line * K + off) * std::size_t(dq);
                                for (int c = 0; c < dq; ++c) p[c] += d * qi[c];
                            }
                            if (need_rk) {
                                T* p = prk.data() +
                                       (line * K + off) * std::size_t(dq);
                                for (int c = 0; c < dq; ++c) p[c] += d * kj[c];
                            }
                            if (need_rv) {
                                T* p = prv.data() +
                                       (line * K + off) * std::size_t(dv);
                                for (int c = 0; c < dv; ++c)
                                    p[c] += a * gi[c];
                            }
                        }
                    }
                }
            }
        });
        // Ordered reduction of the per-line partials.
        auto reduce = [&](std::vector<T>& part, Var dst, int d) {
            auto& gd = tp.grad_buf(dst);
            for (std::size_t line = 0; line < lines; ++line) {
                const T* p = part.data() + line * std::size_t(K) * d;
                for (std::size_t i = 0; i < std::size_t(K) * d; ++i)
                    gd.data()[i] += p[i];
            }
        };
        if (need_rq) reduce(prq, rq, dq);
        if (need_rk) reduce(prk, rk, dq);
        if (need_rv) reduce(prv, rv, dv);
    };
    return t.make_node(std::move(out), bw, req, sp.name.c_str());
}

// 2D position-sensitive attention over the full lattice or a local m x m
// region (Eqs. 1-3 shapes). Tables are indexed by the 2D offset (dy, dx).
template <typename T>
Var attend_2d(Tape<T>& t, Var q, Var k, Var v, Var rq, Var rk, Var rv,
              const AttendSpec& sp) {
    const auto qs = t.val(q).shape();
    const int N = sp.heads, dq = sp.d_q, dv = sp.d_out;
    const int H = qs.h, W = qs.w;
    if (H * W == 0) throw DomainError(sp.name + ": empty lattice");
    if (qs.c != N * dq || t.val(k).shape().c != N * dq ||
        t.val(v).shape().c != N * dv)
        throw DimensionError(sp.name + ": channel mismatch q " + qs.str());
    const bool use_q = sp.mode != PositionalMode::None;
    const bool use_kv = sp.mode == PositionalMode::Full;
    const int maxo_h = sp.global ? H - 1 : sp.max_off;
    const int maxo_w = sp.global ? W - 1 : sp.max_off;
    const int Kh = 2 * maxo_h + 1, Kw = 2 * maxo_w + 1;
    if (use_q && t.val(rq).shape() != Shape4{1, Kh, Kw, dq})
        throw DimensionError(sp.name + ": r_q table " +
                             t.val(rq).shape().str() + ", expected (1," +
                             std::to_string(Kh) + "," + std::to_string(Kw) +
                             "," + std::to_string(dq) + ")");
    if (use_kv && (t.val(rk).shape() != Shape4{1, Kh, Kw, dq} ||
                   t.val(rv).shape() != Shape4{1, Kh, Kw, dv}))
        throw DimensionError(sp.name + ": r_k/r_v table shape mismatch");
    const int P = H * W;
    const int B = qs.b;
    const Span span = sp.global ? Span::Global() : Span::Local(sp.m);
    const bool req =
        t.any_requires({q, k, v}) || (use_q && t.requires_grad(rq)) ||
        (use_kv && (t.requires_grad(rk) || t.requires_grad(rv)));

    Tensor<T> out(Shape4{B, H, W, N * dv});
    Tensor<T> saved;
    if (req) saved = Tensor<T>(Shape4{B, N, P, P});
    const T* qp = t.val(q).data();
    const T* kp = t.val(k).data();
    const T* vp = t.val(v).data();
    const T* rqp = use_q ? t.val(rq).data() : nullptr;
    const T* rkp = use_kv ? t.val(rk).data() : nullptr;
    const T* rvp = use_kv ? t.val(rv).data() : nullptr;
    T* op = out.data();
    T* sp_ = req ? saved.data() : nullptr;

    parallel_for(std::size_t(B) * H, [&](std::size_t lo, std::size_t hi) {
        std::vector<T> logits(P);
        std::vector<int> members(P);
        for (std::size_t r = lo; r < hi; ++r) {
            const int b = int(r / H), oy = int(r % H);
            const T* qb = qp + std::size_t(b) * P * N * dq;
            const T* kb = kp + std::size_t(b) * P * N * dq;
            const T* vb = vp + std::size_t(b) * P * N * dv;
            for (int ox = 0; ox < W; ++ox) {
                const int o = oy * W + ox;
                const Window wy = Window::around(oy, H, span);
                const Window wx = Window::around(ox, W, span);
                for (int n = 0; n < N; ++n) {
                    const T* qo = qb + std::size_t(o) * N * dq + n * dq;
                    int nm = 0;
                    for (int py = wy.lo; py <= wy.hi; ++py)
                        for (int px = wx.lo; px <= wx.hi; ++px) {
                            const int p = py * W + px;
                            const T* kpix =
                                kb + std::size_t(p) * N * dq + n * dq;
                            T qk = 0;
                            for (int c = 0; c < dq; ++c)
                                qk += qo[c] * kpix[c];
                            T l = qk;
                            const std::size_t off =
                                (std::size_t(py - oy + maxo_h) * Kw +
                                 (px - ox + maxo_w));
                            if (use_q) {
                                const T* rr = rqp + off * dq;
                                T qr = 0;
                                for (int c = 0; c < dq; ++c)
                                    qr += qo[c] * rr[c];
                                l += qr;
                            }
                            if (use_kv) {
                                const T* rr = rkp + off * dq;
                                T kr = 0;
                                for (int c = 0; c < dq; ++c)
                                    kr += kpix[c] * rr[c];
                                l += kr;
                            }
                            logits[p] = l;
                            members[nm++] = p;
                        }
                    T mx = logits[members[0]];
                    for (int t2 = 1; t2 < nm; ++t2)
                        mx = std::max(mx, logits[members[t2]]);
                    T denom = 0;
                    for (int t2 = 0; t2 < nm; ++t2) {
                        T& lv = logits[members[t2]];
                        lv = std::exp(lv - mx);
                        denom += lv;
                    }
                    T* yo = op + (std::size_t(b) * P + o) * N * dv + n * dv;
                    for (int c = 0; c < dv; ++c) yo[c] = T(0);
                    for (int t2 = 0; t2 < nm; ++t2) {
                        const int p = members[t2];
                        const T a = logits[p] / denom;
                        if (req)
                            sp_[((std::size_t(b) * N + n) * P + o) * P + p] = a;
                        const T* vpix = vb + std::size_t(p) * N * dv + n * dv;
                        if (use_kv) {
                            const int py = p / W, px = p % W;
                            const T* rr =
                                rvp + (std::size_t(py - oy + maxo_h) * Kw +
                                       (px - ox + maxo_w)) *
                                          dv;
                            for (int c = 0; c < dv; ++c)
                                yo[c] += a * (vpix[c] + rr[c]);
                        } else {
                            for (int c = 0; c < dv; ++c)
                                yo[c] += a * vpix[c];
                        }
                    }
                }
            }
        }
    });

    Var saved_v = req ? t.leaf(std::move(saved)) : Var{};
    auto spec = std::make_shared<AttendSpec>(sp);
    auto bw = [q, k, v, rq, rk, rv, saved_v, spec, N, dq, dv, H, W, P, B, span,
               use_q, use_kv, maxo_h, maxo_w, Kh, Kw](Tape<T>& tp, Var o) {
        const auto& g = tp.grad(o);
        const T* gp = g.data();
        const T* qp = tp.val(q).data();
        const T* kp = tp.val(k).data();
        const T* vp = tp.val(v).data();
        const T* rqp = use_q ? tp.val(rq).data() : nullptr;
        const T* rkp = use_kv ? tp.val(rk).data() : nullptr;
        const T* rvp = use_kv ? tp.val(rv).data() : nullptr;
        const T* A = tp.val(saved_v).data();
        const bool need_q = tp.requires_grad(q);
        const bool need_k = tp.requires_grad(k);
        const bool need_v = tp.requires_grad(v);
        const bool need_rq = use_q && tp.requires_grad(rq);
        const bool need_rk = use_kv && tp.requires_grad(rk);
        const bool need_rv = use_kv && tp.requires_grad(rv);
        T* gq = need_q ? tp.grad_buf(q).data() : nullptr;
        T* gk = need_k ? tp.grad_buf(k).data() : nullptr;
        T* gv = need_v ? tp.grad_buf(v).data() : nullptr;
        const std::size_t tab = std::size_t(Kh) * Kw;
        std::vector<T> prq, prk, prv;
        if (need_rq) prq.assign(std::size_t(B) * tab * dq, T(0));
        if (need_rk) prk.assign(std::size_t(B) * tab * dq, T(0));
        if (need_rv) prv.assign(std::size_t(B) * tab * dv, T(0));

        // Batch elements are independent; per-batch partials reduced in order.
        parallel_for(std::size_t(B), [&](std::size_t blo, std::size_t bhi) {
            std::vector<T> da(P), dl(P);
            std::vector<int> members(P);
            for (std::size_t b = blo; b < bhi; ++b) {
                const T* qb = qp + b * std::size_t(P) * N * dq;
                const T* kb = kp + b * std::size_t(P) * N * dq;
                const T* vb = vp + b * std::size_t(P) * N * dv;
                const T* gb = gp + b * std::size_t(P) * N * dv;
                for (int n = 0; n < N; ++n) {
                    const T* An = A + (b * N + n) * std::size_t(P) * P;
                    for (int o = 0; o < P; ++o) {
                        const int oy = o / W, ox = o % W;
                        const Window wy = Window::around(oy, H, span);
                        const Window wx = Window::around(ox, W, span);
                        const T* go = gb + std::size_t(o) * N * dv + n * dv;
                        const T* qo = qb + std::size_t(o) * N * dq + n * dq;
                        int nm = 0;
                        T s = 0;
                        for (int py = wy.lo; py <= wy.hi; ++py)
                            for (int px = wx.lo; px <= wx.hi; ++px) {
                                const int p = py * W + px;
                                members[nm++] = p;
                                const T* vpix =
                                    vb + std::size_t(p) * N * dv + n * dv;
                                T acc = 0;
                                if (use_kv) {
                                    const T* rr =
                                        rvp +
                                        (std::size_t(py - oy + maxo_h) * Kw +
                                         (px - ox + maxo_w)) *
                                            dv;
                                    for (int c = 0; c < dv; ++c)
                                        acc += go[c] * (vpix[c] + rr[c]);
                                } else {
                                    for (int c = 0; c < dv; ++c)
                                        acc += go[c] * vpix[c];
                                }
                                da[p] = acc;
                                s += acc * An[std::size_t(o) * P + p];
                            }
                        for (int t2 = 0; t2 < nm; ++t2) {
                            const int p = members[t2];
                            const T a = An[std::size_t(o) * P + p];
                            dl[p] = a * (da[p] - s);
                        }
                        for (int t2 = 0; t2 < nm; ++t2) {
                            const int p = members[t2];
                            const int py = p / W, px = p % W;
                            const T a = An[std::size_t(o) * P + p];
                            const T d = dl[p];
                            const std::size_t off =
                                std::size_t(py - oy + maxo_h) * Kw +
                                (px - ox + maxo_w);
                            const T* kpix =
                                kb + std::size_t(p) * N * dq + n * dq;
                            if (need_q) {
                                T* gqo = gq + (b * std::size_t(P) + o) * N * dq +
                                         n * dq;
                                if (use_q) {
                                    const T* rr = rqp + off * dq;
                                    for (int c = 0; c < dq; ++c)
                                        gqo[c] += d * (kpix[c] + rr[c]);
                                } else {
                                    for (int c = 0; c < dq; ++c)
                                        gqo[c] += d * kpix[c];
                                }
                            }
                            if (need_k) {
                                T* gkp_ = gk +
                                          (b * std::size_t(P) + p) * N * dq +
                                          n * dq;
                                if (use_kv) {
                                    const T* rr = rkp + off * dq;
                                    for (int c = 0; c < dq; ++c)
                                        gkp_[c] += d * (qo[c] + rr[c]);
                                } else {
                                    for (int c = 0; c < dq; ++c)
                                        gkp_[c] += d * qo[c];
                                }
                            }
                            if (need_v) {
                                T* gvp_ = gv +
                                          (b * std::size_t(P) + p) * N * dv +
                                          n * dv;
                                for (int c = 0; c < dv; ++c)
                                    gvp_[c] += a * go[c];
                            }
                            if (need_rq) {
                                T* pp = prq.data() + (b * tab + off) * dq;
                                for (int c = 0; c < dq; ++c)
                                    pp[c] += d * qo[c];
                            }
                            if (need_rk) {
                                T* pp = prk.data() + (b * tab + off) * dq;
                                for (int c = 0; c < dq; ++c)
                                    pp[c] += d * kpix[c];
                            }
                            if (need_rv) {
                                T* pp = prv.data() + (b * tab + off) * dv;
                                for (int c = 0; c < dv; ++c)
                                    pp[c] += a * go[c];
                            }
                        }
                    }
                }
            }
        });
        auto reduce = [&](std::vector<T>& part, Var dst, int d) {
            auto& gd = tp.grad_buf(dst);
            for (int b = 0; b < B; ++b) {
                const T* p = part.data() + std::size_t(b) * tab * d;
                for (std::size_t i = 0; i < tab * d; ++i)
                    gd.data()[i] += p[i];
            }
        };
        if (need_rq) reduce(prq, rq, dq);
        if (need_rk) reduce(prk, rk, dq);
        if (need_rv) reduce(prv, rv, dv);
    };
    return t.make_node(std::move(out), bw, req, sp.name.c_str());
}

}  // namespace detail

// ---- Spec-level kernels (single head unless stated) ----

// Eq. 1: global 2D self-attention, no positional terms.
template <typename T>
Var global_attention_2d(Tape<T>& t, Var x, const AttentionVars<T>& p) {
    const auto ws = t.val(p.w_q).shape();
    const int dq = ws.h, dv = t.val(p.w_v).shape().h;
    auto qkv = project_qkv(t, x, p.w_q, p.w_k, p.w_v);
    detail::AttendSpec sp;
    sp.heads = 1;
    sp.d_q = dq;
    sp.d_out = dv;
    sp.mode = PositionalMode::None;
    sp.global = true;
    sp.name = "global_attention_2d";
    return detail::attend_2d(t, qkv.q, qkv.k, qkv.v, Var{}, Var{}, Var{}, sp);
}

// Eq. 2: local window with query-dependent positional bias.
template <typename T>
Var local_attention_2d(Tape<T>& t, Var x, const AttentionVars<T>& p, int m) {
    const Span span = Span::Local(m);  // validates odd m
    const auto ws = t.val(p.w_q).shape();
    detail::AttendSpec sp;
    sp.heads = 1;
    sp.d_q = ws.h;
    sp.d_out = t.val(p.w_v).shape().h;
    sp.mode = PositionalMode::QueryOnly;
    sp.global = false;
    sp.m = span.m;
    sp.max_off = m - 1;
    sp.name = "local_attention_2d";
    auto qkv = project_qkv(t, x, p.w_q, p.w_k, p.w_v);
    return detail::attend_2d(t, qkv.q, qkv.k, qkv.v, p.r_q, Var{}, Var{}, sp);
}

// Eq. 3: position-sensitive local attention (query, key and value terms).
template <typename T>
Var ps_attention_2d(Tape<T>& t, Var x, const AttentionVars<T>& p, int m) {
    const Span span = Span::Local(m);
    const auto ws = t.val(p.w_q).shape();
    detail::AttendSpec sp;
    sp.heads = 1;
    sp.d_q = ws.h;
    sp.d_out = t.val(p.w_v).shape().h;
    sp.mode = PositionalMode::Full;
    sp.global = false;
    sp.m = span.m;
    sp.max_off = m - 1;
    sp.name = "ps_attention_2d";
    auto qkv = project_qkv(t, x, p.w_q, p.w_k, p.w_v);
    return detail::attend_2d(t, qkv.q, qkv.k, qkv.v, p.r_q, p.r_k, p.r_v, sp);
}

// Eq. 4: 1D position-sensitive attention along one axis, every line
// independent. Single head; see multi_head for the concatenated form.
template <typename T>
Var axial_attention(Tape<T>& t, Var x, const AttentionVars<T>& p,
                    const AxialAttentionConfig& cfg,
                    AttentionCapture* capture = nullptr) {
    detail::AttendSpec sp;
    sp.heads = 1;
    sp.d_q = cfg.d_q;
    sp.d_out = cfg.d_out;
    sp.mode = cfg.positional;
    sp.global = cfg.span.global;
    sp.m = cfg.span.m;
    sp.max_off = cfg.max_offset();
    sp.name = cfg.axis == Axis::Width ? "axial_attention[width]"
                                      : "axial_attention[height]";
    Var in = cfg.axis == Axis::Height ? t.transpose_hw(x) : x;
    auto qkv = project_qkv(t, in, p.w_q, p.w_k, p.w_v);
    Var y = detail::attend_width(t, qkv.q, qkv.k, qkv.v, p.r_q, p.r_k, p.r_v,
                                 sp, capture);
    return cfg.axis == Axis::Height ? t.transpose_hw(y) : y;
}

// Multi-head composition: N heads with distinct projections, one shared
// positional table, outputs concatenated in head order.
template <typename T>
Var multi_head(Tape<T>& t, Var x, const std::vector<AttentionParams<T>>& heads,
               const AxialAttentionConfig& cfg,
               AttentionCapture* capture = nullptr) {
    if (heads.empty()) throw ConfigError("multi_head: no heads");
    const int N = int(heads.size());
    const int dq = heads[0].w_q.shape().h;
    const int dv = heads[0].w_v.shape().h;
    const int din = heads[0].w_q.shape().w;
    for (const auto& h : heads) {
        if (h.w_v.shape().h != dv)
            throw ConfigError("multi_head: heads disagree on d_out (" +
                              std::to_string(dv) + " vs " +
                              std::to_string(h.w_v.shape().h) + ")");
        if (h.w_q.shape().h != dq || h.w_q.shape().w != din)
            throw ConfigError("multi_head: heads disagree on projection shape");
    }
    // Stack per-head projections; channel layout is head-major, so the fused
    // kernel output is exactly concat_n(y^n).
    Tensor<T> wq(mat_shape(N * dq, din)), wk(mat_shape(N * dq, din)),
        wv(mat_shape(N * dv, din));
    for (int n = 0; n < N; ++n) {
        std::copy(heads[n].w_q.data(), heads[n].w_q.data() + dq * din,
                  wq.data() + std::size_t(n) * dq * din);
        std::copy(heads[n].w_k.data(), heads[n].w_k.data() + dq * din,
                  wk.data() + std::size_t(n) * dq * din);
        std::copy(heads[n].w_v.data(), heads[n].w_v.data() + dv * din,
                  wv.data() + std::size_t(n) * dv * din);
    }
    detail::AttendSpec sp;
    sp.heads = N;
    sp.d_q = dq;
    sp.d_out = dv;
    sp.mode = cfg.positional;
    sp.global = cfg.span.global;
    sp.m = cfg.span.m;
    sp.max_off = cfg.max_offset();
    sp.name = "multi_head";
    Var in = cfg.axis == Axis::Height ? t.transpose_hw(x) : x;
    Var q = project(t, in, t.leaf(std::move(wq)));
    Var k = project(t, in, t.leaf(std::move(wk)));
    Var v = project(t, in, t.leaf(std::move(wv)));
    Var rq, rk, rv;
    if (cfg.positional != PositionalMode::None)
        rq = t.leaf(heads[0].r_q);
    if (cfg.positional == PositionalMode::Full) {
        rk = t.leaf(heads[0].r_k);
        rv = t.leaf(heads[0].r_v);
    }
    Var y = detail::attend_width(t, q, k, v, rq, rk, rv, sp, capture);
    return cfg.axis == Axis::Height ? t.transpose_hw(y) : y;
}

// Fresh parameter tensors for one head of a layer (tables zero-initialized;
// callers randomize as needed).
template <typename T>
AttentionParams<T> make_params_1d(int d_in, int d_q, int d_out,
                                  int table_entries) {
    AttentionParams<T> p;
    p.w_q = Tensor<T>(mat_shape(d_q, d_in));
    p.w_k = Tensor<T>(mat_shape(d_q, d_in));
    p.w_v = Tensor<T>(mat_shape(d_out, d_in));
    p.r_q = Tensor<T>(Shape4{1, 1, table_entries, d_q});
    p.r_k = Tensor<T>(Shape4{1, 1, table_entries, d_q});
    p.r_v = Tensor<T>(Shape4{1, 1, table_entries, d_out});
    return p;
}

template <typename T>
AttentionParams<T> make_params_2d(int d_in, int d_q, int d_out, int entries_h,
                                  int entries_w) {
    AttentionParams<T> p;
    p.w_q = Tensor<T>(mat_shape(d_q, d_in));
    p.w_k = Tensor<T>(mat_shape(d_q, d_in));
    p.w_v = Tensor<T>(mat_shape(d_out, d_in));
    p.r_q = Tensor<T>(Shape4{1, entries_h, entries_w, d_q});
    p.r_k = Tensor<T>(Shape4{1, entries_h, entries_w, d_q});
    p.r_v = Tensor<T>(Shape4{1, entries_h, entries_w, d_out});
    return p;
}

}  // namespace axial
