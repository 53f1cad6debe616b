#pragma once

#include <vector>

#include "axial/tape.hpp"

namespace axial {
namespace ops {

// Direct NHWC convolution, no bias (BN follows every conv in this codebase).
// Weight layout: (cout, kh, kw, cin).
template <typename T>
Var conv2d(Tape<T>& t, Var x, Var w, int stride, int pad) {
    const auto& xs = t.val(x).shape();
    const auto& ws = t.val(w).shape();
    const int kh = ws.h, kw = ws.w, cin = ws.c, cout = ws.b;
    if (xs.c != cin)
        throw DimensionError("conv2d channel mismatch: input " + xs.str() +
                             " vs weight " + ws.str());
    const int oh = (xs.h + 2 * pad - kh) / stride + 1;
    const int ow = (xs.w + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0)
        throw DimensionError("conv2d output would be empty for input " +
                             xs.str() + " weight " + ws.str());
    Tensor<T> out(Shape4{xs.b, oh, ow, cout});
    {
        const T* xp = t.val(x).data();
        const T* wp = t.val(w).data();
        T* op = out.data();
        parallel_for(std::size_t(xs.b) * oh, [&](std::size_t lo,
                                                 std::size_t hi) {
            for (std::size_t r = lo; r < hi; ++r) {
                const int b = int(r / oh), oy = int(r % oh);
                for (int ox = 0; ox < ow; ++ox) {
                    T* orow = op + ((r * ow) + ox) * cout;
                    for (int oc = 0; oc < cout; ++oc) orow[oc] = T(0);
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= xs.h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= xs.w) continue;
                            const T* xrow =
                                xp + ((std::size_t(b) * xs.h + iy) * xs.w + ix) *
                                         cin;
                            for (int oc = 0; oc < cout; ++oc) {
                                const T* wrow =
                                    wp + ((std::size_t(oc) * kh + ky) * kw + kx) *
                                             cin;
                                T acc = 0;
                                for (int ic = 0; ic < cin; ++ic)
                                    acc += xrow[ic] * wrow[ic];
                                orow[oc] += acc;
                            }
                        }
                    }
                }
            }
        });
    }
    const bool req = t.any_requires({x, w});
    auto bw = [x, w, stride, pad, kh, kw, cin, cout, oh, ow, xs](Tape<T>& tp,
                                                                Var o) {
        const auto& g = tp.grad(o);
        const T* gp = g.data();
        if (tp.requires_grad(x)) {
            auto& gx = tp.grad_buf(x);
            const T* wp = tp.val(w).data();
            T* gxp = gx.data();
            parallel_for(std::size_t(xs.b) * xs.h, [&](std::size_t lo,
                                                       std::size_t hi) {
                for (std::size_t r = lo; r < hi; ++r) {
                    const int b = int(r / xs.h), iy = int(r % xs.h);
                    for (int ix = 0; ix < xs.w; ++ix) {
                        T* gxrow = gxp + (r * xs.w + ix) * cin;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int num = iy + pad - ky;
                            if (num < 0 || num % stride) continue;
                            const int oy = num / stride;
                            if (oy >= oh) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int numx = ix + pad - kx;
                                if (numx < 0 || numx % stride) continue;
                                const int ox = numx / stride;
                                if (ox >= ow) continue;
                                const T* grow =
                                    gp + ((std::size_t(b) * oh + oy) * ow + ox) *
                                             cout;
                                for (int oc = 0; oc < cout; ++oc) {
                                    const T gv = grow[oc];
                                    const T* wrow =
                                        wp +
                                        ((std::size_t(oc) * kh + ky) * kw + kx) *
                                            cin;
                                    for (int ic = 0; ic < cin; ++ic)
                                        gxrow[ic] += gv * wrow[ic];
                                }
                            }
                        }
                    }
                }
            });
        }
        if (tp.requires_grad(w)) {
            auto& gw = tp.grad_buf(w);
            const T* xp = tp.val(x).data();
            T* gwp = gw.data();
            parallel_for(std::size_t(cout), [&](std::size_t lo,
                                                std::size_t hi) {
                for (std::size_t oc = lo; oc < hi; ++oc) {
                    for (int b = 0; b < xs.b; ++b)
                        for (int oy = 0; oy < oh; ++oy)
                            for (int ox = 0; ox < ow; ++ox) {
                                const T gv =
                                    gp[((std::size_t(b) * oh + oy) * ow + ox) *
                                           cout +
                                       oc];
                                for (int ky = 0; ky < kh; ++ky) {
                                    const int iy = oy * stride - pad + ky;
                                    if (iy < 0 || iy >= xs.h) continue;
                                    for (int kx = 0; kx < kw; ++kx) {
                                        const int ix = ox * stride - pad + kx;
                                        if (ix < 0 || ix >= xs.w) continue;
                                        const T* xrow =
                                            xp + ((std::size_t(b) * xs.h + iy) *
                                                      xs.w +
                                                  ix) *
                                                     cin;
                                        T* gwrow =
                                            gwp + ((oc * kh + ky) * kw + kx) *
                                                      cin;
                                        for (int ic = 0; ic < cin; ++ic)
                                            gwrow[ic] += gv * xrow[ic];
                                    }
                                }
                            }
                }
            });
        }
    };
    return t.make_node(std::move(out), bw, req, "conv2d");
}

template <typename T>
Var conv1x1(Tape<T>& t, Var x, Var w, int stride = 1) {
    return conv2d(t, x, w, stride, 0);
}

enum class BnMode { Train, TrainFrozen, Eval };

// Running statistics for one batch-norm site; the affine gamma/beta are
// ordinary trainable tensors passed in as tape leaves. Statistics move only
// in Train mode; TrainFrozen normalizes with batch statistics but leaves
// them untouched (the deterministic mode gradcheck requires).
template <typename T>
struct BnBuffers {
    Tensor<T> running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BnBuffers(int c = 0)
        : running_mean(Shape4{1, 1, 1, c}),
          running_var(Shape4{1, 1, 1, c}, T(1)) {}
    int channels() const { return running_mean.shape().c; }
};

template <typename T>
Var batch_norm(Tape<T>& t, Var x, Var gamma, Var beta, BnBuffers<T>* state,
               BnMode mode) {
    const auto xs = t.val(x).shape();
    const int c = xs.c;
    if (state->channels() != c)
        throw ConfigError("batch_norm channel mismatch: input " + xs.str() +
                          " vs state with " +
                          std::to_string(state->channels()) + " channels");
    const std::size_t m = std::size_t(xs.b) * xs.h * xs.w;  // per-channel count
    Tensor<T> mean(Shape4{1, 1, 1, c});
    Tensor<T> invstd(Shape4{1, 1, 1, c});
    const T* xp = t.val(x).data();
    if (mode == BnMode::Eval) {
        for (int i = 0; i < c; ++i) {
            mean.data()[i] = state->running_mean.data()[i];
            invstd.data()[i] =
                T(1.0 / std::sqrt(double(state->running_var.data()[i]) +
                                  state->eps));
        }
    } else {
        std::vector<double> sum(c, 0.0), sq(c, 0.0);
        for (std::size_t p = 0; p < m; ++p) {
            const T* row = xp + p * c;
            for (int i = 0; i < c; ++i) {
                sum[i] += row[i];
                sq[i] += double(row[i]) * row[i];
            }
        }
        for (int i = 0; i < c; ++i) {
            const double mu = sum[i] / double(m);
            const double var = std::max(0.0, sq[i] / double(m) - mu * mu);
            mean.data()[i] = T(mu);
            invstd.data()[i] = T(1.0 / std::sqrt(var + state->eps));
            if (mode == BnMode::Train) {
                const double unbiased = m > 1 ? var * double(m) / double(m - 1)
                                              : var;
                state->running_mean.data()[i] =
                    T((1 - state->momentum) *
                          double(state->running_mean.data()[i]) +
                      state->momentum * mu);
                state->running_var.data()[i] =
                    T((1 - state->momentum) *
                          double(state->running_var.data()[i]) +
                      state->momentum * unbiased);
            }
        }
    }
    Tensor<T> out(xs);
    {
        const T* gp = t.val(gamma).data();
        const T* bp = t.val(beta).data();
        T* op = out.data();
        parallel_for(m, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t p = lo; p < hi; ++p) {
                const T* row = xp + p * c;
                T* orow = op + p * c;
                for (int i = 0; i < c; ++i)
                    orow[i] = (row[i] - mean.data()[i]) * invstd.data()[i] *
                                  gp[i] +
                              bp[i];
            }
        });
    }
    Var mean_v = t.leaf(std::move(mean));
    Var invstd_v = t.leaf(std::move(invstd));
    const bool batch_stats = mode != BnMode::Eval;
    const bool req = t.any_requires({x, gamma, beta});
    auto bw = [x, gamma, beta, mean_v, invstd_v, c, m, batch_stats](
                  Tape<T>& tp, Var o) {
        const auto& g = tp.grad(o);
        const T* gp = g.data();
        const T* xp = tp.val(x).data();
        const T* mu = tp.val(mean_v).data();
        const T* is = tp.val(invstd_v).data();
        const T* ga = tp.val(gamma).data();
        // Per-channel reductions of dy and dy*xhat, fixed order.
        std::vector<double> sum_dy(c, 0.0), sum_dyx(c, 0.0);
        for (std::size_t p = 0; p < m; ++p) {
            const T* grow = gp + p * c;
            const T* xrow = xp + p * c;
            for (int i = 0; i < c; ++i) {
                const double xhat = (double(xrow[i]) - mu[i]) * is[i];
                sum_dy[i] += grow[i];
                sum_dyx[i] += grow[i] * xhat;
            }
        }
        if (tp.requires_grad(gamma)) {
            auto& gg = tp.grad_buf(gamma);
            for (int i = 0; i < c; ++i) gg.data()[i] += T(sum_dyx[i]);
        }
        if (tp.requires_grad(beta)) {
            auto& gb = tp.grad_buf(beta);
            for (int i = 0; i < c; ++i) gb.data()[i] += T(sum_dy[i]);
        }
        if (tp.requires_grad(x)) {
            auto& gx = tp.grad_buf(x);
            T* gxp = gx.data();
            parallel_for(m, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t p = lo; p < hi; ++p) {
                    const T* grow = gp + p * c;
                    const T* xrow = xp + p * c;
                    T* gxrow = gxp + p * c;
                    for (int i = 0; i < c; ++i) {
                        if (batch_stats) {
                            const double xhat =
                                (double(xrow[i]) - mu[i]) * is[i];
                            const double d =
                                double(grow[i]) - sum_dy[i] / double(m) -
                                xhat * sum_dyx[i] / double(m);
                            gxrow[i] += T(ga[i] * is[i] * d);
                        } else {
                            gxrow[i] += T(ga[i] * is[i] * double(grow[i]));
                        }
                    }
                }
            });
        }
    };
    return t.make_node(std::move(out), bw, req, "batch_norm");
}

template <typename T>
Var max_pool(Tape<T>& t, Var x, int k, int stride, int pad) {
    const auto xs = t.val(x).shape();
    const int oh = (xs.h + 2 * pad - k) / stride + 1;
    const int ow = (xs.w + 2 * pad - k) / stride + 1;
    Tensor<T> out(Shape4{xs.b, oh, ow, xs.c});
    auto arg = std::make_shared<std::vector<std::size_t>>(out.numel());
    const T* xp = t.val(x).data();
    for (int b = 0; b < xs.b; ++b)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                for (int c = 0; c < xs.c; ++c) {
                    T best = 0;
                    std::size_t besti = SIZE_MAX;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= xs.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= xs.w) continue;
                            const std::size_t idx =
                                ((std::size_t(b) * xs.h + iy) * xs.w + ix) *
                                    xs.c +
                                c;
                            if (besti == SIZE_MAX || xp[idx] > best) {
                                best = xp[idx];
                                besti = idx;
                            }
                        }
                    }
                    const std::size_t oidx =
                        ((std::size_t(b) * oh + oy) * ow + ox) * xs.c + c;
                    out.data()[oidx] = best;
                    (*arg)[oidx] = besti;
                }
    return t.make_node(
        std::move(out),
        [x, arg](Tape<T>& tp, Var o) {
            const auto& g = tp.grad(o);
            auto& gx = tp.grad_buf(x);
            for (std::size_t i = 0; i < g.numel(); ++i)
                gx.data()[(*arg)[i]] += g.data()[i];
        },
        t.requires_grad(x), "max_pool");
}

template <typename T>
Var avg_pool2(Tape<T>& t, Var x) {
    const auto xs = t.val(x).shape();
    const int oh = xs.h / 2, ow = xs.w / 2;
    if (oh == 0 || ow == 0)
        throw DimensionError("avg_pool2 input too small: " + xs.str());
    Tensor<T> out(Shape4{xs.b, oh, ow, xs.c});
    const auto& xv = t.val(x);
    for (int b = 0; b < xs.b; ++b)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                for (int c = 0; c < xs.c; ++c)
                    out.at(b, oy, ox, c) =
                        (xv.at(b, 2 * oy, 2 * ox, c) +
                         xv.at(b, 2 * oy, 2 * ox + 1, c) +
                         xv.at(b, 2 * oy + 1, 2 * ox, c) +
                         xv.at(b, 2 * oy + 1, 2 * ox + 1, c)) /
                        T(4);
    return t.make_node(
        std::move(out),
        [x, oh, ow](Tape<T>& tp, Var o) {
            const auto& g = tp.grad(o);
            auto& gx = tp.grad_buf(x);
            const auto gs = g.shape();
            for (int b = 0; b < gs.b; ++b)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox)
                        for (int c = 0; c < gs.c; ++c) {
                            const T v = g.at(b, oy, ox, c) / T(4);
                            gx.at(b, 2 * oy, 2 * ox, c) += v;
                            gx.at(b, 2 * oy, 2 * ox + 1, c) += v;
                            gx.at(b, 2 * oy + 1, 2 * ox, c) += v;
                            gx.at(b, 2 * oy + 1, 2 * ox + 1, c) += v;
                        }
        },
        t.requires_grad(x), "avg_pool2");
}

// Keep every other position along both spatial axes (block striding).
template <typename T>
Var subsample2(Tape<T>& t, Var x) {
    const auto xs = t.val(x).shape();
    const int oh = (xs.h + 1) / 2, ow = (xs.w + 1) / 2;
    Tensor<T> out(Shape4{xs.b, oh, ow, xs.c});
    const auto& xv = t.val(x);
    for (int b = 0; b < xs.b; ++b)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                for (int c = 0; c < xs.c; ++c)
                    out.at(b, oy, ox, c) = xv.at(b, 2 * oy, 2 * ox, c);
    return t.make_node(
        std::move(out),
        [x, oh, ow](Tape<T>& tp, Var o) {
            const auto& g = tp.grad(o);
            auto& gx = tp.grad_buf(x);
            const auto gs = g.shape();
            for (int b = 0; b < gs.b; ++b)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox)
                        for (int c = 0; c < gs.c; ++c)
                            gx.at(b, 2 * oy, 2 * ox, c) += g.at(b, oy, ox, c);
        },
        t.requires_grad(x), "subsample2");
}

template <typename T>
Var global_avg_pool(Tape<T>& t, Var x) {
    const auto xs = t.val(x).shape();
    const std::size_t hw = std::size_t(xs.h) * xs.w;
    if (hw == 0) throw DomainError("global_avg_pool on empty lattice " + xs.str());
    Tensor<T> out(Shape4{xs.b, 1, 1, xs.c});
    const T* xp = t.val(x).data();
    for (int b = 0; b < xs.b; ++b)
        for (std::size_t p = 0; p < hw; ++p)
            for (int c = 0; c < xs.c; ++c)
                out.data()[std::size_t(b) * xs.c + c] +=
                    xp[(std::size_t(b) * hw + p) * xs.c + c];
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] /= T(hw);
    return t.make_node(
        std::move(out),
        [x, hw](Tape<T>& tp, Var o) {
            const auto& g = tp.grad(o);
            auto& gx = tp.grad_buf(x);
            const auto xs2 = gx.shape();
            for (int b = 0; b < xs2.b; ++b)
                for (std::size_t p = 0; p < hw; ++p)
                    for (int c = 0; c < xs2.c; ++c)
                        gx.data()[(std::size_t(b) * hw + p) * xs2.c + c] +=
                            g.data()[std::size_t(b) * xs2.c + c] / T(hw);
        },
        t.requires_grad(x), "global_avg_pool");
}

// x: (b,1,1,cin), w: (cout, cin) stored as mat, bias: (1,1,1,cout).
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var bias) {
    const auto xs = t.val(x).shape();
    const auto ws = t.val(w).shape();
    const int cin = xs.c, cout = ws.h;
    if (ws.w != cin)
        throw DimensionError("linear shape mismatch: input " + xs.str() +
                             " vs weight " + ws.str());
    Tensor<T> out(Shape4{xs.b, 1, 1, cout});
    const T* xp = t.val(x).data();
    const T* wp = t.val(w).data();
    const T* bp = t.val(bias).data();
    for (int b = 0; b < xs.b; ++b)
        for (int o = 0; o < cout; ++o) {
            T acc = bp[o];
            for (int i = 0; i < cin; ++i)
                acc += xp[std::size_t(b) * cin + i] * wp[std::size_t(o) * cin + i];
            out.data()[std::size_t(b) * cout + o] = acc;
        }
    const bool req = t.any_requires({x, w, bias});
    return t.make_node(
        std::move(out),
        [x, w, bias, cin, cout](Tape<T>& tp, Var o) {
            const auto& g = tp.grad(o);
            const int b = g.shape().b;
            const T* gp = g.data();
            if (tp.requires_grad(x)) {
                auto& gx = tp.grad_buf(x);
                const T* wp = tp.val(w).data();
                for (int bi = 0; bi < b; ++bi)
                    for (int i = 0; i < cin; ++i) {
                        T acc = 0;
                        for (int oc = 0; oc < cout; ++oc)
                            acc += gp[std::size_t(bi) * cout + oc] *
                                   wp[std::size_t(oc) * cin + i];
                        gx.data()[std::size_t(bi) * cin + i] += acc;
                    }
            }
            if (tp.requires_grad(w)) {
                auto& gw = tp.grad_buf(w);
                const T* xp = tp.val(x).data();
                for (int oc = 0; oc < cout; ++oc)
                    for (int i = 0; i < cin; ++i) {
                        T acc = 0;
                        for (int bi = 0; bi < b; ++bi)
                            acc += gp[std::size_t(bi) * cout + oc] *
                                   xp[std::size_t(bi) * cin + i];
                        gw.data()[std::size_t(oc) * cin + i] += acc;
                    }
            }
            if (tp.requires_grad(bias)) {
                auto& gb = tp.grad_buf(bias);
                for (int bi = 0; bi < b; ++bi)
                    for (int oc = 0; oc < cout; ++oc)
                        gb.data()[oc] += gp[std::size_t(bi) * cout + oc];
            }
        },
        req, "linear");
}

// Mean softmax cross-entropy over the batch; logits (b,1,1,classes).
template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, const std::vector<int>& labels) {
    const auto ls = t.val(logits).shape();
    const int b = ls.b, c = ls.c;
    if (int(labels.size()) != b)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                             " labels for logits " + ls.str());
    if (c == 0) throw DomainError("cross_entropy: no classes");
    Tensor<T> probs(ls);
    double loss = 0;
    const T* lp = t.val(logits).data();
    for (int bi = 0; bi < b; ++bi) {
        const T* row = lp + std::size_t(bi) * c;
        T mx = row[0];
        for (int i = 1; i < c; ++i) mx = std::max(mx, row[i]);
        double denom = 0;
        for (int i = 0; i < c; ++i) denom += std::exp(double(row[i] - mx));
        const double lse = std::log(denom) + double(mx);
        loss += lse - double(row[labels[bi]]);
        for (int i = 0; i < c; ++i)
            probs.data()[std::size_t(bi) * c + i] =
                T(std::exp(double(row[i]) - lse));
    }
    Tensor<T> out(Shape4{1, 1, 1, 1});
    out.data()[0] = T(loss / b);
    Var probs_v = t.leaf(std::move(probs));
    auto labels_p = std::make_shared<std::vector<int>>(labels);
    return t.make_node(
        std::move(out),
        [logits, probs_v, labels_p, b, c](Tape<T>& tp, Var o) {
            const T g = tp.grad(o).data()[0];
            auto& gl = tp.grad_buf(logits);
            const T* pp = tp.val(probs_v).data();
            for (int bi = 0; bi < b; ++bi)
                for (int i = 0; i < c; ++i) {
                    T v = pp[std::size_t(bi) * c + i];
                    if (i == (*labels_p)[bi]) v -= T(1);
                    gl.data()[std::size_t(bi) * c + i] += g * v / T(b);
                }
        },
        t.requires_grad(logits), "cross_entropy");
}

}  // namespace ops
}  // namespace axial
