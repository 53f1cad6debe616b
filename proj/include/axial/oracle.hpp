#pragma once

#include <functional>
#include <string>
#include <vector>

#include "axial/attention.hpp"

// Deliberately slow, mathematically literal evaluations of Eqs. 1-4 used as
// the trust anchor for the fast kernels. No code is shared with the kernel
// implementations: projections, softmax and aggregation are all re-derived
// here with scalar loops and 64-bit accumulation.
namespace axial {
namespace oracle {

inline void guard_desk_scale(const Shape4& s) {
    if (s.h > 16 || s.w > 16)
        throw SizeError("oracle guard: h,w <= 16 required, got " + s.str());
}

// q_o = W x_o for a single position, scalar loops.
inline std::vector<double> project_pixel(const Tensor<double>& w,
                                         const Tensor<double>& x, int b, int i,
                                         int j) {
    const int dout = w.shape().h, din = w.shape().w;
    std::vector<double> out(dout, 0.0);
    for (int o = 0; o < dout; ++o)
        for (int c = 0; c < din; ++c)
            out[o] += w.at(0, o, c, 0) * x.at(b, i, j, c);
    return out;
}

// Eq. 1: y_o = sum_{p in N} softmax_p(q_o^T k_p) v_p over the whole lattice.
inline Tensor<double> oracle_eq1(const Tensor<double>& x,
                                 const AttentionParams<double>& p) {
    guard_desk_scale(x.shape());
    const auto s = x.shape();
    if (s.h * s.w == 0) throw DomainError("oracle_eq1: empty lattice");
    const int dout = p.w_v.shape().h;
    Tensor<double> y(Shape4{s.b, s.h, s.w, dout});
    for (int b = 0; b < s.b; ++b)
        for (int oi = 0; oi < s.h; ++oi)
            for (int oj = 0; oj < s.w; ++oj) {
                auto q = project_pixel(p.w_q, x, b, oi, oj);
                std::vector<double> logits;
                for (int pi = 0; pi < s.h; ++pi)
                    for (int pj = 0; pj < s.w; ++pj) {
                        auto k = project_pixel(p.w_k, x, b, pi, pj);
                        double l = 0;
                        for (std::size_t c = 0; c < q.size(); ++c)
                            l += q[c] * k[c];
                        logits.push_back(l);
                    }
                double mx = logits[0];
                for (double l : logits) mx = std::max(mx, l);
                double denom = 0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    denom += l;
                }
                int idx = 0;
                for (int pi = 0; pi < s.h; ++pi)
                    for (int pj = 0; pj < s.w; ++pj) {
                        const double a = logits[idx++] / denom;
                        auto v = project_pixel(p.w_v, x, b, pi, pj);
                        for (int c = 0; c < dout; ++c)
                            y.at(b, oi, oj, c) += a * v[c];
                    }
            }
    return y;
}

// Shared scaffold for Eqs. 2 and 3; `full` switches the key/value positional
// terms on. Window members are clipped to the lattice.
inline Tensor<double> oracle_local_2d(const Tensor<double>& x,
                                      const AttentionParams<double>& p, int m,
                                      bool full) {
    guard_desk_scale(x.shape());
    if (m < 1 || m % 2 == 0)
        throw ConfigError("oracle: local span must be odd, got " +
                          std::to_string(m));
    const auto s = x.shape();
    const int dout = p.w_v.shape().h;
    const int r = (m - 1) / 2;
    const int maxo = m - 1;  // table covers [-(m-1), m-1] per axis
    Tensor<double> y(Shape4{s.b, s.h, s.w, dout});
    for (int b = 0; b < s.b; ++b)
        for (int oi = 0; oi < s.h; ++oi)
            for (int oj = 0; oj < s.w; ++oj) {
                auto q = project_pixel(p.w_q, x, b, oi, oj);
                std::vector<double> logits;
                std::vector<std::pair<int, int>> members;
                for (int pi = std::max(0, oi - r);
                     pi <= std::min(s.h - 1, oi + r); ++pi)
                    for (int pj = std::max(0, oj - r);
                         pj <= std::min(s.w - 1, oj + r); ++pj) {
                        auto k = project_pixel(p.w_k, x, b, pi, pj);
                        double l = 0;
                        for (std::size_t c = 0; c < q.size(); ++c)
                            l += q[c] * k[c];
                        double qr = 0;
                        for (std::size_t c = 0; c < q.size(); ++c)
                            qr += q[c] *
                                  p.r_q.at(0, pi - oi + maxo, pj - oj + maxo,
                                           int(c));
                        l += qr;
                        if (full) {
                            double kr = 0;
                            for (std::size_t c = 0; c < q.size(); ++c)
                                kr += k[c] *
                                      p.r_k.at(0, pi - oi + maxo,
                                               pj - oj + maxo, int(c));
                            l += kr;
                        }
                        logits.push_back(l);
                        members.emplace_back(pi, pj);
                    }
                double mx = logits[0];
                for (double l : logits) mx = std::max(mx, l);
                double denom = 0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    denom += l;
                }
                for (std::size_t t = 0; t < members.size(); ++t) {
                    const double a = logits[t] / denom;
                    const auto [pi, pj] = members[t];
                    auto v = project_pixel(p.w_v, x, b, pi, pj);
                    for (int c = 0; c < dout; ++c) {
                        double val = v[c];
                        if (full)
                            val += p.r_v.at(0, pi - oi + maxo, pj - oj + maxo,
                                            c);
                        y.at(b, oi, oj, c) += a * val;
                    }
                }
            }
    return y;
}

inline Tensor<double> oracle_eq2(const Tensor<double>& x,
                                 const AttentionParams<double>& p, int m) {
    return oracle_local_2d(x, p, m, false);
}

inline Tensor<double> oracle_eq3(const Tensor<double>& x,
                                 const AttentionParams<double>& p, int m) {
    return oracle_local_2d(x, p, m, true);
}

// Eq. 4: 1D position-sensitive attention along one axis, single head.
inline Tensor<double> oracle_eq4(const Tensor<double>& x,
                                 const AttentionParams<double>& p, Axis axis,
                                 const Span& span) {
    guard_desk_scale(x.shape());
    const auto s = x.shape();
    const int dout = p.w_v.shape().h;
    const int L = axis == Axis::Width ? s.w : s.h;
    if (L == 0) throw DomainError("oracle_eq4: empty axis");
    const int maxo = span.global ? L - 1 : span.m - 1;
    const int r = span.global ? L : (span.m - 1) / 2;
    const int lines = axis == Axis::Width ? s.h : s.w;
    Tensor<double> y(Shape4{s.b, s.h, s.w, dout});
    auto X = [&](int b, int line, int pos, int c) {
        return axis == Axis::Width ? x.at(b, line, pos, c)
                                   : x.at(b, pos, line, c);
    };
    auto Y = [&](int b, int line, int pos, int c) -> double& {
        return axis == Axis::Width ? y.at(b, line, pos, c)
                                   : y.at(b, pos, line, c);
    };
    const int dq = p.w_q.shape().h, din = p.w_q.shape().w;
    auto proj = [&](const Tensor<double>& w, int d, int b, int line, int pos) {
        std::vector<double> out(d, 0.0);
        for (int o = 0; o < d; ++o)
            for (int c = 0; c < din; ++c)
                out[o] += w.at(0, o, c, 0) * X(b, line, pos, c);
        return out;
    };
    for (int b = 0; b < s.b; ++b)
        for (int line = 0; line < lines; ++line)
            for (int o = 0; o < L; ++o) {
                auto q = proj(p.w_q, dq, b, line, o);
                std::vector<double> logits;
                std::vector<int> members;
                for (int pp = std::max(0, o - r); pp <= std::min(L - 1, o + r);
                     ++pp) {
                    auto k = proj(p.w_k, dq, b, line, pp);
                    double l = 0;
                    for (int c = 0; c < dq; ++c) l += q[c] * k[c];
                    double qr = 0;
                    for (int c = 0; c < dq; ++c)
                        qr += q[c] * p.r_q.at(0, 0, pp - o + maxo, c);
                    l += qr;
                    double kr = 0;
                    for (int c = 0; c < dq; ++c)
                        kr += k[c] * p.r_k.at(0, 0, pp - o + maxo, c);
                    l += kr;
                    logits.push_back(l);
                    members.push_back(pp);
                }
                double mx = logits[0];
                for (double l : logits) mx = std::max(mx, l);
                double denom = 0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    denom += l;
                }
                for (std::size_t t = 0; t < members.size(); ++t) {
                    const double a = logits[t] / denom;
                    const int pp = members[t];
                    auto v = proj(p.w_v, dout, b, line, pp);
                    for (int c = 0; c < dout; ++c)
                        Y(b, line, o, c) += a * (v[c] + p.r_v.at(0, 0,
                                                                 pp - o + maxo,
                                                                 c));
                }
            }
    return y;
}

// ---- verification harness ----

struct OracleReport {
    std::string kernel;
    int cases = 0;
    std::string shapes;
    double max_abs = 0;
    double max_rel = 0;
    double threshold = 0;
    bool pass = true;
};

// Test-only hook: applied to each fast-kernel output before comparison, so a
// deliberately broken kernel can be shown to trip the harness.
using Perturb = std::function<void(Tensor<double>&)>;

std::vector<OracleReport> verify_kernels(int seed_count,
                                         double threshold = 1e-10,
                                         const Perturb& perturb = nullptr);

// ---- generic gradcheck ----

struct GradcheckGroup {
    std::string name;
    double rel_err = 0;
};

struct GradcheckReport {
    std::string target;
    std::vector<GradcheckGroup> groups;
    double worst = 0;
    double tolerance = 0;
    bool pass = true;
};

// Compares analytic gradients (one tape run) against central finite
// differences for every named group. `loss` must be deterministic in the
// group values.
GradcheckReport gradcheck_groups(
    const std::string& target, const std::vector<std::string>& names,
    const std::vector<Tensor<double>>& values,
    const std::function<double(const std::vector<Tensor<double>>&)>& loss,
    const std::function<std::vector<Tensor<double>>(
        const std::vector<Tensor<double>>&)>& analytic,
    double step, double tolerance);

// Gradcheck for one attention kernel: all parameter groups and the input.
enum class KernelKind { Eq1, Eq2, Eq3, Eq4Width, Eq4Height };
GradcheckReport gradcheck_kernel(KernelKind kind, Shape4 xshape, int d_q,
                                 int d_out, int m, std::uint64_t seed,
                                 double tolerance = 1e-4);

}  // namespace oracle
}  // namespace axial
