#include "axial/oracle.hpp"

#include <sstream>

namespace axial {
namespace oracle {

namespace {

AttentionParams<double> random_params_2d(Rng& rng, int d_in, int d_q,
                                         int d_out, int kh, int kw) {
    auto p = make_params_2d<double>(d_in, d_q, d_out, kh, kw);
    p.w_q = Tensor<double>::randn(p.w_q.shape(), rng, 0.5);
    p.w_k = Tensor<double>::randn(p.w_k.shape(), rng, 0.5);
    p.w_v = Tensor<double>::randn(p.w_v.shape(), rng, 0.5);
    p.r_q = Tensor<double>::randn(p.r_q.shape(), rng, 0.5);
    p.r_k = Tensor<double>::randn(p.r_k.shape(), rng, 0.5);
    p.r_v = Tensor<double>::randn(p.r_v.shape(), rng, 0.5);
    return p;
}

AttentionParams<double> random_params_1d(Rng& rng, int d_in, int d_q,
                                         int d_out, int entries) {
    auto p = make_params_1d<double>(d_in, d_q, d_out, entries);
    p.w_q = Tensor<double>::randn(p.w_q.shape(), rng, 0.5);
    p.w_k = Tensor<double>::randn(p.w_k.shape(), rng, 0.5);
    p.w_v = Tensor<double>::randn(p.w_v.shape(), rng, 0.5);
    p.r_q = Tensor<double>::randn(p.r_q.shape(), rng, 0.5);
    p.r_k = Tensor<double>::randn(p.r_k.shape(), rng, 0.5);
    p.r_v = Tensor<double>::randn(p.r_v.shape(), rng, 0.5);
    return p;
}

void account(OracleReport& rep, const Tensor<double>& fast,
             const Tensor<double>& ref) {
    rep.cases++;
    rep.max_abs = std::max(rep.max_abs, double(max_abs_diff(fast, ref)));
    rep.max_rel = std::max(rep.max_rel, max_rel_diff(fast, ref, 1.0));
}

}  // namespace

std::vector<OracleReport> verify_kernels(int seed_count, double threshold,
                                         const Perturb& perturb) {
    std::vector<OracleReport> reports;
    const int shapes[][3] = {{1, 1, 1}, {1, 3, 3}, {1, 5, 4}, {2, 4, 5},
                             {1, 8, 8}, {1, 2, 7}};
    const int nshapes = 6;
    const int spans[] = {1, 3, 5};
    std::ostringstream shape_desc;
    shape_desc << "h,w<=8, c<=8, m in {1,3,5,Global}";

    auto run_case = [&](OracleReport& rep, const Tensor<double>& fast,
                        const Tensor<double>& ref) {
        Tensor<double> f = fast;
        if (perturb) perturb(f);
        account(rep, f, ref);
    };

    {
        OracleReport rep;
        rep.kernel = "global_attention_2d (Eq.1)";
        rep.threshold = threshold;
        rep.shapes = shape_desc.str();
        for (int s = 0; s < seed_count; ++s) {
            Rng rng = Rng::fork(101, s);
            const auto& sh = shapes[s % nshapes];
            const int c = 2 + int(rng.below(7));
            const int dq = 1 + int(rng.below(4)), dv = 1 + int(rng.below(6));
            Tensor<double> x = Tensor<double>::randn(
                Shape4{sh[0], sh[1], sh[2], c}, rng);
            auto p = random_params_2d(rng, c, dq, dv, 1, 1);
            Tape<double> t;
            Var xv = t.leaf(x);
            auto pv = leaf_params(t, p);
            run_case(rep, t.val(global_attention_2d(t, xv, pv)),
                     oracle_eq1(x, p));
        }
        rep.pass = rep.max_abs <= rep.threshold;
        reports.push_back(rep);
    }
    {
        OracleReport rep;
        rep.kernel = "local_attention_2d (Eq.2)";
        rep.threshold = threshold;
        rep.shapes = shape_desc.str();
        for (int s = 0; s < seed_count; ++s) {
            Rng rng = Rng::fork(202, s);
            const auto& sh = shapes[s % nshapes];
            const int m = spans[s % 3];
            const int c = 2 + int(rng.below(7));
            const int dq = 1 + int(rng.below(4)), dv = 1 + int(rng.below(6));
            Tensor<double> x = Tensor<double>::randn(
                Shape4{sh[0], sh[1], sh[2], c}, rng);
            auto p = random_params_2d(rng, c, dq, dv, 2 * m - 1, 2 * m - 1);
            Tape<double> t;
            Var xv = t.leaf(x);
            auto pv = leaf_params(t, p);
            run_case(rep, t.val(local_attention_2d(t, xv, pv, m)),
                     oracle_eq2(x, p, m));
        }
        rep.pass = rep.max_abs <= rep.threshold;
        reports.push_back(rep);
    }
    {
        OracleReport rep;
        rep.kernel = "ps_attention_2d (Eq.3)";
        rep.threshold = threshold;
        rep.shapes = shape_desc.str();
        for (int s = 0; s < seed_count; ++s) {
            Rng rng = Rng::fork(303, s);
            const auto& sh = shapes[s % nshapes];
            const int m = spans[s % 3];
            const int c = 2 + int(rng.below(7));
            const int dq = 1 + int(rng.below(4)), dv = 1 + int(rng.below(6));
            Tensor<double> x = Tensor<double>::randn(
                Shape4{sh[0], sh[1], sh[2], c}, rng);
            auto p = random_params_2d(rng, c, dq, dv, 2 * m - 1, 2 * m - 1);
            Tape<double> t;
            Var xv = t.leaf(x);
            auto pv = leaf_params(t, p);
            run_case(rep, t.val(ps_attention_2d(t, xv, pv, m)),
                     oracle_eq3(x, p, m));
        }
        rep.pass = rep.max_abs <= rep.threshold;
        reports.push_back(rep);
    }
    {
        OracleReport rep;
        rep.kernel = "axial_attention (Eq.4)";
        rep.threshold = threshold;
        rep.shapes = shape_desc.str();
        for (int s = 0; s < seed_count; ++s) {
            Rng rng = Rng::fork(404, s);
            const auto& sh = shapes[s % nshapes];
            const Axis axis = (s % 2) ? Axis::Height : Axis::Width;
            const int L = axis == Axis::Width ? sh[2] : sh[1];
            Span span = (s % 4 == 3) ? Span::Global()
                                     : Span::Local(std::min(spans[s % 3],
                                                            2 * L - 1));
            const int c = 2 + int(rng.below(7));
            const int dq = 1 + int(rng.below(4)), dv = 1 + int(rng.below(6));
            const int entries = span.global ? 2 * L - 1 : 2 * span.m - 1;
            Tensor<double> x = Tensor<double>::randn(
                Shape4{sh[0], sh[1], sh[2], c}, rng);
            auto p = random_params_1d(rng, c, dq, dv, entries);
            AxialAttentionConfig cfg;
            cfg.axis = axis;
            cfg.span = span;
            cfg.heads = 1;
            cfg.d_in = c;
            cfg.d_q = dq;
            cfg.d_out = dv;
            cfg.positional = PositionalMode::Full;
            cfg.global_len = L;
            Tape<double> t;
            Var xv = t.leaf(x);
            auto pv = leaf_params(t, p);
            run_case(rep, t.val(axial_attention(t, xv, pv, cfg)),
                     oracle_eq4(x, p, axis, span));
        }
        rep.pass = rep.max_abs <= rep.threshold;
        reports.push_back(rep);
    }
    return reports;
}

GradcheckReport gradcheck_groups(
    const std::string& target, const std::vector<std::string>& names,
    const std::vector<Tensor<double>>& values,
    const std::function<double(const std::vector<Tensor<double>>&)>& loss,
    const std::function<std::vector<Tensor<double>>(
        const std::vector<Tensor<double>>&)>& analytic,
    double step, double tolerance) {
    GradcheckReport rep;
    rep.target = target;
    rep.tolerance = tolerance;
    auto grads = analytic(values);
    if (grads.size() != values.size())
        throw ContractError("gradcheck: analytic returned " +
                            std::to_string(grads.size()) + " groups for " +
                            std::to_string(values.size()) + " inputs");
    for (std::size_t gi = 0; gi < values.size(); ++gi) {
        auto fd = finite_difference_grad(
            [&](const Tensor<double>& probe) {
                std::vector<Tensor<double>> vals = values;
                vals[gi] = probe;
                return loss(vals);
            },
            values[gi], step);
        // Relative error with an absolute floor so near-zero entries do not
        // blow up the ratio.
        double scale = 0;
        for (std::size_t i = 0; i < fd.numel(); ++i)
            scale = std::max(scale, std::abs(fd.data()[i]));
        const double floor = std::max(1e-6, 1e-6 * scale);
        double worst = 0;
        for (std::size_t i = 0; i < fd.numel(); ++i) {
            const double a = grads[gi].data()[i], b = fd.data()[i];
            worst = std::max(worst, std::abs(a - b) /
                                        std::max({std::abs(a), std::abs(b),
                                                  floor}));
        }
        rep.groups.push_back({names[gi], worst});
        rep.worst = std::max(rep.worst, worst);
    }
    rep.pass = rep.worst < tolerance;
    return rep;
}

GradcheckReport gradcheck_kernel(KernelKind kind, Shape4 xshape, int d_q,
                                 int d_out, int m, std::uint64_t seed,
                                 double tolerance) {
    Rng rng = Rng::fork(seed, 77);
    const int c = xshape.c;
    Tensor<double> x = Tensor<double>::randn(xshape, rng, 0.7);
    AttentionParams<double> p;
    AxialAttentionConfig cfg;
    std::string name;
    switch (kind) {
        case KernelKind::Eq1:
            p = random_params_2d(rng, c, d_q, d_out, 1, 1);
            name = "global_attention_2d";
            break;
        case KernelKind::Eq2:
        case KernelKind::Eq3:
            p = random_params_2d(rng, c, d_q, d_out, 2 * m - 1, 2 * m - 1);
            name = kind == KernelKind::Eq2 ? "local_attention_2d"
                                           : "ps_attention_2d";
            break;
        case KernelKind::Eq4Width:
        case KernelKind::Eq4Height: {
            cfg.axis = kind == KernelKind::Eq4Width ? Axis::Width : Axis::Height;
            const int L = cfg.axis == Axis::Width ? xshape.w : xshape.h;
            cfg.span = m > 0 ? Span::Local(m) : Span::Global();
            cfg.heads = 1;
            cfg.d_in = c;
            cfg.d_q = d_q;
            cfg.d_out = d_out;
            cfg.positional = PositionalMode::Full;
            cfg.global_len = L;
            p = random_params_1d(rng, c, d_q, d_out, cfg.table_entries());
            name = "axial_attention";
            break;
        }
    }
    const bool is_2d = kind == KernelKind::Eq1 || kind == KernelKind::Eq2 ||
                       kind == KernelKind::Eq3;
    const bool has_q = kind != KernelKind::Eq1;
    const bool has_kv = kind != KernelKind::Eq1 && kind != KernelKind::Eq2;

    std::vector<std::string> names{"x", "w_q", "w_k", "w_v"};
    std::vector<Tensor<double>> values{x, p.w_q, p.w_k, p.w_v};
    if (has_q) {
        names.push_back("r_q");
        values.push_back(p.r_q);
    }
    if (has_kv) {
        names.push_back("r_k");
        values.push_back(p.r_k);
        names.push_back("r_v");
        values.push_back(p.r_v);
    }

    auto build = [&](Tape<double>& t, const std::vector<Tensor<double>>& vals,
                     bool req) {
        Var xv = t.leaf(vals[0], req);
        AttentionVars<double> pv;
        pv.w_q = t.leaf(vals[1], req);
        pv.w_k = t.leaf(vals[2], req);
        pv.w_v = t.leaf(vals[3], req);
        std::size_t at = 4;
        if (has_q) pv.r_q = t.leaf(vals[at++], req);
        if (has_kv) {
            pv.r_k = t.leaf(vals[at++], req);
            pv.r_v = t.leaf(vals[at++], req);
        }
        Var y;
        switch (kind) {
            case KernelKind::Eq1: y = global_attention_2d(t, xv, pv); break;
            case KernelKind::Eq2: y = local_attention_2d(t, xv, pv, m); break;
            case KernelKind::Eq3: y = ps_attention_2d(t, xv, pv, m); break;
            default: y = axial_attention(t, xv, pv, cfg); break;
        }
        // Weighted sum makes the loss sensitive to every output element.
        const auto& ys = t.val(y).shape();
        Tensor<double> wts(ys);
        Rng wr = Rng::fork(seed, 991);
        for (auto& v : wts.vec()) v = wr.uniform(0.25, 1.0);
        Var loss = t.sum(t.mul(y, t.leaf(wts)));
        struct Out {
            Var loss, x;
            AttentionVars<double> p;
        };
        return Out{loss, xv, pv};
    };

    auto loss_fn = [&](const std::vector<Tensor<double>>& vals) {
        Tape<double> t;
        auto out = build(t, vals, false);
        return double(t.val(out.loss).data()[0]);
    };
    auto grad_fn = [&](const std::vector<Tensor<double>>& vals) {
        Tape<double> t;
        auto out = build(t, vals, true);
        t.backward(out.loss);
        std::vector<Tensor<double>> gs;
        gs.push_back(t.grad(out.x));
        gs.push_back(t.grad(out.p.w_q));
        gs.push_back(t.grad(out.p.w_k));
        gs.push_back(t.grad(out.p.w_v));
        if (has_q) gs.push_back(t.grad(out.p.r_q));
        if (has_kv) {
            gs.push_back(t.grad(out.p.r_k));
            gs.push_back(t.grad(out.p.r_v));
        }
        return gs;
    };
    (void)is_2d;
    return gradcheck_groups(name, names, values, loss_fn, grad_fn, 1e-5,
                            tolerance);
}

}  // namespace oracle
}  // namespace axial
