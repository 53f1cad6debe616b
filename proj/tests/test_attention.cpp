#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "axial/attention.hpp"
#include "axial/oracle.hpp"

using namespace axial;

namespace {

AttentionParams<double> randomized(Rng& rng, AttentionParams<double> p) {
    p.w_q = Tensor<double>::randn(p.w_q.shape(), rng, 0.5);
    p.w_k = Tensor<double>::randn(p.w_k.shape(), rng, 0.5);
    p.w_v = Tensor<double>::randn(p.w_v.shape(), rng, 0.5);
    if (p.r_q.numel()) p.r_q = Tensor<double>::randn(p.r_q.shape(), rng, 0.5);
    if (p.r_k.numel()) p.r_k = Tensor<double>::randn(p.r_k.shape(), rng, 0.5);
    if (p.r_v.numel()) p.r_v = Tensor<double>::randn(p.r_v.shape(), rng, 0.5);
    return p;
}

}  // namespace

TEST_CASE("project_qkv: zero, identity and oracle cases") {
    Rng rng(11);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 2, 2, 3}, rng);
    {
        Tape<double> t;
        Var w0 = t.leaf(Tensor<double>(mat_shape(2, 3)));
        Var q = project(t, t.leaf(x), w0);
        for (double v : t.val(q).vec()) CHECK(v == 0.0);
    }
    {
        Tape<double> t;
        Tensor<double> eye(mat_shape(3, 3));
        for (int i = 0; i < 3; ++i) eye.at(0, i, i, 0) = 1.0;
        Var q = project(t, t.leaf(x), t.leaf(eye));
        CHECK(t.val(q).vec() == x.vec());
    }
    {
        Tape<double> t;
        Tensor<double> w = Tensor<double>::randn(mat_shape(4, 3), rng);
        Var q = project(t, t.leaf(x), t.leaf(w));
        // per-pixel matrix-vector oracle
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                for (int o = 0; o < 4; ++o) {
                    double acc = 0;
                    for (int c = 0; c < 3; ++c)
                        acc += w.at(0, o, c, 0) * x.at(0, i, j, c);
                    CHECK(t.val(q).at(0, i, j, o) ==
                          doctest::Approx(acc).epsilon(1e-14));
                }
    }
    {
        Tape<double> t;
        Var w = t.leaf(Tensor<double>(mat_shape(2, 5)));
        CHECK_THROWS_AS(project(t, t.leaf(x), w), DimensionError);
    }
}

TEST_CASE("global_attention_2d: single pixel returns v") {
    Rng rng(1);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 1, 1, 3}, rng);
    auto p = randomized(rng, make_params_2d<double>(3, 2, 4, 1, 1));
    Tape<double> t;
    Var xv = t.leaf(x);
    Var y = global_attention_2d(t, xv, leaf_params(t, p));
    // softmax over one position is 1, so y = W_V x
    for (int c = 0; c < 4; ++c) {
        double v = 0;
        for (int i = 0; i < 3; ++i) v += p.w_v.at(0, c, i, 0) * x.at(0, 0, 0, i);
        CHECK(t.val(y).at(0, 0, 0, c) == doctest::Approx(v).epsilon(1e-14));
    }
}

TEST_CASE("global_attention_2d: zero W_Q gives uniform pooling") {
    Rng rng(2);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 3, 4, 3}, rng);
    auto p = randomized(rng, make_params_2d<double>(3, 2, 4, 1, 1));
    p.w_q.fill(0.0);
    Tape<double> t;
    Var y = global_attention_2d(t, t.leaf(x), leaf_params(t, p));
    // uniform weights -> y_o = mean_p v_p, identical at every position
    std::vector<double> mean(4, 0.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j)
            for (int c = 0; c < 4; ++c) {
                double v = 0;
                for (int d = 0; d < 3; ++d)
                    v += p.w_v.at(0, c, d, 0) * x.at(0, i, j, d);
                mean[c] += v / 12.0;
            }
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j)
            for (int c = 0; c < 4; ++c)
                CHECK(t.val(y).at(0, i, j, c) ==
                      doctest::Approx(mean[c]).epsilon(1e-12));
}

TEST_CASE("global_attention_2d matches the nested-loop oracle") {
    Rng rng(3);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 3, 3, 4}, rng);
    auto p = randomized(rng, make_params_2d<double>(4, 2, 3, 1, 1));
    Tape<double> t;
    Var y = global_attention_2d(t, t.leaf(x), leaf_params(t, p));
    CHECK(max_abs_diff(t.val(y), oracle::oracle_eq1(x, p)) <= 1e-10);
}

TEST_CASE("global_attention_2d: empty lattice is a domain error") {
    Tape<double> t;
    auto p = make_params_2d<double>(3, 2, 4, 1, 1);
    Var x = t.leaf(Tensor<double>(Shape4{1, 0, 3, 3}));
    CHECK_THROWS_AS(global_attention_2d(t, x, leaf_params(t, p)), DomainError);
}

TEST_CASE("local_attention_2d: m=1 returns v exactly") {
    Rng rng(4);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 3, 3, 3}, rng);
    auto p = randomized(rng, make_params_2d<double>(3, 2, 4, 1, 1));
    Tape<double> t;
    Var xv = t.leaf(x);
    Var y = local_attention_2d(t, xv, leaf_params(t, p), 1);
    Var v = project(t, xv, t.leaf(p.w_v));
    for (std::size_t i = 0; i < t.val(y).numel(); ++i)
        CHECK(t.val(y).data()[i] == t.val(v).data()[i]);
}

TEST_CASE("local window covering the lattice equals global attention") {
    Rng rng(5);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 3, 4, 3}, rng);
    const int m = 2 * 4 - 1;  // >= 2*max(h,w)-1
    auto p = randomized(rng, make_params_2d<double>(3, 2, 4, 2 * m - 1, 2 * m - 1));
    p.r_q.fill(0.0);
    Tape<double> t;
    Var xv = t.leaf(x);
    Var ylocal = local_attention_2d(t, xv, leaf_params(t, p), m);
    Var yglobal = global_attention_2d(t, xv, leaf_params(t, p));
    for (std::size_t i = 0; i < t.val(ylocal).numel(); ++i)
        CHECK(t.val(ylocal).data()[i] == t.val(yglobal).data()[i]);
}

TEST_CASE("local_attention_2d matches oracle including clipped corners") {
    Rng rng(6);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 5, 5, 4}, rng);
    auto p = randomized(rng, make_params_2d<double>(4, 2, 3, 5, 5));
    Tape<double> t;
    Var y = local_attention_2d(t, t.leaf(x), leaf_params(t, p), 3);
    CHECK(max_abs_diff(t.val(y), oracle::oracle_eq2(x, p, 3)) <= 1e-10);
}

TEST_CASE("even span is a config error") {
    Rng rng(7);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 4, 4, 3}, rng);
    auto p = make_params_2d<double>(3, 2, 4, 7, 7);
    Tape<double> t;
    Var xv = t.leaf(x);
    auto pv = leaf_params(t, p);
    CHECK_THROWS_AS(local_attention_2d(t, xv, pv, 4), ConfigError);
    CHECK_THROWS_AS(ps_attention_2d(t, xv, pv, 2), ConfigError);
    CHECK_THROWS_AS(Span::Local(6), ConfigError);
}

TEST_CASE("ps_attention_2d: zero tables reduce to Eq.2 with zero r_q") {
    Rng rng(8);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 4, 4, 4}, rng);
    auto p = randomized(rng, make_params_2d<double>(4, 2, 3, 5, 5));
    p.r_q.fill(0.0);
    p.r_k.fill(0.0);
    p.r_v.fill(0.0);
    Tape<double> t;
    Var xv = t.leaf(x);
    Var y3 = ps_attention_2d(t, xv, leaf_params(t, p), 3);
    Var y2 = local_attention_2d(t, xv, leaf_params(t, p), 3);
    for (std::size_t i = 0; i < t.val(y3).numel(); ++i)
        CHECK(t.val(y3).data()[i] == t.val(y2).data()[i]);
}

TEST_CASE("ps_attention_2d: m=1 returns v + r_v at offset zero") {
    Rng rng(9);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 3, 3, 3}, rng);
    auto p = randomized(rng, make_params_2d<double>(3, 2, 4, 1, 1));
    Tape<double> t;
    Var xv = t.leaf(x);
    Var y = ps_attention_2d(t, xv, leaf_params(t, p), 1);
    Var v = project(t, xv, t.leaf(p.w_v));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int c = 0; c < 4; ++c)
                CHECK(t.val(y).at(0, i, j, c) ==
                      doctest::Approx(t.val(v).at(0, i, j, c) +
                                      p.r_v.at(0, 0, 0, c))
                          .epsilon(1e-14));
}

TEST_CASE("ps_attention_2d matches oracle (seed 3)") {
    Rng rng(3);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 4, 4, 4}, rng);
    auto p = randomized(rng, make_params_2d<double>(4, 2, 3, 5, 5));
    Tape<double> t;
    Var y = ps_attention_2d(t, t.leaf(x), leaf_params(t, p), 3);
    CHECK(max_abs_diff(t.val(y), oracle::oracle_eq3(x, p, 3)) <= 1e-10);
}

TEST_CASE("axial_attention: single-position axis returns v + r_v0") {
    Rng rng(10);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 4, 1, 3}, rng);
    auto p = randomized(rng, make_params_1d<double>(3, 2, 4, 1));
    AxialAttentionConfig cfg;
    cfg.axis = Axis::Width;
    cfg.span = Span::Global();
    cfg.d_in = 3;
    cfg.d_q = 2;
    cfg.d_out = 4;
    cfg.global_len = 1;
    Tape<double> t;
    Var xv = t.leaf(x);
    Var y = axial_attention(t, xv, leaf_params(t, p), cfg);
    Var v = project(t, xv, t.leaf(p.w_v));
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 4; ++c)
            CHECK(t.val(y).at(0, i, 0, c) ==
                  doctest::Approx(t.val(v).at(0, i, 0, c) + p.r_v.at(0, 0, 0, c))
                      .epsilon(1e-14));
}

TEST_CASE("width-axis equals transpose-height-transpose") {
    Rng rng(12);
    Tensor<double> x = Tensor<double>::randn(Shape4{2, 3, 5, 3}, rng);
    auto p = randomized(rng, make_params_1d<double>(3, 2, 4, 9));
    AxialAttentionConfig cfg;
    cfg.span = Span::Local(5);
    cfg.d_in = 3;
    cfg.d_q = 2;
    cfg.d_out = 4;

    Tape<double> t;
    Var xv = t.leaf(x);
    auto pv = leaf_params(t, p);
    cfg.axis = Axis::Width;
    Var yw = axial_attention(t, xv, pv, cfg);
    cfg.axis = Axis::Height;
    Var yh = axial_attention(t, t.transpose_hw(xv), pv, cfg);
    Var yht = t.transpose_hw(yh);
    for (std::size_t i = 0; i < t.val(yw).numel(); ++i)
        CHECK(t.val(yw).data()[i] == t.val(yht).data()[i]);
}

TEST_CASE("axial_attention global on a 7-row matches the 1D oracle") {
    Rng rng(13);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 1, 7, 4}, rng);
    auto p = randomized(rng, make_params_1d<double>(4, 2, 3, 13));
    AxialAttentionConfig cfg;
    cfg.axis = Axis::Width;
    cfg.span = Span::Global();
    cfg.d_in = 4;
    cfg.d_q = 2;
    cfg.d_out = 3;
    cfg.global_len = 7;
    Tape<double> t;
    Var y = axial_attention(t, t.leaf(x), leaf_params(t, p), cfg);
    CHECK(max_abs_diff(t.val(y),
                       oracle::oracle_eq4(x, p, Axis::Width, Span::Global())) <=
          1e-10);
}

TEST_CASE("oracle_eq4 global on a row equals oracle_eq3 restricted to it") {
    Rng rng(14);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 1, 5, 3}, rng);
    const int L = 5;
    auto p1 = randomized(rng, make_params_1d<double>(3, 2, 3, 2 * L - 1));
    // Build the 2D-table twin: offsets only along the width axis. A window
    // of span m = 2L-1 covers the whole row.
    const int m = 2 * L - 1;
    auto p2 = make_params_2d<double>(3, 2, 3, 2 * m - 1, 2 * m - 1);
    p2.w_q = p1.w_q;
    p2.w_k = p1.w_k;
    p2.w_v = p1.w_v;
    for (int dx = -(L - 1); dx <= L - 1; ++dx)
        for (int c = 0; c < 2; ++c) {
            p2.r_q.at(0, m - 1, dx + m - 1, c) = p1.r_q.at(0, 0, dx + L - 1, c);
            p2.r_k.at(0, m - 1, dx + m - 1, c) = p1.r_k.at(0, 0, dx + L - 1, c);
        }
    for (int dx = -(L - 1); dx <= L - 1; ++dx)
        for (int c = 0; c < 3; ++c)
            p2.r_v.at(0, m - 1, dx + m - 1, c) = p1.r_v.at(0, 0, dx + L - 1, c);
    auto y4 = oracle::oracle_eq4(x, p1, Axis::Width, Span::Global());
    auto y3 = oracle::oracle_eq3(x, p2, m);
    CHECK(max_abs_diff(y4, y3) <= 1e-12);
}

TEST_CASE("global span rejects longer axes than construction") {
    Rng rng(15);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 2, 9, 3}, rng);
    auto p = randomized(rng, make_params_1d<double>(3, 2, 3, 2 * 7 - 1));
    AxialAttentionConfig cfg;
    cfg.axis = Axis::Width;
    cfg.span = Span::Global();
    cfg.d_in = 3;
    cfg.d_q = 2;
    cfg.d_out = 3;
    cfg.global_len = 7;  // built for axes up to 7
    Tape<double> t;
    Var xv = t.leaf(x);
    auto pv = leaf_params(t, p);
    CHECK_THROWS_AS(axial_attention(t, xv, pv, cfg), SpanOverflowError);
    // Local span has no such limit: the window is clipped instead.
    cfg.span = Span::Local(5);
    auto p2 = randomized(rng, make_params_1d<double>(3, 2, 3, 9));
    auto pv2 = leaf_params(t, p2);
    CHECK_NOTHROW(axial_attention(t, xv, pv2, cfg));
}

TEST_CASE("multi_head: N=1 identical, slices match, manual concat") {
    Rng rng(16);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 3, 6, 4}, rng);
    AxialAttentionConfig cfg;
    cfg.axis = Axis::Width;
    cfg.span = Span::Global();
    cfg.d_in = 4;
    cfg.d_q = 2;
    cfg.d_out = 3;
    cfg.global_len = 6;

    auto shared = randomized(rng, make_params_1d<double>(4, 2, 3, 11));
    Rng r1 = Rng::fork(1, 0), r2 = Rng::fork(2, 0);
    auto h0 = randomized(r1, make_params_1d<double>(4, 2, 3, 11));
    auto h1 = randomized(r2, make_params_1d<double>(4, 2, 3, 11));
    // one positional table per layer, shared across heads
    h0.r_q = shared.r_q; h0.r_k = shared.r_k; h0.r_v = shared.r_v;
    h1.r_q = shared.r_q; h1.r_k = shared.r_k; h1.r_v = shared.r_v;

    Tape<double> t;
    Var xv = t.leaf(x);
    {
        Var y1 = multi_head(t, xv, {h0}, cfg);
        Var ys = axial_attention(t, xv, leaf_params(t, h0), cfg);
        for (std::size_t i = 0; i < t.val(y1).numel(); ++i)
            CHECK(t.val(y1).data()[i] == t.val(ys).data()[i]);
    }
    {
        Var y = multi_head(t, xv, {h0, h1}, cfg);
        CHECK(t.val(y).shape().c == 2 * cfg.d_out);
        Var y0 = axial_attention(t, xv, leaf_params(t, h0), cfg);
        Var y1 = axial_attention(t, xv, leaf_params(t, h1), cfg);
        auto s0 = slice_channels(t.val(y), 0, 3);
        auto s1 = slice_channels(t.val(y), 3, 6);
        CHECK(max_abs_diff(s0, t.val(y0)) == 0.0);
        CHECK(max_abs_diff(s1, t.val(y1)) == 0.0);
    }
    {
        auto bad = h1;
        bad.w_v = Tensor<double>(mat_shape(5, 4));  // different d_out
        CHECK_THROWS_AS(multi_head(t, xv, {h0, bad}, cfg), ConfigError);
    }
}

TEST_CASE("attention weights are normalized over each window") {
    Rng rng(17);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 4, 6, 3}, rng);
    auto p = randomized(rng, make_params_1d<double>(3, 2, 3, 5));
    AxialAttentionConfig cfg;
    cfg.axis = Axis::Width;
    cfg.span = Span::Local(3);
    cfg.d_in = 3;
    cfg.d_q = 2;
    cfg.d_out = 3;
    Tape<double> t;
    AttentionCapture cap;
    axial_attention(t, t.leaf(x), leaf_params(t, p), cfg, &cap);
    REQUIRE(cap.L == 6);
    REQUIRE(cap.lines == 4);
    for (int line = 0; line < cap.lines; ++line)
        for (int h = 0; h < cap.heads; ++h)
            for (int i = 0; i < cap.L; ++i) {
                double sum = 0;
                for (int j = 0; j < cap.L; ++j) sum += cap.at(line, h, i, j);
                CHECK(std::abs(sum - 1.0) <= 1e-12);
            }
}

TEST_CASE("reduction chain: Eq.3 == Eq.2 == windowed Eq.1 logits exactly") {
    Rng rng(18);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 4, 4, 3}, rng);
    const int m = 7;  // window covers the lattice
    auto p = randomized(rng, make_params_2d<double>(3, 2, 3, 2 * m - 1, 2 * m - 1));
    p.r_q.fill(0.0);
    p.r_k.fill(0.0);
    p.r_v.fill(0.0);
    Tape<double> t;
    Var xv = t.leaf(x);
    auto pv = leaf_params(t, p);
    Var y3 = ps_attention_2d(t, xv, pv, m);
    Var y2 = local_attention_2d(t, xv, pv, m);
    Var y1 = global_attention_2d(t, xv, pv);
    for (std::size_t i = 0; i < t.val(y3).numel(); ++i) {
        CHECK(t.val(y3).data()[i] == t.val(y2).data()[i]);
        CHECK(t.val(y2).data()[i] == t.val(y1).data()[i]);
    }
}

TEST_CASE("permutation equivariance across the non-attended axis") {
    Rng rng(19);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 5, 6, 3}, rng);
    auto p = randomized(rng, make_params_1d<double>(3, 2, 3, 11));
    AxialAttentionConfig cfg;
    cfg.axis = Axis::Width;
    cfg.span = Span::Global();
    cfg.d_in = 3;
    cfg.d_q = 2;
    cfg.d_out = 3;
    cfg.global_len = 6;
    const int perm[5] = {3, 0, 4, 1, 2};
    Tensor<double> xp(x.shape());
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j)
            for (int c = 0; c < 3; ++c)
                xp.at(0, i, j, c) = x.at(0, perm[i], j, c);
    Tape<double> t;
    auto pv = leaf_params(t, p);
    Var y = axial_attention(t, t.leaf(x), pv, cfg);
    Var yp = axial_attention(t, t.leaf(xp), pv, cfg);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j)
            for (int c = 0; c < 3; ++c)
                CHECK(t.val(yp).at(0, i, j, c) ==
                      t.val(y).at(0, perm[i], j, c));
}

TEST_CASE("within-axis permutation equivariance with zero tables") {
    Rng rng(20);
    Tensor<double> x = Tensor<double>::randn(Shape4{1, 3, 5, 3}, rng);
    auto p = randomized(rng, make_params_1d<double>(3, 2, 3, 9));
    p.r_q.fill(0.0);
    p.r_k.fill(0.0);
    p.r_v.fill(0.0);
    AxialAttentionConfig cfg;
    cfg.axis = Axis::Width;
    cfg.span = Span::Global();
    cfg.d_in = 3;
    cfg.d_q = 2;
    cfg.d_out = 3;
    cfg.global_len = 5;
    const int perm[5] = {4, 2, 0, 3, 1};
    Tensor<double> xp(x.shape());
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j)
            for (int c = 0; c < 3; ++c)
                xp.at(0, i, j, c) = x.at(0, i, perm[j], c);
    Tape<double> t;
    auto pv = leaf_params(t, p);
    Var y = axial_attention(t, t.leaf(x), pv, cfg);
    Var yp = axial_attention(t, t.leaf(xp), pv, cfg);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j)
            for (int c = 0; c < 3; ++c)
                CHECK(t.val(yp).at(0, i, j, c) ==
                      doctest::Approx(t.val(y).at(0, i, perm[j], c))
                          .epsilon(1e-12));
}
