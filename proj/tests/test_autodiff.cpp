#include <cmath>
#include <functional>

#include "doctest.h"
#include "occtens/autodiff.hpp"
#include "occtens/rng.hpp"

using namespace occtens;
using namespace occtens::ad;

namespace {

Tensor randn(Rng& rng, std::vector<int> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(scale * rng.normal());
    return t;
}

// Central-difference check of d(loss)/d(param) for every parameter entry.
// The tape runs in float32, so tolerances are loose but still catch any
// wrong-formula bug (those show up as O(1) relative errors).
void check_grads(ParamStore& ps, const std::function<NodeRef(ParamStore&)> & build, float h = 1e-2f,
                 float tol = 2e-2f) {
    GradStore gs;
    gs.init_like(ps);
    gs.zero();
    {
        NodeRef root = build(ps);
        REQUIRE(root->val().numel() == 1);
        backward(root, &gs);
    }
    for (size_t p = 0; p < ps.values.size(); ++p) {
        for (size_t i = 0; i < ps.values[p].data.size(); ++i) {
            float saved = ps.values[p].data[i];
            ps.values[p].data[i] = saved + h;
            double up = build(ps)->val().data[0];
            ps.values[p].data[i] = saved - h;
            double dn = build(ps)->val().data[0];
            ps.values[p].data[i] = saved;
            double fd = (up - dn) / (2.0 * h);
            double got = gs.g[p].data[i];
            double err = std::abs(got - fd) / std::max({1.0, std::abs(fd), std::abs(got)});
            INFO("param ", ps.names[p], " entry ", i, " fd=", fd, " analytic=", got);
            CHECK(err < tol);
        }
    }
}

// Reduce an arbitrary tensor node to a scalar with fixed random weights so
// every output entry contributes a distinct gradient.
NodeRef weigh(const NodeRef& x, uint64_t salt) {
    Rng r(9000 + salt);
    Tensor w(x->val().shape);
    for (auto& v : w.data) v = static_cast<float>(r.normal());
    return mean_all(mul(x, constant(std::move(w))));
}

}  // namespace

TEST_CASE("autodiff: elementwise ops") {
    Rng rng(1);
    ParamStore ps;
    int a = ps.add("a", randn(rng, {3, 4}));
    int b = ps.add("b", randn(rng, {3, 4}));
    check_grads(ps, [&](ParamStore& s) {
        auto na = param(s, a), nb = param(s, b);
        auto y = add(mul(na, nb), sub(na, scale(nb, 0.7f)));
        return weigh(y, 1);
    });
}

TEST_CASE("autodiff: add_bias and gelu") {
    Rng rng(2);
    ParamStore ps;
    int x = ps.add("x", randn(rng, {4, 5}));
    int b = ps.add("b", randn(rng, {5}));
    check_grads(ps, [&](ParamStore& s) { return weigh(gelu(add_bias(param(s, x), param(s, b))), 2); });
}

TEST_CASE("autodiff: matmul all transpose combinations") {
    Rng rng(3);
    for (int ta = 0; ta < 2; ++ta) {
        for (int tb = 0; tb < 2; ++tb) {
            ParamStore ps;
            std::vector<int> sa = ta ? std::vector<int>{5, 3} : std::vector<int>{3, 5};
            std::vector<int> sb = tb ? std::vector<int>{4, 5} : std::vector<int>{5, 4};
            int a = ps.add("a", randn(rng, sa, 0.5));
            int b = ps.add("b", randn(rng, sb, 0.5));
            check_grads(ps, [&](ParamStore& s) {
                return weigh(matmul(param(s, a), param(s, b), ta != 0, tb != 0), 3);
            });
        }
    }
}

TEST_CASE("autodiff: linear") {
    Rng rng(4);
    ParamStore ps;
    int x = ps.add("x", randn(rng, {3, 6}, 0.5));
    int w = ps.add("w", randn(rng, {4, 6}, 0.5));
    int b = ps.add("b", randn(rng, {4}, 0.5));
    check_grads(ps, [&](ParamStore& s) { return weigh(linear(param(s, x), param(s, w), param(s, b)), 4); });
}

TEST_CASE("autodiff: layer_norm") {
    Rng rng(5);
    ParamStore ps;
    int x = ps.add("x", randn(rng, {3, 8}));
    int g = ps.add("g", randn(rng, {8}, 0.3));
    int b = ps.add("b", randn(rng, {8}, 0.3));
    for (auto& v : ps.values[static_cast<size_t>(g)].data) v += 1.0f;
    check_grads(ps, [&](ParamStore& s) { return weigh(layer_norm(param(s, x), param(s, g), param(s, b)), 5); },
                1e-2f, 3e-2f);
}

TEST_CASE("autodiff: softmax_masked") {
    Rng rng(6);
    ParamStore ps;
    int x = ps.add("x", randn(rng, {4, 6}));
    auto mask = std::make_shared<std::vector<uint8_t>>(24, uint8_t{0});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j <= i + 2; ++j) (*mask)[static_cast<size_t>(i) * 6 + j] = 1;
    check_grads(ps, [&](ParamStore& s) { return weigh(softmax_masked(param(s, x), mask), 6); });

    // masked-out entries get exactly zero probability and pass no gradient
    GradStore gs;
    gs.init_like(ps);
    gs.zero();
    auto sm = softmax_masked(param(ps, x), mask);
    for (int i = 0; i < 4; ++i) {
        double row = 0.0;
        for (int j = 0; j < 6; ++j) {
            if (!(*mask)[static_cast<size_t>(i) * 6 + j]) CHECK(sm->val().at(i, j) == 0.0f);
            row += sm->val().at(i, j);
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
    }
    backward(weigh(sm, 6), &gs);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j)
            if (!(*mask)[static_cast<size_t>(i) * 6 + j]) CHECK(gs.g[0].at(i, j) == 0.0f);
}

TEST_CASE("autodiff: embedding gathers and scatter-adds") {
    Rng rng(7);
    ParamStore ps;
    int t = ps.add("table", randn(rng, {5, 3}));
    std::vector<int> idx = {2, 0, 2, 4};
    check_grads(ps, [&](ParamStore& s) { return weigh(embedding(param(s, t), idx), 7); });
}

TEST_CASE("autodiff: slices and concats") {
    Rng rng(8);
    ParamStore ps;
    int a = ps.add("a", randn(rng, {4, 6}));
    int b = ps.add("b", randn(rng, {4, 2}));
    check_grads(ps, [&](ParamStore& s) {
        auto na = param(s, a);
        auto left = slice_cols(na, 0, 3);
        auto right = slice_cols(na, 3, 6);
        auto cat = concat_cols({right, left, param(s, b)});
        auto top = slice_rows(cat, 0, 2);
        auto bot = slice_rows(cat, 2, 4);
        return weigh(concat_rows({bot, top}), 8);
    });
}

TEST_CASE("autodiff: gather_rows with negative index gives zero row") {
    Rng rng(9);
    ParamStore ps;
    int a = ps.add("a", randn(rng, {5, 3}));
    std::vector<int> src = {3, -1, 0, 3};
    auto g = gather_rows(param(ps, a), src);
    for (int j = 0; j < 3; ++j) CHECK(g->val().at(1, j) == 0.0f);
    check_grads(ps, [&](ParamStore& s) { return weigh(gather_rows(param(s, a), src), 9); });
}

TEST_CASE("autodiff: reshape") {
    Rng rng(10);
    ParamStore ps;
    int a = ps.add("a", randn(rng, {2, 6}));
    check_grads(ps, [&](ParamStore& s) { return weigh(reshape(param(s, a), {3, 4}), 10); });
}

TEST_CASE("autodiff: straight_through forwards target, passes gradient") {
    Rng rng(10);
    ParamStore ps;
    int a = ps.add("a", randn(rng, {2, 6}));
    Tensor tgt({2, 6});
    for (size_t i = 0; i < tgt.data.size(); ++i) tgt.data[i] = static_cast<float>(i) * 0.1f;

    auto st = straight_through(param(ps, a), tgt);
    for (size_t i = 0; i < tgt.data.size(); ++i) CHECK(st->val().data[i] == tgt.data[i]);

    // gradient w.r.t. a of weigh(st) must equal gradient of weigh(a) itself
    GradStore g1, g2;
    g1.init_like(ps);
    g1.zero();
    g2.init_like(ps);
    g2.zero();
    backward(weigh(straight_through(param(ps, a), tgt), 10), &g1);
    backward(weigh(param(ps, a), 10), &g2);
    for (size_t i = 0; i < g1.g[0].data.size(); ++i) CHECK(g1.g[0].data[i] == g2.g[0].data[i]);
}

TEST_CASE("autodiff: detach blocks gradient") {
    Rng rng(11);
    ParamStore ps;
    int a = ps.add("a", randn(rng, {2, 3}));
    GradStore gs;
    gs.init_like(ps);
    gs.zero();
    auto na = param(ps, a);
    auto y = weigh(mul(detach(na), detach(na)), 11);
    CHECK_FALSE(y->needs_grad);
    auto z = add(mul(na, constant(Tensor({2, 3}, 2.0f))), mul(detach(na), detach(na)));
    backward(weigh(z, 12), &gs);
    // only the non-detached branch contributes: d/da of 2a * w = 2w
    Rng r(9000 + 12);
    Tensor w({2, 3});
    for (auto& v : w.data) v = static_cast<float>(r.normal());
    for (size_t i = 0; i < gs.g[0].data.size(); ++i)
        CHECK(gs.g[0].data[i] == doctest::Approx(2.0f * w.data[i] / 6.0f).epsilon(1e-4));
}

TEST_CASE("autodiff: conv2d stride and padding") {
    Rng rng(12);
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
        ParamStore ps;
        int x = ps.add("x", randn(rng, {5, 4, 2}, 0.5));
        int w = ps.add("w", randn(rng, {3, 3, 2, 3}, 0.5));
        int b = ps.add("b", randn(rng, {3}, 0.5));
        check_grads(ps, [&, stride = stride, pad = pad](ParamStore& s) {
            return weigh(conv2d(param(s, x), param(s, w), param(s, b), stride, pad), 13);
        });
    }
}

TEST_CASE("autodiff: conv2d matches direct convolution") {
    Rng rng(13);
    ParamStore ps;
    int xi = ps.add("x", randn(rng, {4, 4, 2}));
    int wi = ps.add("w", randn(rng, {3, 3, 2, 2}));
    int bi = ps.add("b", randn(rng, {2}));
    auto out = conv2d(param(ps, xi), param(ps, wi), param(ps, bi), 1, 1);
    const Tensor& x = ps.values[static_cast<size_t>(xi)];
    const Tensor& w = ps.values[static_cast<size_t>(wi)];
    const Tensor& b = ps.values[static_cast<size_t>(bi)];
    for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 4; ++ox)
            for (int co = 0; co < 2; ++co) {
                double acc = b.data[static_cast<size_t>(co)];
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                        for (int ci = 0; ci < 2; ++ci) {
                            int iy = oy - 1 + ky, ix = ox - 1 + kx;
                            if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
                            acc += static_cast<double>(x.data[(static_cast<size_t>(iy) * 4 + ix) * 2 + ci]) *
                                   w.data[((static_cast<size_t>(ky) * 3 + kx) * 2 + ci) * 2 + co];
                        }
                CHECK(out->val().data[(static_cast<size_t>(oy) * 4 + ox) * 2 + co] ==
                      doctest::Approx(acc).epsilon(1e-4));
            }
}

TEST_CASE("autodiff: upsample_nearest2") {
    Rng rng(14);
    ParamStore ps;
    int x = ps.add("x", randn(rng, {3, 2, 2}));
    auto up = upsample_nearest2(param(ps, x));
    CHECK(up->val().shape == std::vector<int>{6, 4, 2});
    CHECK(up->val().data[0] == ps.values[0].data[0]);
    check_grads(ps, [&](ParamStore& s) { return weigh(upsample_nearest2(param(s, x)), 14); });
}

TEST_CASE("autodiff: reductions") {
    Rng rng(15);
    ParamStore ps;
    int a = ps.add("a", randn(rng, {3, 4}));
    int b = ps.add("b", randn(rng, {3, 4}));
    check_grads(ps, [&](ParamStore& s) { return mean_all(param(s, a)); });
    check_grads(ps, [&](ParamStore& s) { return sq_diff_mean(param(s, a), param(s, b)); });
    check_grads(ps, [&](ParamStore& s) {
        std::vector<NodeRef> terms = {mean_all(param(s, a)), sq_diff_mean(param(s, a), param(s, b))};
        return weighted_sum(terms, {10.0f, 0.25f});
    });
}

TEST_CASE("autodiff: token_cross_entropy") {
    Rng rng(16);
    ParamStore ps;
    int l = ps.add("logits", randn(rng, {5, 7}));
    std::vector<int> tgt = {0, 3, 6, 2, 2};
    check_grads(ps, [&](ParamStore& s) { return token_cross_entropy(param(s, l), tgt); });
    // uniform logits give loss = log(V)
    ParamStore u;
    int ul = u.add("l", Tensor({2, 8}, 0.42f));
    auto ce = token_cross_entropy(param(u, ul), {1, 5});
    CHECK(ce->val().data[0] == doctest::Approx(std::log(8.0)).epsilon(1e-5));
}

TEST_CASE("autodiff: custom_scalar injects external gradient") {
    Rng rng(17);
    ParamStore ps;
    int a = ps.add("a", randn(rng, {2, 3}));
    // f(x) = sum(x^3) with hand-computed value and gradient
    check_grads(ps, [&](ParamStore& s) {
        auto x = param(s, a);
        double val = 0.0;
        Tensor g({2, 3});
        for (size_t i = 0; i < x->val().data.size(); ++i) {
            double v = x->val().data[i];
            val += v * v * v;
            g.data[i] = static_cast<float>(3.0 * v * v);
        }
        return custom_scalar(x, val, std::move(g));
    });
}

TEST_CASE("autodiff: diamond reuse accumulates both paths") {
    ParamStore ps;
    int a = ps.add("a", Tensor({1, 1}, 3.0f));
    GradStore gs;
    gs.init_like(ps);
    gs.zero();
    auto x = param(ps, a);
    auto y = mul(x, x);           // x^2
    auto z = add(y, scale(x, 5)); // x^2 + 5x
    backward(mean_all(z), &gs);
    CHECK(gs.g[0].data[0] == doctest::Approx(2.0f * 3.0f + 5.0f));
}

TEST_CASE("autodiff: grads accumulate across backward calls") {
    ParamStore ps;
    int a = ps.add("a", Tensor({1, 1}, 2.0f));
    GradStore gs;
    gs.init_like(ps);
    gs.zero();
    for (int rep = 0; rep < 3; ++rep) backward(mean_all(scale(param(ps, a), 4.0f)), &gs);
    CHECK(gs.g[0].data[0] == doctest::Approx(12.0f));
    gs.zero();
    CHECK(gs.g[0].data[0] == 0.0f);
}

TEST_CASE("autodiff: constant_view reads caller storage without copy") {
    Tensor ext({2, 2}, 1.5f);
    auto v = constant_view(&ext);
    CHECK(v->val().data.data() == ext.data.data());
    ext.data[3] = -2.0f;
    CHECK(v->val().data[3] == -2.0f);
}
