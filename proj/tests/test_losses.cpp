#include <algorithm>
#include <functional>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "occtens/losses.hpp"
#include "occtens/rng.hpp"

using namespace occtens;
using namespace occtens::losses;

namespace {

std::vector<double> random_logits(Rng& rng, int n, int k) {
    std::vector<double> l(static_cast<size_t>(n) * k);
    for (auto& v : l) v = rng.normal();
    return l;
}

std::vector<int> random_labels(Rng& rng, int n, int k) {
    std::vector<int> y(static_cast<size_t>(n));
    for (auto& v : y) v = static_cast<int>(rng.randint(0, k - 1));
    return y;
}

// smallest gap between any two per-class error values; FD steps must stay
// well inside it so the lovasz sort order is stable
double min_error_gap(const std::vector<double>& probs, const std::vector<int>& labels, int n, int k) {
    double gap = 1e9;
    for (int c = 0; c < k; ++c) {
        std::vector<double> m;
        for (int i = 0; i < n; ++i) {
            double p = probs[static_cast<size_t>(i) * k + c];
            m.push_back(labels[static_cast<size_t>(i)] == c ? 1.0 - p : p);
        }
        std::sort(m.begin(), m.end());
        for (size_t i = 1; i < m.size(); ++i) gap = std::min(gap, m[i] - m[i - 1]);
    }
    return gap;
}

void check_fd(const std::function<double(const std::vector<double>&, std::vector<double>*)>& f,
              const std::vector<double>& x0, double h, double tol) {
    std::vector<double> grad;
    f(x0, &grad);
    std::vector<double> x = x0;
    for (size_t i = 0; i < x0.size(); ++i) {
        x[i] = x0[i] + h;
        double up = f(x, nullptr);
        x[i] = x0[i] - h;
        double dn = f(x, nullptr);
        x[i] = x0[i];
        double fd = (up - dn) / (2 * h);
        double err = std::abs(grad[i] - fd) / std::max({1.0, std::abs(fd), std::abs(grad[i])});
        INFO("entry ", i, " fd=", fd, " analytic=", grad[i]);
        CHECK(err < tol);
    }
}

}  // namespace

TEST_CASE("losses: cross entropy analytic values") {
    int n = 8, k = 5;
    std::vector<int> y = {0, 1, 2, 3, 4, 0, 2, 4};
    std::vector<double> sat(static_cast<size_t>(n) * k, 0.0);
    for (int i = 0; i < n; ++i) sat[static_cast<size_t>(i) * k + y[static_cast<size_t>(i)]] = 20.0;
    CHECK(cross_entropy_rows(sat, y, n, k) < 1e-6);

    std::vector<double> uniform(static_cast<size_t>(n) * k, 0.37);
    CHECK(cross_entropy_rows(uniform, y, n, k) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("losses: cross entropy matches a scalar reference") {
    Rng rng(3);
    int n = 4, k = 3;  // a 2x2x1 grid with 3 classes
    std::vector<double> logits = random_logits(rng, n, k);
    std::vector<int> y = random_labels(rng, n, k);
    double got = cross_entropy_rows(logits, y, n, k);
    double want = 0.0;
    for (int i = 0; i < n; ++i) {
        double denom = 0.0;
        for (int j = 0; j < k; ++j) denom += std::exp(logits[static_cast<size_t>(i) * k + j]);
        want -= std::log(std::exp(logits[static_cast<size_t>(i) * k + y[static_cast<size_t>(i)]]) / denom);
    }
    want /= n;
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("losses: cross entropy gradient matches finite differences") {
    Rng rng(4);
    for (int trial = 0; trial < 25; ++trial) {
        int n = 1 + static_cast<int>(rng.randint(0, 15));
        int k = 2 + static_cast<int>(rng.randint(0, 3));
        std::vector<int> y = random_labels(rng, n, k);
        check_fd([&](const std::vector<double>& l, std::vector<double>* g) { return cross_entropy_rows(l, y, n, k, g); },
                 random_logits(rng, n, k), 1e-6, 1e-5);
    }
}

TEST_CASE("losses: lovasz softmax analytic values") {
    // perfect one-hot predictions
    int n = 6, k = 3;
    std::vector<int> y = {0, 1, 2, 1, 0, 2};
    std::vector<double> probs(static_cast<size_t>(n) * k, 0.0);
    for (int i = 0; i < n; ++i) probs[static_cast<size_t>(i) * k + y[static_cast<size_t>(i)]] = 1.0;
    CHECK(lovasz_softmax(probs, y, n, k) == doctest::Approx(0.0));

    // single pixel, p(true)=0.6 -> loss 0.4
    std::vector<double> one = {0.6, 0.4};
    std::vector<int> y1 = {0};
    CHECK(lovasz_softmax(one, y1, 1, 2) == doctest::Approx(0.4).epsilon(1e-12));

    std::vector<double> bad = {0.6, 0.6};
    CHECK_THROWS_AS(lovasz_softmax(bad, y1, 1, 2), DataError);
}

TEST_CASE("losses: lovasz matches a prefix-jaccard enumeration oracle") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 3, k = 2;
        std::vector<double> logits = random_logits(rng, n, k);
        std::vector<double> probs = softmax_rows(logits, n, k);
        std::vector<int> y = random_labels(rng, n, k);

        double want = 0.0;
        int present = 0;
        for (int c = 0; c < k; ++c) {
            std::set<int> gt;
            for (int i = 0; i < n; ++i)
                if (y[static_cast<size_t>(i)] == c) gt.insert(i);
            if (gt.empty()) continue;
            ++present;
            std::vector<int> order(static_cast<size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                double ma = y[static_cast<size_t>(a)] == c ? 1.0 - probs[static_cast<size_t>(a) * k + c]
                                                           : probs[static_cast<size_t>(a) * k + c];
                double mb = y[static_cast<size_t>(b)] == c ? 1.0 - probs[static_cast<size_t>(b) * k + c]
                                                           : probs[static_cast<size_t>(b) * k + c];
                return ma > mb;
            });
            // jaccard error of the prefix treated as the mispredicted set
            auto jac_err = [&](int q) {
                std::set<int> mis(order.begin(), order.begin() + q);
                std::set<int> inter, uni = gt;
                for (int i : gt)
                    if (!mis.count(i)) inter.insert(i);
                for (int i : mis) uni.insert(i);
                return 1.0 - static_cast<double>(inter.size()) / static_cast<double>(uni.size());
            };
            for (int q = 1; q <= n; ++q) {
                int pix = order[static_cast<size_t>(q - 1)];
                double m = y[static_cast<size_t>(pix)] == c ? 1.0 - probs[static_cast<size_t>(pix) * k + c]
                                                            : probs[static_cast<size_t>(pix) * k + c];
                want += m * (jac_err(q) - jac_err(q - 1));
            }
        }
        want /= present;
        CHECK(lovasz_softmax(probs, y, n, k) == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("losses: lovasz gradient matches finite differences") {
    Rng rng(7);
    int done = 0;
    while (done < 25) {
        int n = 2 + static_cast<int>(rng.randint(0, 10));
        int k = 2 + static_cast<int>(rng.randint(0, 3));
        std::vector<double> probs = softmax_rows(random_logits(rng, n, k), n, k);
        std::vector<int> y = random_labels(rng, n, k);
        if (min_error_gap(probs, y, n, k) < 1e-4) continue;  // keep FD away from sort boundaries
        check_fd([&](const std::vector<double>& p, std::vector<double>* g) { return lovasz_softmax(p, y, n, k, g); },
                 probs, 1e-7, 1e-5);
        ++done;
    }
}

TEST_CASE("losses: lovasz is linear between reorderings") {
    Rng rng(8);
    int n = 6, k = 3;
    std::vector<double> probs = softmax_rows(random_logits(rng, n, k), n, k);
    std::vector<int> y = random_labels(rng, n, k);
    std::vector<double> grad;
    double base = lovasz_softmax(probs, y, n, k, &grad);
    double gap = min_error_gap(probs, y, n, k);
    REQUIRE(gap > 1e-5);
    double a = gap / 4;
    std::vector<double> dir(probs.size());
    for (auto& d : dir) d = rng.uniform(-1.0, 1.0);
    std::vector<double> moved = probs;
    // keep rows summing to one so validation passes
    for (int i = 0; i < n; ++i) {
        double mean = 0.0;
        for (int j = 0; j < k; ++j) mean += dir[static_cast<size_t>(i) * k + j];
        mean /= k;
        for (int j = 0; j < k; ++j) dir[static_cast<size_t>(i) * k + j] -= mean;
    }
    double norm = 0.0;
    for (double d : dir) norm = std::max(norm, std::abs(d));
    for (size_t i = 0; i < moved.size(); ++i) moved[i] += a / norm * dir[i] * 0.5;
    double predicted = base;
    for (size_t i = 0; i < dir.size(); ++i) predicted += a / norm * dir[i] * 0.5 * grad[i];
    CHECK(lovasz_softmax(moved, y, n, k) == doctest::Approx(predicted).epsilon(1e-9));
}

TEST_CASE("losses: scal analytic values and skip rules") {
    int n = 5, k = 3;
    std::vector<int> y = {0, 1, 2, 1, 0};
    std::vector<double> perfect(static_cast<size_t>(n) * k, 0.0);
    for (int i = 0; i < n; ++i) perfect[static_cast<size_t>(i) * k + y[static_cast<size_t>(i)]] = 1.0;
    CHECK(scal_loss(perfect, y, n, k, false) == doctest::Approx(0.0));
    CHECK(scal_loss(perfect, y, n, k, true) == doctest::Approx(0.0));

    // all empty, perfectly predicted: occupied-class precision and recall both
    // skip, specificity is exactly 1
    std::vector<int> empty_y(4, 0);
    std::vector<double> empty_p(static_cast<size_t>(4) * k, 0.0);
    for (int i = 0; i < 4; ++i) empty_p[static_cast<size_t>(i) * k] = 1.0;
    CHECK(scal_loss(empty_p, empty_y, 4, k, true) == doctest::Approx(0.0));
}

TEST_CASE("losses: scal matches a scalar soft-count reference") {
    Rng rng(9);
    for (int trial = 0; trial < 40; ++trial) {
        int n = 4, k = 3;
        std::vector<double> probs = softmax_rows(random_logits(rng, n, k), n, k);
        std::vector<int> y = random_labels(rng, n, k);
        for (bool geometric : {false, true}) {
            double want = 0.0;
            std::vector<int> scope;
            if (geometric) {
                scope = {1};
            } else {
                for (int c = 0; c < k; ++c)
                    if (std::count(y.begin(), y.end(), c) > 0) scope.push_back(c);
            }
            for (int c : scope) {
                double pm = 0, tp = 0, tn = 0;
                int pos = 0, neg = 0;
                for (int i = 0; i < n; ++i) {
                    double p = geometric ? 1.0 - probs[static_cast<size_t>(i) * k] : probs[static_cast<size_t>(i) * k + c];
                    bool isc = geometric ? y[static_cast<size_t>(i)] != 0 : y[static_cast<size_t>(i)] == c;
                    pm += p;
                    if (isc) {
                        tp += p;
                        ++pos;
                    } else {
                        tn += 1.0 - p;
                        ++neg;
                    }
                }
                double term = 0.0;
                if (pm > 0) term -= std::log(tp / pm);
                if (pos > 0) term -= std::log(tp / pos);
                if (neg > 0) term -= std::log(tn / neg);
                want += term / scope.size();
            }
            CHECK(scal_loss(probs, y, n, k, geometric) == doctest::Approx(want).epsilon(1e-9));
        }
    }
}

TEST_CASE("losses: scal gradient matches finite differences") {
    Rng rng(10);
    for (int trial = 0; trial < 25; ++trial) {
        int n = 2 + static_cast<int>(rng.randint(0, 10));
        int k = 2 + static_cast<int>(rng.randint(0, 3));
        std::vector<double> probs = softmax_rows(random_logits(rng, n, k), n, k);
        std::vector<int> y = random_labels(rng, n, k);
        for (bool geometric : {false, true}) {
            check_fd(
                [&](const std::vector<double>& p, std::vector<double>* g) { return scal_loss(p, y, n, k, geometric, g); },
                probs, 1e-7, 1e-5);
        }
    }
}

TEST_CASE("losses: scal decreases when mass moves onto the true class") {
    Rng rng(11);
    int n = 6, k = 4;
    std::vector<double> probs = softmax_rows(random_logits(rng, n, k), n, k);
    std::vector<int> y = random_labels(rng, n, k);
    for (bool geometric : {false, true}) {
        double before = scal_loss(probs, y, n, k, geometric);
        std::vector<double> better = probs;
        for (int i = 0; i < n; ++i) {
            int truth = y[static_cast<size_t>(i)];
            int wrong = (truth + 1) % k;
            double shift = 0.5 * better[static_cast<size_t>(i) * k + wrong];
            better[static_cast<size_t>(i) * k + wrong] -= shift;
            better[static_cast<size_t>(i) * k + truth] += shift;
        }
        CHECK(scal_loss(better, y, n, k, geometric) < before);
    }
}

TEST_CASE("losses: tokenizer loss combines terms with the configured weights") {
    Rng rng(12);
    int n = 12, k = 5;
    std::vector<double> logits = random_logits(rng, n, k);
    std::vector<int> y = random_labels(rng, n, k);
    LossWeights w;
    TokenizerLossBreakdown b = tokenizer_loss(logits, y, n, k, 0.31, 0.07, w);
    CHECK(b.total == doctest::Approx(10.0 * b.ce + 1.0 * b.lovasz + 0.3 * b.geoscal + 0.5 * b.semscal + 1.0 * 0.31 +
                                     0.25 * 0.07)
                         .epsilon(1e-12));
    CHECK(10.0 + 1.0 + 0.3 + 0.5 == doctest::Approx(11.8));

    LossWeights w2 = w;
    w2.lambda_lovasz *= 2.0;
    TokenizerLossBreakdown b2 = tokenizer_loss(logits, y, n, k, 0.31, 0.07, w2);
    CHECK(b2.total - b.total == doctest::Approx(b.lovasz).epsilon(1e-9));

    // saturated logits: all reconstruction terms vanish, aux terms remain
    std::vector<double> sat(static_cast<size_t>(n) * k, 0.0);
    for (int i = 0; i < n; ++i) sat[static_cast<size_t>(i) * k + y[static_cast<size_t>(i)]] = 40.0;
    TokenizerLossBreakdown bs = tokenizer_loss(sat, y, n, k, 0.31, 0.07, w);
    CHECK(bs.total == doctest::Approx(1.0 * 0.31 + 0.25 * 0.07).epsilon(1e-6));
}

TEST_CASE("losses: world model loss") {
    LossWeights w;
    int n = 4, v = 512;
    std::vector<int> occ_t = {1, 2, 3, 4};
    std::vector<double> occ_uniform(static_cast<size_t>(n) * v, 0.0);
    std::vector<int> pose_t = {0, 1};
    std::vector<double> pose_sat(static_cast<size_t>(2) * 8, 0.0);
    pose_sat[0] = 30.0;
    pose_sat[8 + 1] = 30.0;
    WorldModelLossBreakdown b = world_model_loss(occ_uniform, occ_t, n, v, pose_sat, pose_t, 2, 8, w);
    CHECK(b.occ == doctest::Approx(std::log(512.0)).epsilon(1e-9));
    CHECK(b.pose < 1e-6);
    CHECK(b.total == doctest::Approx(b.occ + b.pose));

    std::vector<int> bad = {512, 0, 0, 0};
    CHECK_THROWS_AS(world_model_loss(occ_uniform, bad, n, v, pose_sat, pose_t, 2, 8, w), DataError);
}
