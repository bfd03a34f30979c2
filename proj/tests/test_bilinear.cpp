#include <cmath>
#include <vector>

#include "doctest.h"
#include "occtens/bilinear.hpp"
#include "occtens/common.hpp"
#include "occtens/rng.hpp"

using namespace occtens;

namespace {

// dense matrix view of a sparse map, rows = out cells, cols = in cells
std::vector<double> densify(const ResizeMap& m) {
    int rows = m.out_h * m.out_w, cols = m.in_h * m.in_w;
    std::vector<double> d(static_cast<size_t>(rows) * cols, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int t = m.row_offset[r]; t < m.row_offset[r + 1]; ++t)
            d[static_cast<size_t>(r) * cols + m.taps[t].src] += m.taps[t].w;
    return d;
}

}  // namespace

TEST_CASE("same-size bilinear map is the identity") {
    for (int s : {1, 3, 8}) {
        ResizeMap m = bilinear_resize_map(s, s, s, s);
        REQUIRE(m.row_offset.back() == s * s);
        for (int r = 0; r < s * s; ++r) {
            CHECK(m.row_offset[r + 1] - m.row_offset[r] == 1);
            CHECK(m.taps[m.row_offset[r]].src == r);
            CHECK(m.taps[m.row_offset[r]].w == 1.0f);
        }
    }
}

TEST_CASE("bilinear rows sum to one") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        int in_h = static_cast<int>(rng.randint(1, 9));
        int in_w = static_cast<int>(rng.randint(1, 9));
        int out_h = static_cast<int>(rng.randint(1, 17));
        int out_w = static_cast<int>(rng.randint(1, 17));
        ResizeMap m = bilinear_resize_map(in_h, in_w, out_h, out_w);
        for (int r = 0; r < out_h * out_w; ++r) {
            double s = 0.0;
            for (int t = m.row_offset[r]; t < m.row_offset[r + 1]; ++t) s += m.taps[t].w;
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("both directions preserve constant fields") {
    ResizeMap up = bilinear_resize_map(3, 3, 8, 8);
    ResizeMap down = adjoint_average_map(up);
    std::vector<float> coarse(9 * 2, 3.7f), fine(64 * 2, 0.0f);
    apply_resize(up, coarse.data(), fine.data(), 2);
    for (float v : fine) CHECK(v == doctest::Approx(3.7f).epsilon(1e-6));
    std::vector<float> back(9 * 2, 0.0f);
    apply_resize(down, fine.data(), back.data(), 2);
    for (float v : back) CHECK(v == doctest::Approx(3.7f).epsilon(1e-6));
}

TEST_CASE("averaging map is the column-normalized transpose of the upsample") {
    Rng rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        int s = static_cast<int>(rng.randint(1, 6));
        int h = static_cast<int>(rng.randint(s, 12));
        ResizeMap up = bilinear_resize_map(s, s, h, h);
        ResizeMap down = adjoint_average_map(up);
        std::vector<double> u_dense = densify(up), d_dense = densify(down);
        int fine = h * h, coarse = s * s;
        std::vector<double> colsum(static_cast<size_t>(coarse), 0.0);
        for (int i = 0; i < fine; ++i)
            for (int c = 0; c < coarse; ++c) colsum[static_cast<size_t>(c)] += u_dense[static_cast<size_t>(i) * coarse + c];
        // <U a, b> == sum_c colsum_c * a_c * (D b)_c
        std::vector<double> a(static_cast<size_t>(coarse)), b(static_cast<size_t>(fine));
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        double lhs = 0.0;
        for (int i = 0; i < fine; ++i) {
            double ua = 0.0;
            for (int c = 0; c < coarse; ++c) ua += u_dense[static_cast<size_t>(i) * coarse + c] * a[static_cast<size_t>(c)];
            lhs += ua * b[static_cast<size_t>(i)];
        }
        double rhs = 0.0;
        for (int c = 0; c < coarse; ++c) {
            double db = 0.0;
            for (int i = 0; i < fine; ++i) db += d_dense[static_cast<size_t>(c) * fine + i] * b[static_cast<size_t>(i)];
            rhs += colsum[static_cast<size_t>(c)] * a[static_cast<size_t>(c)] * db;
        }
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
    }
}

TEST_CASE("scale-1 averaging reduces to the global mean") {
    ResizeMap up = bilinear_resize_map(1, 1, 8, 8);
    ResizeMap down = adjoint_average_map(up);
    Rng rng(5);
    std::vector<float> fine(64);
    double mean = 0.0;
    for (auto& v : fine) {
        v = static_cast<float>(rng.normal());
        mean += v;
    }
    mean /= 64.0;
    float out = -1.0f;
    apply_resize(down, fine.data(), &out, 1);
    CHECK(out == doctest::Approx(mean).epsilon(1e-6));
}

TEST_CASE("adjoint of a shrinking map rejects unreferenced sources") {
    ResizeMap shrink = bilinear_resize_map(8, 8, 3, 3);
    CHECK_THROWS_AS(adjoint_average_map(shrink), ConfigError);
}
