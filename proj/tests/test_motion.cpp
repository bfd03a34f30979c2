#include <cmath>

#include "doctest.h"
#include "occtens/motion.hpp"
#include "occtens/rng.hpp"

using namespace occtens;

TEST_CASE("motion: zero pose hits the center bins with odd counts") {
    PoseVocab v;
    BinTriple b = quantize_pose({0.0, 0.0, 0.0}, v);
    CHECK(b.ix == v.vx / 2);
    CHECK(b.iy == v.vy / 2);
    CHECK(b.itheta == v.vtheta / 2);
}

TEST_CASE("motion: range edges clamp onto the outermost bins") {
    PoseVocab v;
    int clamps = 0;
    BinTriple lo = quantize_pose({v.x_min, v.y_min, v.t_min}, v, &clamps);
    CHECK(lo == BinTriple{0, 0, 0});
    BinTriple hi = quantize_pose({v.x_max, v.y_max, v.t_max}, v, &clamps);
    CHECK(hi == BinTriple{v.vx - 1, v.vy - 1, v.vtheta - 1});
    CHECK(clamps == 0);
    quantize_pose({v.x_max + 1.0, 0.0, v.t_min - 1.0}, v, &clamps);
    CHECK(clamps == 2);
    CHECK_THROWS_AS(quantize_pose({std::nan(""), 0.0, 0.0}, v), NumericError);
}

TEST_CASE("motion: bins agree with a linear edge scan") {
    PoseVocab v;
    Rng rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        RelPose p{rng.uniform(v.x_min, v.x_max), rng.uniform(v.y_min, v.y_max), rng.uniform(v.t_min, v.t_max)};
        BinTriple b = quantize_pose(p, v);
        auto scan = [](double val, double lo, double hi, int bins) {
            double w = (hi - lo) / bins;
            int last = 0;
            for (int i = 0; i < bins; ++i)
                if (val >= lo + i * w) last = i;
            return last;
        };
        CHECK(b.ix == scan(p.dx, v.x_min, v.x_max, v.vx));
        CHECK(b.iy == scan(p.dy, v.y_min, v.y_max, v.vy));
        CHECK(b.itheta == scan(p.dtheta, v.t_min, v.t_max, v.vtheta));
    }
}

TEST_CASE("motion: mixed-radix index arithmetic") {
    PoseVocab v;
    CHECK(pose_token_index({0, 0, 0}, v) == 0);
    PoseVocab v10;
    v10.vx = 10;
    v10.vy = 10;
    v10.vtheta = 10;
    CHECK(pose_token_index({3, 2, 1}, v10) == 123);
    CHECK(decompose_pose_token(123, v10) == BinTriple{3, 2, 1});
    CHECK_THROWS_AS(pose_token_index({10, 0, 0}, v10), ConfigError);
    CHECK_THROWS_AS(decompose_pose_token(1000, v10), ConfigError);
    CHECK_THROWS_AS(decode_pose_token(-1, v10), ConfigError);
}

TEST_CASE("motion: encode/decode bijective over the whole vocabulary") {
    PoseVocab v;
    v.vx = 5;
    v.vy = 5;
    v.vtheta = 5;
    int hits = 0;
    for (int token = 0; token < v.size(); ++token) {
        BinTriple b = decompose_pose_token(token, v);
        CHECK(pose_token_index(b, v) == token);
        ++hits;
    }
    CHECK(hits == 125);
}

TEST_CASE("motion: decode returns bin centers, round trip within half a bin") {
    PoseVocab v;
    RelPose c0 = decode_pose_token(0, v);
    CHECK(c0.dx == doctest::Approx(v.x_min + 0.5 * (v.x_max - v.x_min) / v.vx));
    CHECK(c0.dy == doctest::Approx(v.y_min + 0.5 * (v.y_max - v.y_min) / v.vy));
    CHECK(c0.dtheta == doctest::Approx(v.t_min + 0.5 * (v.t_max - v.t_min) / v.vtheta));

    Rng rng(17);
    double half_x = 0.5 * (v.x_max - v.x_min) / v.vx;
    double half_y = 0.5 * (v.y_max - v.y_min) / v.vy;
    double half_t = 0.5 * (v.t_max - v.t_min) / v.vtheta;
    for (int trial = 0; trial < 10000; ++trial) {
        RelPose p{rng.uniform(v.x_min, v.x_max), rng.uniform(v.y_min, v.y_max), rng.uniform(v.t_min, v.t_max)};
        RelPose q = decode_pose_token(pose_token_index(quantize_pose(p, v), v), v);
        CHECK(std::abs(q.dx - p.dx) <= half_x + 1e-12);
        CHECK(std::abs(q.dy - p.dy) <= half_y + 1e-12);
        CHECK(std::abs(q.dtheta - p.dtheta) <= half_t + 1e-12);
    }
}

TEST_CASE("motion: wrap_angle lands in (-pi, pi]") {
    CHECK(wrap_angle(M_PI) == doctest::Approx(M_PI));
    CHECK(wrap_angle(-M_PI) == doctest::Approx(M_PI));
    CHECK(wrap_angle(3 * M_PI / 2) == doctest::Approx(-M_PI / 2));
    CHECK(wrap_angle(2 * M_PI) == doctest::Approx(0.0));
    CHECK(wrap_angle(0.3) == doctest::Approx(0.3));
}

TEST_CASE("motion: trajectory composition") {
    std::vector<RelPose> zeros(4);
    for (auto& p : compose_trajectory(zeros)) {
        CHECK(p[0] == 0.0);
        CHECK(p[1] == 0.0);
        CHECK(p[2] == 0.0);
    }

    std::vector<RelPose> straight = {{0, 0, 0}, {1, 0, 0}, {1, 0, 0}};
    auto line = compose_trajectory(straight);
    CHECK(line[0][0] == doctest::Approx(0.0));
    CHECK(line[1][0] == doctest::Approx(1.0));
    CHECK(line[2][0] == doctest::Approx(2.0));
    CHECK(line[2][1] == doctest::Approx(0.0));

    std::vector<RelPose> square = {{0, 0, 0}, {1, 0, M_PI / 2}, {1, 0, M_PI / 2}, {1, 0, M_PI / 2}, {1, 0, M_PI / 2}};
    auto loop = compose_trajectory(square);
    CHECK(std::abs(loop.back()[0]) < 1e-9);
    CHECK(std::abs(loop.back()[1]) < 1e-9);
    CHECK(std::abs(wrap_angle(loop.back()[2])) < 1e-9);
}

TEST_CASE("motion: composition is equivariant under an initial rotation") {
    Rng rng(23);
    std::vector<RelPose> rel = {{0, 0, 0}};
    for (int i = 0; i < 6; ++i) rel.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5)});
    double theta0 = 0.7;
    std::vector<RelPose> rotated = rel;
    rotated[0].dtheta = theta0;
    auto base = compose_trajectory(rel);
    auto rot = compose_trajectory(rotated);
    for (size_t t = 0; t < base.size(); ++t) {
        double ex = std::cos(theta0) * base[t][0] - std::sin(theta0) * base[t][1];
        double ey = std::sin(theta0) * base[t][0] + std::cos(theta0) * base[t][1];
        CHECK(rot[t][0] == doctest::Approx(ex).epsilon(1e-12));
        CHECK(rot[t][1] == doctest::Approx(ey).epsilon(1e-12));
        CHECK(wrap_angle(rot[t][2] - base[t][2] - theta0) == doctest::Approx(0.0).epsilon(1e-12));
    }
}
