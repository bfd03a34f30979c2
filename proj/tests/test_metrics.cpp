#include <array>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "occtens/common.hpp"
#include "occtens/metrics.hpp"
#include "occtens/rng.hpp"
#include "occtens/world.hpp"

using namespace occtens;
namespace mt = occtens::metrics;

namespace {

SemanticGrid flat_grid(int x, int y, int z, int k, uint8_t fill) {
    SemanticGrid g(x, y, z, k, 0.5);
    std::fill(g.labels.begin(), g.labels.end(), fill);
    return g;
}

using Pt = std::array<double, 2>;

// keep the part of poly with a*x + b*y <= c (Sutherland-Hodgman step)
std::vector<Pt> clip_halfplane(const std::vector<Pt>& poly, double a, double b, double c) {
    std::vector<Pt> out;
    size_t n = poly.size();
    for (size_t i = 0; i < n; ++i) {
        const Pt& p = poly[i];
        const Pt& q = poly[(i + 1) % n];
        double dp = a * p[0] + b * p[1] - c;
        double dq = a * q[0] + b * q[1] - c;
        if (dp <= 0) out.push_back(p);
        if ((dp <= 0) != (dq <= 0)) {
            double t = dp / (dp - dq);
            out.push_back({p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
        }
    }
    return out;
}

double shoelace(const std::vector<Pt>& poly) {
    double s = 0.0;
    for (size_t i = 0; i < poly.size(); ++i) {
        const Pt& p = poly[i];
        const Pt& q = poly[(i + 1) % poly.size()];
        s += p[0] * q[1] - q[0] * p[1];
    }
    return std::abs(s) / 2.0;
}

// independent oracle: clip the rotated footprint against each cell and ask
// for positive intersection area
bool oracle_collides(const SemanticGrid& grid, const std::array<double, 3>& pose, double length, double width) {
    double ux = std::cos(pose[2]), uy = std::sin(pose[2]);
    double hl = length / 2.0, hw = width / 2.0;
    double cell = grid.cell_size;
    std::vector<Pt> rect = {
        {pose[0] + hl * ux - hw * uy, pose[1] + hl * uy + hw * ux},
        {pose[0] - hl * ux - hw * uy, pose[1] - hl * uy + hw * ux},
        {pose[0] - hl * ux + hw * uy, pose[1] - hl * uy - hw * ux},
        {pose[0] + hl * ux + hw * uy, pose[1] + hl * uy - hw * ux},
    };
    int reach = static_cast<int>(std::ceil((hl + hw) / cell)) + 1;
    int cx = static_cast<int>(std::floor(pose[0] / cell));
    int cy = static_cast<int>(std::floor(pose[1] / cell));
    for (int ix = cx - reach; ix <= cx + reach; ++ix) {
        for (int iy = cy - reach; iy <= cy + reach; ++iy) {
            std::vector<Pt> poly = clip_halfplane(rect, -1, 0, -ix * cell);
            poly = clip_halfplane(poly, 1, 0, (ix + 1) * cell);
            poly = clip_halfplane(poly, 0, -1, -iy * cell);
            poly = clip_halfplane(poly, 0, 1, (iy + 1) * cell);
            if (poly.size() < 3 || shoelace(poly) <= 1e-12) continue;
            if (ix < 0 || ix >= grid.x || iy < 0 || iy >= grid.y) return true;
            for (int iz = 0; iz < grid.z; ++iz) {
                uint8_t c = grid.at(ix, iy, iz);
                if (c != kClassEmpty && c != kClassRoad) return true;
            }
        }
    }
    return false;
}

}  // namespace

TEST_CASE("binary iou: identity, disjoint, hand count, empty-empty") {
    SemanticGrid a = flat_grid(4, 4, 1, 5, kClassEmpty);
    SemanticGrid b = a;
    CHECK(mt::iou(a, b) == 1.0);  // both entirely empty

    a.at(0, 0, 0) = kClassVehicle;
    a.at(1, 1, 0) = kClassRoad;
    b.at(2, 2, 0) = kClassStatic;
    CHECK(mt::iou(a, b) == 0.0);  // disjoint occupancy

    // pred occupies 2 cells, gt 3, overlap 1 -> 1/4
    SemanticGrid p = flat_grid(4, 4, 1, 5, kClassEmpty);
    SemanticGrid g = p;
    p.at(0, 0, 0) = kClassVehicle;
    p.at(0, 1, 0) = kClassVehicle;
    g.at(0, 0, 0) = kClassStatic;  // class differs, still occupied overlap
    g.at(1, 0, 0) = kClassVehicle;
    g.at(1, 1, 0) = kClassVehicle;
    CHECK(mt::iou(p, g) == doctest::Approx(0.25));
    CHECK(mt::iou(g, p) == doctest::Approx(0.25));  // symmetry

    CHECK(mt::iou(p, p) == 1.0);
    SemanticGrid wrong(3, 4, 1, 5, 0.5);
    CHECK_THROWS_AS(mt::iou(p, wrong), DataError);
}

TEST_CASE("miou: hand-computed class table and absence handling") {
    // 6 voxels, 3 classes
    SemanticGrid p(6, 1, 1, 3, 0.5), g(6, 1, 1, 3, 0.5);
    uint8_t pl[6] = {1, 1, 1, 2, 0, 0};
    uint8_t gl[6] = {1, 1, 2, 2, 2, 0};
    for (int i = 0; i < 6; ++i) {
        p.labels[static_cast<size_t>(i)] = pl[i];
        g.labels[static_cast<size_t>(i)] = gl[i];
    }
    // class 1: inter {0,1}, union {0,1,2} -> 2/3
    // class 2: inter {3},  union {2,3,4} -> 1/3
    // class 0: inter {5},  union {4,5}   -> 1/2 (listed, excluded from mean)
    mt::PerClassIoU r = mt::miou(p, g);
    CHECK(r.iou[0] == doctest::Approx(0.5));
    CHECK(r.iou[1] == doctest::Approx(2.0 / 3.0));
    CHECK(r.iou[2] == doctest::Approx(1.0 / 3.0));
    CHECK(r.miou == doctest::Approx(0.5));
    CHECK(r.miou >= *std::min_element(r.iou.begin() + 1, r.iou.end()));
    CHECK(r.miou <= *std::max_element(r.iou.begin() + 1, r.iou.end()));

    mt::PerClassIoU rev = mt::miou(g, p);
    CHECK(rev.miou == doctest::Approx(r.miou));

    // absent class sits at -1 and stays out of the mean
    SemanticGrid p4(6, 1, 1, 4, 0.5), g4(6, 1, 1, 4, 0.5);
    p4.labels = p.labels;
    g4.labels = g.labels;
    mt::PerClassIoU r4 = mt::miou(p4, g4);
    CHECK(r4.iou[3] == -1.0);
    CHECK(r4.miou == doctest::Approx(0.5));

    CHECK(mt::miou(p, p).miou == 1.0);
    SemanticGrid a1 = flat_grid(4, 1, 1, 3, 1), a2 = flat_grid(4, 1, 1, 3, 2);
    CHECK(mt::miou(a1, a2).miou == 0.0);
    SemanticGrid e1 = flat_grid(4, 1, 1, 3, 0);
    CHECK(mt::miou(e1, e1).miou == 1.0);  // nothing but empty anywhere
}

TEST_CASE("miou symmetry fuzz") {
    Rng rng(5151);
    for (int trial = 0; trial < 20; ++trial) {
        SemanticGrid a(5, 4, 2, 4, 0.5), b(5, 4, 2, 4, 0.5);
        for (auto& v : a.labels) v = static_cast<uint8_t>(rng.randint(0, 3));
        for (auto& v : b.labels) v = static_cast<uint8_t>(rng.randint(0, 3));
        CHECK(mt::miou(a, b).miou == doctest::Approx(mt::miou(b, a).miou));
        CHECK(mt::iou(a, b) == doctest::Approx(mt::iou(b, a)));
    }
}

TEST_CASE("l2 trajectory error at 2 Hz horizons") {
    std::vector<std::array<double, 3>> gt;
    for (int i = 0; i <= 6; ++i) gt.push_back({i * 1.0, 0.0, 0.0});
    mt::L2Result zero = mt::l2_trajectory_error(gt, gt, {2, 4, 6});
    for (double v : zero.per_horizon) CHECK(v == 0.0);
    CHECK(zero.average == 0.0);

    std::vector<std::array<double, 3>> off = gt;
    for (auto& p : off) p[0] += 1.0;
    mt::L2Result one = mt::l2_trajectory_error(off, gt, {2, 4, 6});
    for (double v : one.per_horizon) CHECK(v == doctest::Approx(1.0));
    CHECK(one.average == doctest::Approx(1.0));

    // straight gt vs a 0.1 rad/frame arc, checked against an independent
    // SE(2) simulation done right here in doubles
    std::vector<std::array<double, 3>> arc;
    double x = 0.0, y = 0.0, th = 0.0;
    arc.push_back({x, y, th});
    for (int i = 0; i < 6; ++i) {
        th += 0.1;
        x += std::cos(th);
        y += std::sin(th);
        arc.push_back({x, y, th});
    }
    mt::L2Result turn = mt::l2_trajectory_error(arc, gt, {2, 4, 6});
    for (size_t i = 0; i < 3; ++i) {
        int h = static_cast<int>(2 * (i + 1));
        double want = std::hypot(arc[static_cast<size_t>(h)][0] - gt[static_cast<size_t>(h)][0],
                                 arc[static_cast<size_t>(h)][1] - gt[static_cast<size_t>(h)][1]);
        CHECK(turn.per_horizon[i] == doctest::Approx(want));
    }
    CHECK(turn.average == doctest::Approx((turn.per_horizon[0] + turn.per_horizon[1] + turn.per_horizon[2]) / 3.0));

    std::vector<std::array<double, 3>> shorter(gt.begin(), gt.end() - 1);
    CHECK_THROWS_AS(mt::l2_trajectory_error(shorter, gt, {2}), DataError);
    CHECK_THROWS_AS(mt::l2_trajectory_error(gt, gt, {7}), DataError);
    CHECK_THROWS_AS(mt::l2_trajectory_error(gt, gt, {0}), ConfigError);
    CHECK_THROWS_AS(mt::l2_trajectory_error(gt, gt, {}), ConfigError);
}

TEST_CASE("footprint collision: basics and class taxonomy") {
    SemanticGrid road = flat_grid(16, 16, 2, 5, kClassRoad);
    std::array<double, 3> centre = {1.5, 1.5, 0.3};  // cells are 0.5 m; obstacle cell (8,8) spans 4.0..4.5 m
    CHECK_FALSE(mt::footprint_collides(road, centre, 2.0, 1.0));

    for (uint8_t cls : {kClassStatic, kClassVehicle, kClassPedestrian}) {
        SemanticGrid g = road;
        g.at(8, 8, 1) = cls;  // obstacle in the upper slice still counts
        std::array<double, 3> atop = {8.5 * 0.5, 8.5 * 0.5, 0.0};
        CHECK(mt::footprint_collides(g, atop, 2.0, 1.0));
        CHECK_FALSE(mt::footprint_collides(g, centre, 2.0, 1.0));
    }

    bool oob = false;
    std::array<double, 3> outside = {-3.0, 4.0, 0.0};
    CHECK(mt::footprint_collides(road, outside, 2.0, 1.0, &oob));
    CHECK(oob);
    std::array<double, 3> edge = {7.9, 4.0, 0.0};  // grid spans 8 m; nose pokes out
    oob = false;
    CHECK(mt::footprint_collides(road, edge, 2.0, 1.0, &oob));
    CHECK(oob);

    CHECK_THROWS_AS(mt::footprint_collides(road, centre, 0.0, 1.0), ConfigError);
    CHECK_THROWS_AS(mt::footprint_collides(road, centre, 2.0, -1.0), ConfigError);
}

TEST_CASE("footprint rasterization matches a supersampling oracle") {
    SemanticGrid g = flat_grid(16, 16, 1, 5, kClassRoad);
    g.at(8, 8, 0) = kClassStatic;
    g.at(9, 8, 0) = kClassStatic;
    g.at(4, 11, 0) = kClassVehicle;

    int checked = 0, hits = 0;
    for (double theta : {0.0, 0.35, 1.2}) {
        for (double ox = 2.0; ox <= 6.0; ox += 0.13) {
            std::array<double, 3> pose = {ox, 4.25, theta};
            bool got = mt::footprint_collides(g, pose, 1.7, 0.9);
            bool want = oracle_collides(g, pose, 1.7, 0.9);
            CAPTURE(theta);
            CAPTURE(ox);
            CHECK(got == want);
            ++checked;
            hits += want;
        }
        // the spec's half-cell straddle: footprint edge lands mid-obstacle-cell
        std::array<double, 3> straddle = {8.0 * 0.5 - 1.7 / 2.0 + 0.25, 8.5 * 0.5, theta};
        CHECK(mt::footprint_collides(g, straddle, 1.7, 0.9) == oracle_collides(g, straddle, 1.7, 0.9));
    }
    CHECK(checked > 60);
    CHECK(hits > 0);  // the sweep must cross the obstacle band at least once
}

TEST_CASE("collision monotonicity: more obstacles, never fewer hits") {
    Rng rng(808);
    SemanticGrid base = flat_grid(16, 16, 1, 5, kClassRoad);
    for (int i = 0; i < 6; ++i)
        base.at(static_cast<int>(rng.randint(2, 13)), static_cast<int>(rng.randint(2, 13)), 0) = kClassStatic;
    SemanticGrid more = base;
    for (int i = 0; i < 6; ++i)
        more.at(static_cast<int>(rng.randint(2, 13)), static_cast<int>(rng.randint(2, 13)), 0) = kClassVehicle;

    for (int trial = 0; trial < 200; ++trial) {
        std::array<double, 3> pose = {rng.uniform(1.0, 7.0), rng.uniform(1.0, 7.0), rng.uniform(0.0, 3.14)};
        bool a = mt::footprint_collides(base, pose, 1.5, 0.8);
        bool b = mt::footprint_collides(more, pose, 1.5, 0.8);
        if (a) CHECK(b);
    }
}

TEST_CASE("collision indicators map horizons onto future frames") {
    Sequence fut;
    for (int i = 0; i < 6; ++i) {
        Frame f;
        f.grid = flat_grid(16, 16, 1, 5, kClassRoad);
        fut.frames.push_back(f);
    }
    // obstacle only in frame 4 (horizon 4)
    fut.frames[3].grid.at(8, 8, 0) = kClassStatic;

    std::vector<std::array<double, 3>> traj;
    for (int i = 0; i <= 6; ++i) traj.push_back({8.5 * 0.5, 8.5 * 0.5, 0.0});  // parked atop the cell
    int oob = 0;
    std::vector<double> ind = mt::collision_indicators(traj, fut, {2, 4, 6}, 1.0, 0.6, &oob);
    REQUIRE(ind.size() == 3);
    CHECK(ind[0] == 0.0);
    CHECK(ind[1] == 1.0);
    CHECK(ind[2] == 0.0);
    CHECK(oob == 0);

    CHECK_THROWS_AS(mt::collision_indicators(traj, fut, {7}, 1.0, 0.6), DataError);
    CHECK_THROWS_AS(mt::collision_indicators({}, fut, {2}, 1.0, 0.6), DataError);
}

TEST_CASE("forecast accumulator: averages are recomputable means") {
    mt::ForecastAccumulator acc({1, 2}, 3);
    SemanticGrid a = flat_grid(4, 4, 1, 3, 1);
    SemanticGrid b = a;
    b.at(0, 0, 0) = 2;

    acc.add_episode({a, a}, {a, b});
    acc.add_episode({b, b}, {b, b});
    mt::ForecastReport r = acc.report();
    CHECK(r.episodes == 2);
    REQUIRE(r.miou_h.size() == 2);
    for (double v : r.miou_h) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(r.miou_avg == doctest::Approx((r.miou_h[0] + r.miou_h[1]) / 2.0));
    CHECK(r.iou_avg == doctest::Approx((r.iou_h[0] + r.iou_h[1]) / 2.0));
    // horizon 1 sees identical grids in both episodes; horizon 2 of the
    // first episode compares a against b
    double m_ab = mt::miou(a, b).miou;
    CHECK(r.miou_h[0] == doctest::Approx(1.0));
    CHECK(r.miou_h[1] == doctest::Approx((m_ab + 1.0) / 2.0));
    // class 0 never appears anywhere
    CHECK(r.per_class[0] == -1.0);

    nlohmann::json j = nlohmann::json::parse(mt::forecast_report_json(r));
    CHECK(j["episodes"] == 2);
    CHECK(j["miou"].size() == 2);
    CHECK(mt::forecast_report_text(r).find("mIoU") != std::string::npos);

    mt::ForecastAccumulator empty({1}, 3);
    CHECK_THROWS_AS(empty.report(), DataError);
    CHECK_THROWS_AS(acc.add_episode({a}, {a, b}), DataError);
    CHECK_THROWS_AS(mt::ForecastAccumulator({}, 3), ConfigError);
}

TEST_CASE("planning accumulator aggregates l2 and collisions") {
    Sequence fut;
    for (int i = 0; i < 4; ++i) {
        Frame f;
        f.grid = flat_grid(16, 16, 1, 5, kClassRoad);
        fut.frames.push_back(f);
    }
    fut.frames[1].grid.at(8, 8, 0) = kClassStatic;

    std::vector<std::array<double, 3>> gt_traj, hit_traj, clear_traj;
    for (int i = 0; i <= 4; ++i) {
        gt_traj.push_back({2.0 + i * 0.5, 2.0, 0.0});
        hit_traj.push_back({8.5 * 0.5, 8.5 * 0.5, 0.0});
        clear_traj.push_back({2.0 + i * 0.5, 3.0, 0.0});
    }

    mt::PlanningAccumulator acc({2, 4}, 1.0, 0.6);
    acc.add_episode(hit_traj, gt_traj, fut);
    acc.add_episode(clear_traj, gt_traj, fut);
    mt::PlanningReport r = acc.report();
    CHECK(r.episodes == 2);
    CHECK(r.collision_h[0] == doctest::Approx(0.5));  // only the parked trajectory hits
    CHECK(r.collision_h[1] == doctest::Approx(0.0));
    CHECK(r.l2_avg == doctest::Approx((r.l2_h[0] + r.l2_h[1]) / 2.0));
    CHECK(r.collision_avg == doctest::Approx((r.collision_h[0] + r.collision_h[1]) / 2.0));
    for (double v : r.collision_h) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(r.l2_h[0] >= 0.0);

    nlohmann::json j = nlohmann::json::parse(mt::planning_report_json(r));
    CHECK(j["l2"].size() == 2);
    CHECK(mt::planning_report_text(r).find("L2(m)") != std::string::npos);
}
