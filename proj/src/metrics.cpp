#include "occtens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "json.hpp"
#include "occtens/common.hpp"

namespace occtens::metrics {

namespace {

void check_same_dims(const SemanticGrid& a, const SemanticGrid& b) {
    if (a.x != b.x || a.y != b.y || a.z != b.z || a.class_count != b.class_count)
        throw DataError("metrics: grid dimensions differ");
}

void check_horizons(const std::vector<int>& horizons, size_t available) {
    if (horizons.empty()) throw ConfigError("metrics: empty horizon list");
    for (int h : horizons) {
        if (h < 1) throw ConfigError("metrics: horizons are 1-based frame offsets");
        if (static_cast<size_t>(h) > available) throw DataError("metrics: horizon exceeds available frames");
    }
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

bool drivable(uint8_t cls) { return cls == kClassEmpty || cls == kClassRoad; }

// strict positive-area overlap between a rotated rectangle and one grid cell,
// separating-axis test over the two cell axes and the two rectangle axes
bool rect_cell_overlap(double cx, double cy, double ux, double uy, double hl, double hw, int ix, int iy,
                       double cell) {
    double rx[4], ry[4];
    double vx = -uy, vy = ux;
    rx[0] = cx + ux * hl + vx * hw;
    ry[0] = cy + uy * hl + vy * hw;
    rx[1] = cx + ux * hl - vx * hw;
    ry[1] = cy + uy * hl - vy * hw;
    rx[2] = cx - ux * hl + vx * hw;
    ry[2] = cy - uy * hl + vy * hw;
    rx[3] = cx - ux * hl - vx * hw;
    ry[3] = cy - uy * hl - vy * hw;
    double sx[4] = {ix * cell, (ix + 1) * cell, (ix + 1) * cell, ix * cell};
    double sy[4] = {iy * cell, iy * cell, (iy + 1) * cell, (iy + 1) * cell};

    double axes[4][2] = {{1.0, 0.0}, {0.0, 1.0}, {ux, uy}, {vx, vy}};
    for (auto& ax : axes) {
        double rmin = 1e300, rmax = -1e300, smin = 1e300, smax = -1e300;
        for (int i = 0; i < 4; ++i) {
            double pr = rx[i] * ax[0] + ry[i] * ax[1];
            double ps = sx[i] * ax[0] + sy[i] * ax[1];
            rmin = std::min(rmin, pr), rmax = std::max(rmax, pr);
            smin = std::min(smin, ps), smax = std::max(smax, ps);
        }
        if (std::max(rmin, smin) >= std::min(rmax, smax)) return false;
    }
    return true;
}

}  // namespace

double iou(const SemanticGrid& pred, const SemanticGrid& gt) {
    check_same_dims(pred, gt);
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.labels.size(); ++i) {
        bool p = pred.labels[i] != kClassEmpty, g = gt.labels[i] != kClassEmpty;
        inter += p && g;
        uni += p || g;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

PerClassIoU miou(const SemanticGrid& pred, const SemanticGrid& gt) {
    check_same_dims(pred, gt);
    int k = pred.class_count;
    std::vector<int64_t> inter(static_cast<size_t>(k), 0), uni(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < pred.labels.size(); ++i) {
        uint8_t p = pred.labels[i], g = gt.labels[i];
        if (p >= k || g >= k) throw DataError("metrics: label outside class range");
        if (p == g) ++inter[p];
        ++uni[p];
        if (g != p) ++uni[g];
    }
    PerClassIoU out;
    out.iou.assign(static_cast<size_t>(k), -1.0);
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
        if (uni[static_cast<size_t>(c)] == 0) continue;  // absent from both grids
        double v = static_cast<double>(inter[static_cast<size_t>(c)]) /
                   static_cast<double>(uni[static_cast<size_t>(c)]);
        out.iou[static_cast<size_t>(c)] = v;
        if (c != kClassEmpty) {
            sum += v;
            ++present;
        }
    }
    out.miou = present > 0 ? sum / present : 1.0;  // nothing but empty anywhere: agreement
    return out;
}

L2Result l2_trajectory_error(const std::vector<std::array<double, 3>>& pred,
                             const std::vector<std::array<double, 3>>& gt, const std::vector<int>& horizons) {
    if (pred.size() != gt.size()) throw DataError("l2_trajectory_error: trajectory lengths differ");
    if (pred.empty()) throw DataError("l2_trajectory_error: empty trajectories");
    check_horizons(horizons, pred.size() - 1);
    L2Result out;
    for (int h : horizons) {
        const auto& a = pred[static_cast<size_t>(h)];
        const auto& b = gt[static_cast<size_t>(h)];
        out.per_horizon.push_back(std::hypot(a[0] - b[0], a[1] - b[1]));
    }
    out.average = mean(out.per_horizon);
    return out;
}

bool footprint_collides(const SemanticGrid& grid, const std::array<double, 3>& pose, double length, double width,
                        bool* out_of_bounds) {
    if (length <= 0.0 || width <= 0.0) throw ConfigError("footprint_collides: footprint must be positive");
    if (grid.cell_size <= 0.0) throw DataError("footprint_collides: invalid cell size");
    if (out_of_bounds) *out_of_bounds = false;

    double cx = pose[0], cy = pose[1];
    double ux = std::cos(pose[2]), uy = std::sin(pose[2]);
    double hl = length / 2.0, hw = width / 2.0;
    double cell = grid.cell_size;
    double ex = std::abs(ux * hl) + std::abs(uy * hw);  // bounding half-extents
    double ey = std::abs(uy * hl) + std::abs(ux * hw);
    int ix0 = static_cast<int>(std::floor((cx - ex) / cell));
    int ix1 = static_cast<int>(std::floor((cx + ex) / cell));
    int iy0 = static_cast<int>(std::floor((cy - ey) / cell));
    int iy1 = static_cast<int>(std::floor((cy + ey) / cell));

    bool hit = false;
    for (int ix = ix0; ix <= ix1 && !hit; ++ix) {
        for (int iy = iy0; iy <= iy1 && !hit; ++iy) {
            if (!rect_cell_overlap(cx, cy, ux, uy, hl, hw, ix, iy, cell)) continue;
            if (ix < 0 || ix >= grid.x || iy < 0 || iy >= grid.y) {
                if (out_of_bounds) *out_of_bounds = true;
                hit = true;
                break;
            }
            for (int iz = 0; iz < grid.z; ++iz) {
                if (!drivable(grid.at(ix, iy, iz))) {
                    hit = true;
                    break;
                }
            }
        }
    }
    return hit;
}

std::vector<double> collision_indicators(const std::vector<std::array<double, 3>>& pred_traj,
                                         const Sequence& gt_future, const std::vector<int>& horizons, double length,
                                         double width, int* out_of_bounds_count) {
    if (pred_traj.empty()) throw DataError("collision_indicators: empty trajectory");
    check_horizons(horizons, std::min(pred_traj.size() - 1, gt_future.frames.size()));
    std::vector<double> out;
    for (int h : horizons) {
        bool oob = false;
        bool hit = footprint_collides(gt_future.frames[static_cast<size_t>(h) - 1].grid,
                                      pred_traj[static_cast<size_t>(h)], length, width, &oob);
        if (oob && out_of_bounds_count) ++*out_of_bounds_count;
        out.push_back(hit ? 1.0 : 0.0);
    }
    return out;
}

ForecastAccumulator::ForecastAccumulator(std::vector<int> horizons, int class_count)
    : horizons_(std::move(horizons)), class_count_(class_count) {
    check_horizons(horizons_, static_cast<size_t>(1) << 30);
    if (class_count_ < 2) throw ConfigError("ForecastAccumulator: need at least two classes");
    sum_miou_.assign(horizons_.size(), 0.0);
    sum_iou_.assign(horizons_.size(), 0.0);
    sum_class_.assign(static_cast<size_t>(class_count_), 0.0);
    cnt_class_.assign(static_cast<size_t>(class_count_), 0);
}

void ForecastAccumulator::add_episode(const std::vector<SemanticGrid>& pred, const std::vector<SemanticGrid>& gt) {
    if (pred.size() != gt.size()) throw DataError("ForecastAccumulator: frame counts differ");
    check_horizons(horizons_, pred.size());
    for (size_t i = 0; i < horizons_.size(); ++i) {
        size_t f = static_cast<size_t>(horizons_[i]) - 1;
        PerClassIoU pc = miou(pred[f], gt[f]);
        sum_miou_[i] += pc.miou;
        sum_iou_[i] += iou(pred[f], gt[f]);
        for (int c = 0; c < class_count_; ++c) {
            if (pc.iou[static_cast<size_t>(c)] < 0.0) continue;
            sum_class_[static_cast<size_t>(c)] += pc.iou[static_cast<size_t>(c)];
            ++cnt_class_[static_cast<size_t>(c)];
        }
    }
    ++episodes_;
}

ForecastReport ForecastAccumulator::report() const {
    if (episodes_ == 0) throw DataError("ForecastAccumulator: no episodes recorded");
    ForecastReport r;
    r.horizons = horizons_;
    r.episodes = episodes_;
    for (size_t i = 0; i < horizons_.size(); ++i) {
        r.miou_h.push_back(sum_miou_[i] / episodes_);
        r.iou_h.push_back(sum_iou_[i] / episodes_);
    }
    r.miou_avg = mean(r.miou_h);
    r.iou_avg = mean(r.iou_h);
    for (int c = 0; c < class_count_; ++c) {
        int n = cnt_class_[static_cast<size_t>(c)];
        r.per_class.push_back(n > 0 ? sum_class_[static_cast<size_t>(c)] / n : -1.0);
    }
    return r;
}

PlanningAccumulator::PlanningAccumulator(std::vector<int> horizons, double ego_length, double ego_width)
    : horizons_(std::move(horizons)), length_(ego_length), width_(ego_width) {
    check_horizons(horizons_, static_cast<size_t>(1) << 30);
    if (length_ <= 0.0 || width_ <= 0.0) throw ConfigError("PlanningAccumulator: footprint must be positive");
    sum_l2_.assign(horizons_.size(), 0.0);
    sum_coll_.assign(horizons_.size(), 0.0);
}

void PlanningAccumulator::add_episode(const std::vector<std::array<double, 3>>& pred_traj,
                                      const std::vector<std::array<double, 3>>& gt_traj,
                                      const Sequence& gt_future) {
    L2Result l2 = l2_trajectory_error(pred_traj, gt_traj, horizons_);
    std::vector<double> coll = collision_indicators(pred_traj, gt_future, horizons_, length_, width_, &oob_);
    for (size_t i = 0; i < horizons_.size(); ++i) {
        sum_l2_[i] += l2.per_horizon[i];
        sum_coll_[i] += coll[i];
    }
    ++episodes_;
}

PlanningReport PlanningAccumulator::report() const {
    if (episodes_ == 0) throw DataError("PlanningAccumulator: no episodes recorded");
    PlanningReport r;
    r.horizons = horizons_;
    r.episodes = episodes_;
    r.out_of_bounds = oob_;
    for (size_t i = 0; i < horizons_.size(); ++i) {
        r.l2_h.push_back(sum_l2_[i] / episodes_);
        r.collision_h.push_back(sum_coll_[i] / episodes_);
    }
    r.l2_avg = mean(r.l2_h);
    r.collision_avg = mean(r.collision_h);
    return r;
}

std::string forecast_report_json(const ForecastReport& r) {
    nlohmann::json j;
    j["horizons"] = r.horizons;
    j["miou"] = r.miou_h;
    j["iou"] = r.iou_h;
    j["miou_avg"] = r.miou_avg;
    j["iou_avg"] = r.iou_avg;
    j["per_class_iou"] = r.per_class;
    j["episodes"] = r.episodes;
    return j.dump(2);
}

std::string forecast_report_text(const ForecastReport& r) {
    std::string out = "forecast (episodes=" + std::to_string(r.episodes) + ")\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s %10s %10s\n", "horizon", "mIoU", "IoU");
    out += line;
    for (size_t i = 0; i < r.horizons.size(); ++i) {
        std::snprintf(line, sizeof(line), "%-10d %10.4f %10.4f\n", r.horizons[i], r.miou_h[i], r.iou_h[i]);
        out += line;
    }
    std::snprintf(line, sizeof(line), "%-10s %10.4f %10.4f\n", "avg", r.miou_avg, r.iou_avg);
    out += line;
    out += "per-class IoU:";
    for (size_t c = 0; c < r.per_class.size(); ++c) {
        std::snprintf(line, sizeof(line), " %zu:%.4f", c, r.per_class[c]);
        out += line;
    }
    out += "\n";
    return out;
}

std::string planning_report_json(const PlanningReport& r) {
    nlohmann::json j;
    j["horizons"] = r.horizons;
    j["l2"] = r.l2_h;
    j["collision_rate"] = r.collision_h;
    j["l2_avg"] = r.l2_avg;
    j["collision_avg"] = r.collision_avg;
    j["episodes"] = r.episodes;
    j["out_of_bounds"] = r.out_of_bounds;
    return j.dump(2);
}

std::string planning_report_text(const PlanningReport& r) {
    std::string out = "planning (episodes=" + std::to_string(r.episodes) + ")\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s %10s %12s\n", "horizon", "L2(m)", "coll.rate");
    out += line;
    for (size_t i = 0; i < r.horizons.size(); ++i) {
        std::snprintf(line, sizeof(line), "%-10d %10.4f %12.4f\n", r.horizons[i], r.l2_h[i], r.collision_h[i]);
        out += line;
    }
    std::snprintf(line, sizeof(line), "%-10s %10.4f %12.4f\n", "avg", r.l2_avg, r.collision_avg);
    out += line;
    std::snprintf(line, sizeof(line), "out-of-bounds poses: %d\n", r.out_of_bounds);
    out += line;
    return out;
}

}  // namespace occtens::metrics
