#pragma once

#include <array>
#include <string>
#include <vector>

#include "occtens/world.hpp"

namespace occtens::metrics {

// Binary occupied-vs-empty IoU, occupied = label != 0. Both grids entirely
// empty counts as perfect agreement (1.0).
double iou(const SemanticGrid& pred, const SemanticGrid& gt);

struct PerClassIoU {
    std::vector<double> iou;  // one entry per class id; -1 when absent from both grids
    double miou = 1.0;        // mean over semantic (non-empty) classes present in either grid
};
PerClassIoU miou(const SemanticGrid& pred, const SemanticGrid& gt);

struct L2Result {
    std::vector<double> per_horizon;  // meters, aligned with the horizon list
    double average = 0.0;
};
// Euclidean (x, y) error at each horizon frame; trajectories hold the anchor
// at index 0, so horizon h reads index h.
L2Result l2_trajectory_error(const std::vector<std::array<double, 3>>& pred,
                             const std::vector<std::array<double, 3>>& gt, const std::vector<int>& horizons);

// True when the ego rectangle (length along heading, width across) placed at
// pose (x, y, theta) in meters covers any grid column holding a class other
// than empty/road, or reaches outside the grid (reported via *out_of_bounds).
// Coverage = positive-area overlap between the rectangle and the cell square.
bool footprint_collides(const SemanticGrid& grid, const std::array<double, 3>& pose, double length, double width,
                        bool* out_of_bounds = nullptr);

// 0/1 per horizon for one episode; gt_future frame h-1 is horizon h.
std::vector<double> collision_indicators(const std::vector<std::array<double, 3>>& pred_traj,
                                         const Sequence& gt_future, const std::vector<int>& horizons, double length,
                                         double width, int* out_of_bounds_count = nullptr);

struct ForecastReport {
    std::vector<int> horizons;  // frame offsets after history (1-based)
    std::vector<double> miou_h, iou_h;
    double miou_avg = 0.0, iou_avg = 0.0;
    std::vector<double> per_class;  // episode-averaged; -1 when never present
    int episodes = 0;
};

class ForecastAccumulator {
  public:
    ForecastAccumulator(std::vector<int> horizons, int class_count);
    // pred/gt frame lists are horizon-aligned: frame h-1 is horizon h
    void add_episode(const std::vector<SemanticGrid>& pred, const std::vector<SemanticGrid>& gt);
    ForecastReport report() const;

  private:
    std::vector<int> horizons_;
    int class_count_;
    std::vector<double> sum_miou_, sum_iou_, sum_class_;
    std::vector<int> cnt_class_;
    int episodes_ = 0;
};

struct PlanningReport {
    std::vector<int> horizons;
    std::vector<double> l2_h, collision_h;
    double l2_avg = 0.0, collision_avg = 0.0;
    int episodes = 0;
    int out_of_bounds = 0;
};

class PlanningAccumulator {
  public:
    PlanningAccumulator(std::vector<int> horizons, double ego_length, double ego_width);
    void add_episode(const std::vector<std::array<double, 3>>& pred_traj,
                     const std::vector<std::array<double, 3>>& gt_traj, const Sequence& gt_future);
    PlanningReport report() const;

  private:
    std::vector<int> horizons_;
    double length_, width_;
    std::vector<double> sum_l2_, sum_coll_;
    int episodes_ = 0, oob_ = 0;
};

std::string forecast_report_json(const ForecastReport& r);
std::string forecast_report_text(const ForecastReport& r);
std::string planning_report_json(const PlanningReport& r);
std::string planning_report_text(const PlanningReport& r);

}  // namespace occtens::metrics
