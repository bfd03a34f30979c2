#pragma once

#include <array>
#include <vector>

#include "occtens/world.hpp"

namespace occtens {

// Uniform binning of relative ego motion. Defaults cover 0.5 m / 0.05 rad
// bins at 2 Hz over the toy world's dynamics.
struct PoseVocab {
    int vx = 13, vy = 13, vtheta = 13;
    double x_min = -3.25, x_max = 3.25;
    double y_min = -3.25, y_max = 3.25;
    double t_min = -0.65, t_max = 0.65;

    int size() const { return vx * vy * vtheta; }
    bool operator==(const PoseVocab&) const = default;
};

struct BinTriple {
    int ix = 0, iy = 0, itheta = 0;
    bool operator==(const BinTriple&) const = default;
};

// Out-of-range components clamp to the edge bins; each clamp increments
// *clamp_counter when provided. NaN input is a numeric error.
BinTriple quantize_pose(const RelPose& p, const PoseVocab& vocab, int* clamp_counter = nullptr);

// index = i_x + i_y*V_x + i_theta*V_x*V_y
int pose_token_index(const BinTriple& bins, const PoseVocab& vocab);
BinTriple decompose_pose_token(int token, const PoseVocab& vocab);

// Bin-center reconstruction.
RelPose decode_pose_token(int token, const PoseVocab& vocab);

// Wraps an angle to (-pi, pi].
double wrap_angle(double a);

// SE(2) chain anchored at the origin: pose t applies rel_poses[0..t] in
// order, translating in the heading frame of pose t-1. Returns one absolute
// (x, y, theta) per input element.
std::vector<std::array<double, 3>> compose_trajectory(const std::vector<RelPose>& rel_poses);

}  // namespace occtens
