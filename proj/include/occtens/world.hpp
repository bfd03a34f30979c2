#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "occtens/common.hpp"

namespace occtens {

// Semantic class ids used by the toy generator.
enum : uint8_t { kClassEmpty = 0, kClassRoad = 1, kClassStatic = 2, kClassVehicle = 3, kClassPedestrian = 4 };

// Dense X*Y*Z voxel grid of class labels, x-major: ((ix*y)+iy)*z+iz.
struct SemanticGrid {
    int x = 0, y = 0, z = 0;
    int class_count = 0;
    double cell_size = 0.5;
    std::vector<uint8_t> labels;

    SemanticGrid() = default;
    SemanticGrid(int x_, int y_, int z_, int k, double cell)
        : x(x_), y(y_), z(z_), class_count(k), cell_size(cell),
          labels(static_cast<size_t>(x_) * y_ * z_, uint8_t{0}) {}

    uint8_t at(int ix, int iy, int iz) const {
        return labels[(static_cast<size_t>(ix) * y + iy) * z + iz];
    }
    uint8_t& at(int ix, int iy, int iz) { return labels[(static_cast<size_t>(ix) * y + iy) * z + iz]; }

    bool operator==(const SemanticGrid&) const = default;
};

// Per-frame SE(2) motion relative to the previous frame.
struct RelPose {
    double dx = 0.0, dy = 0.0, dtheta = 0.0;
    bool operator==(const RelPose&) const = default;
};

struct Frame {
    SemanticGrid grid;
    RelPose rel_pose;
    int timestamp_index = 0;
    bool operator==(const Frame&) const = default;
};

struct Sequence {
    std::vector<Frame> frames;
    double rate_hz = 2.0;
    bool operator==(const Sequence&) const = default;
};

struct WorldConfig {
    int x = 32, y = 32, z = 4;
    int class_count = 5;
    int frames = 10;
    int vehicles = 3;
    int pedestrians = 2;
    int static_blocks = 6;
    double cell_size = 0.5;
    double rate_hz = 2.0;
    int downsample = 4;
    // declared density band for the fraction of non-empty voxels per frame
    double density_min = 0.03, density_max = 0.45;
    double ego_speed_min = 0.8, ego_speed_max = 2.0;  // cells per frame
    int vehicle_speed_min = 1, vehicle_speed_max = 3;  // cells per frame
    double ego_length = 2.0, ego_width = 1.0;          // footprint, meters
};

// Deterministic synthetic episode. Grids are world-frame; the ego vehicle is
// never rendered into the grid (its pose and footprint live beside it), which
// keeps the ground-truth track collision-free by construction. If
// ego_track_out is given it receives the absolute (x, y, theta) ego pose per
// frame in world meters.
Sequence generate_toy_world(const WorldConfig& config, uint64_t seed,
                            std::vector<std::array<double, 3>>* ego_track_out = nullptr);

void save_sequence(const Sequence& seq, const std::string& path);
Sequence load_sequence(const std::string& path);

void validate_sequence(const Sequence& seq);

}  // namespace occtens
