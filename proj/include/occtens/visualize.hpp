#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "occtens/world.hpp"

namespace occtens::viz {

struct Image {
    int w = 0, h = 0;
    std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel, top row first

    void set(int r, int c, uint8_t red, uint8_t green, uint8_t blue);
    std::array<uint8_t, 3> get(int r, int c) const;
};

// Fixed palette indexed by class id; ids past the table cycle.
std::array<uint8_t, 3> class_color(int cls);

// Top-down render: world x runs right, world y runs up, the highest non-empty
// voxel in each column picks the color. px_per_cell >= 1.
Image render_bev(const SemanticGrid& grid, int px_per_cell);

// Arrow at (x, y, theta) in world meters, drawn over the BEV raster.
void draw_ego_arrow(Image& img, const std::array<double, 3>& pose, double cell_size, int px_per_cell,
                    double length_m);

void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

}  // namespace occtens::viz
