#include "occtens/visualize.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "occtens/common.hpp"

namespace occtens::viz {

void Image::set(int r, int c, uint8_t red, uint8_t green, uint8_t blue) {
    if (r < 0 || r >= h || c < 0 || c >= w) return;
    size_t i = (static_cast<size_t>(r) * w + c) * 3;
    rgb[i] = red;
    rgb[i + 1] = green;
    rgb[i + 2] = blue;
}

std::array<uint8_t, 3> Image::get(int r, int c) const {
    size_t i = (static_cast<size_t>(r) * w + c) * 3;
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

std::array<uint8_t, 3> class_color(int cls) {
    static const std::array<std::array<uint8_t, 3>, 5> palette = {{
        {232, 232, 232},  // empty
        {118, 118, 118},  // road
        {72, 94, 196},    // static
        {214, 58, 58},    // vehicle
        {244, 158, 42},   // pedestrian
    }};
    return palette[static_cast<size_t>(cls) % palette.size()];
}

Image render_bev(const SemanticGrid& grid, int px_per_cell) {
    if (px_per_cell < 1) throw ConfigError("render_bev: px_per_cell must be >= 1");
    Image img;
    img.w = grid.x * px_per_cell;
    img.h = grid.y * px_per_cell;
    img.rgb.assign(static_cast<size_t>(img.w) * img.h * 3, 0);
    for (int ix = 0; ix < grid.x; ++ix) {
        for (int iy = 0; iy < grid.y; ++iy) {
            int cls = kClassEmpty;
            for (int iz = grid.z - 1; iz >= 0; --iz) {
                uint8_t c = grid.at(ix, iy, iz);
                if (c != kClassEmpty) {
                    cls = c;
                    break;
                }
            }
            std::array<uint8_t, 3> col = class_color(cls);
            for (int pr = 0; pr < px_per_cell; ++pr)
                for (int pc = 0; pc < px_per_cell; ++pc)
                    img.set((grid.y - 1 - iy) * px_per_cell + pr, ix * px_per_cell + pc, col[0], col[1], col[2]);
        }
    }
    return img;
}

namespace {

void draw_segment(Image& img, double x0, double y0, double x1, double y1, double m_per_px, int img_h) {
    // world meters -> pixel centers; y flips
    auto to_px = [&](double x, double y, double& c, double& r) {
        c = x / m_per_px;
        r = img_h - y / m_per_px;
    };
    double c0, r0, c1, r1;
    to_px(x0, y0, c0, r0);
    to_px(x1, y1, c1, r1);
    int steps = static_cast<int>(std::ceil(std::max(std::abs(c1 - c0), std::abs(r1 - r0)))) + 1;
    for (int i = 0; i <= steps; ++i) {
        double t = static_cast<double>(i) / steps;
        int c = static_cast<int>(std::lround(c0 + t * (c1 - c0)));
        int r = static_cast<int>(std::lround(r0 + t * (r1 - r0)));
        for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) img.set(r + dr, c + dc, 16, 16, 16);
    }
}

}  // namespace

void draw_ego_arrow(Image& img, const std::array<double, 3>& pose, double cell_size, int px_per_cell,
                    double length_m) {
    if (cell_size <= 0.0) throw ConfigError("draw_ego_arrow: cell_size must be positive");
    double m_per_px = cell_size / px_per_cell;
    double ux = std::cos(pose[2]), uy = std::sin(pose[2]);
    double tip_x = pose[0] + ux * length_m, tip_y = pose[1] + uy * length_m;
    draw_segment(img, pose[0], pose[1], tip_x, tip_y, m_per_px, img.h);
    // two barbs swept back from the tip
    double bx = -ux * 0.35 * length_m, by = -uy * 0.35 * length_m;
    double px = -uy * 0.2 * length_m, py = ux * 0.2 * length_m;
    draw_segment(img, tip_x, tip_y, tip_x + bx + px, tip_y + by + py, m_per_px, img.h);
    draw_segment(img, tip_x, tip_y, tip_x + bx - px, tip_y + by - py, m_per_px, img.h);
}

void write_ppm(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("write_ppm: cannot open " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!f) throw DataError("write_ppm: write failed for " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("read_ppm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w < 1 || h < 1) throw DataError("read_ppm: unsupported header in " + path);
    f.get();  // single whitespace after maxval
    Image img;
    img.w = w;
    img.h = h;
    img.rgb.resize(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw DataError("read_ppm: truncated " + path);
    return img;
}

}  // namespace occtens::viz
