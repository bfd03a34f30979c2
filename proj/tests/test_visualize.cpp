#include <array>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "occtens/common.hpp"
#include "occtens/visualize.hpp"
#include "occtens/world.hpp"

using namespace occtens;

namespace {

std::string tmp_dir(const char* leaf) {
    std::filesystem::path p = std::filesystem::temp_directory_path() / "occtens_viz_tests" / leaf;
    std::filesystem::create_directories(p);
    return p.string();
}

int count_color(const viz::Image& img, std::array<uint8_t, 3> col) {
    int n = 0;
    for (int r = 0; r < img.h; ++r)
        for (int c = 0; c < img.w; ++c)
            if (img.get(r, c) == col) ++n;
    return n;
}

}  // namespace

TEST_CASE("bev render: empty grid gives a uniform background") {
    SemanticGrid g(6, 5, 2, 5, 0.5);
    viz::Image img = viz::render_bev(g, 4);
    CHECK(img.w == 24);
    CHECK(img.h == 20);
    CHECK(count_color(img, viz::class_color(kClassEmpty)) == img.w * img.h);
    CHECK_THROWS_AS(viz::render_bev(g, 0), ConfigError);
}

TEST_CASE("bev render: single obstacle colors exactly its cell block") {
    SemanticGrid g(8, 8, 2, 5, 0.5);
    g.at(2, 3, 0) = kClassVehicle;
    int px = 4;
    viz::Image img = viz::render_bev(g, px);
    CHECK(count_color(img, viz::class_color(kClassVehicle)) == px * px);
    // world y up: cell (2,3) sits px-block column 2, row (8-1-3)
    int r0 = (8 - 1 - 3) * px, c0 = 2 * px;
    for (int dr = 0; dr < px; ++dr)
        for (int dc = 0; dc < px; ++dc) CHECK(img.get(r0 + dr, c0 + dc) == viz::class_color(kClassVehicle));
    CHECK(count_color(img, viz::class_color(kClassEmpty)) == img.w * img.h - px * px);
}

TEST_CASE("bev render: the highest non-empty voxel wins the column") {
    SemanticGrid g(2, 1, 3, 5, 0.5);
    g.at(0, 0, 0) = kClassRoad;
    g.at(0, 0, 2) = kClassPedestrian;
    g.at(1, 0, 1) = kClassStatic;
    viz::Image img = viz::render_bev(g, 1);
    CHECK(img.get(0, 0) == viz::class_color(kClassPedestrian));
    CHECK(img.get(0, 1) == viz::class_color(kClassStatic));
}

TEST_CASE("bev orientation: corners land where world axes say") {
    SemanticGrid g(4, 4, 1, 5, 0.5);
    g.at(0, 0, 0) = kClassVehicle;      // x=0,y=0 -> bottom-left
    g.at(3, 3, 0) = kClassPedestrian;   // x=3,y=3 -> top-right
    viz::Image img = viz::render_bev(g, 2);
    CHECK(img.get(img.h - 1, 0) == viz::class_color(kClassVehicle));
    CHECK(img.get(0, img.w - 1) == viz::class_color(kClassPedestrian));
}

TEST_CASE("ego arrow draws along the heading") {
    SemanticGrid g(16, 16, 1, 5, 0.5);
    viz::Image img = viz::render_bev(g, 4);
    viz::Image plain = img;
    viz::draw_ego_arrow(img, {4.0, 4.0, 0.0}, 0.5, 4, 1.0);
    CHECK(img.rgb != plain.rgb);
    // the tip sits one meter to the +x of the base
    int tip_c = static_cast<int>(5.0 / 0.125), tip_r = img.h - static_cast<int>(4.0 / 0.125);
    CHECK(img.get(tip_r, tip_c) == std::array<uint8_t, 3>{16, 16, 16});
    int base_c = static_cast<int>(4.0 / 0.125);
    CHECK(img.get(tip_r, base_c) == std::array<uint8_t, 3>{16, 16, 16});
    // nothing above the arrow band changes more than the stamp width
    CHECK(img.get(2, 2) == viz::class_color(kClassEmpty));

    viz::Image again = viz::render_bev(g, 4);
    viz::draw_ego_arrow(again, {4.0, 4.0, 0.0}, 0.5, 4, 1.0);
    CHECK(again.rgb == img.rgb);  // bit-stable
    CHECK_THROWS_AS(viz::draw_ego_arrow(img, {0, 0, 0}, 0.0, 4, 1.0), ConfigError);
}

TEST_CASE("ppm files round-trip and are byte-identical for identical input") {
    SemanticGrid g(8, 6, 2, 5, 0.5);
    g.at(1, 1, 0) = kClassRoad;
    g.at(5, 4, 1) = kClassVehicle;
    viz::Image img = viz::render_bev(g, 3);
    std::string dir = tmp_dir("ppm");
    viz::write_ppm(img, dir + "/a.ppm");
    viz::write_ppm(img, dir + "/b.ppm");
    viz::Image back = viz::read_ppm(dir + "/a.ppm");
    CHECK(back.w == img.w);
    CHECK(back.h == img.h);
    CHECK(back.rgb == img.rgb);

    std::ifstream fa(dir + "/a.ppm", std::ios::binary), fb(dir + "/b.ppm", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);

    std::ofstream bad(dir + "/bad.ppm", std::ios::binary);
    bad << "P5\n1 1\n255\nx";
    bad.close();
    CHECK_THROWS_AS(viz::read_ppm(dir + "/bad.ppm"), DataError);
    CHECK_THROWS_AS(viz::read_ppm(dir + "/missing.ppm"), DataError);
}

TEST_CASE("palette cycles past the named classes") {
    CHECK(viz::class_color(0) == viz::class_color(5));
    CHECK(viz::class_color(1) != viz::class_color(2));
}
