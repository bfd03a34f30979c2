#include "occtens/world.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "occtens/rng.hpp"

namespace occtens {

namespace {

constexpr char kMagic[4] = {'O', 'C', 'C', 'T'};
constexpr uint16_t kVersion = 1;
constexpr int kVehicleLen = 5;
constexpr int kLaneRows = 3;

struct RoadLayout {
    int road_y0, road_y1, lanes;
    std::vector<int> sidewalk_rows;
};

RoadLayout road_layout(const WorldConfig& c) {
    RoadLayout r;
    r.road_y0 = c.y * 5 / 16;
    r.road_y1 = c.y - r.road_y0;
    r.lanes = (r.road_y1 - r.road_y0) / kLaneRows;
    for (int row : {r.road_y0 - 2, r.road_y0 - 1, r.road_y1, r.road_y1 + 1})
        if (row >= 0 && row < c.y) r.sidewalk_rows.push_back(row);
    return r;
}

void validate_config(const WorldConfig& c, const RoadLayout& lay) {
    if (c.x < 1 || c.y < 1 || c.z < 1) throw ConfigError("world: grid dims must be positive");
    if (c.frames < 1) throw ConfigError("world: frame count must be >= 1");
    if (c.downsample < 1) throw ConfigError("world: downsample factor must be >= 1");
    if (c.x % c.downsample != 0 || c.y % c.downsample != 0)
        throw ConfigError("world: grid X and Y must be divisible by the downsample factor");
    if (c.class_count < 2) throw ConfigError("world: class_count must be >= 2");
    if ((c.vehicles > 0 || c.pedestrians > 0 || c.static_blocks > 0) && c.class_count < 5)
        throw ConfigError("world: class_count must be >= 5 when agents or statics are enabled");
    if (c.vehicles < 0 || c.pedestrians < 0 || c.static_blocks < 0)
        throw ConfigError("world: agent counts must be non-negative");
    if (c.cell_size <= 0.0) throw ConfigError("world: cell_size must be positive");
    if (lay.lanes < 1) throw ConfigError("world: grid too small for a road lane");
    if (c.vehicles > 0 && lay.lanes < 2) throw ConfigError("world: vehicles need at least 2 lanes");
    if (c.vehicles > 0 && c.x < kVehicleLen + 3) throw ConfigError("world: grid too short for vehicles");
    if (c.vehicle_speed_min < 1 || c.vehicle_speed_max < c.vehicle_speed_min)
        throw ConfigError("world: bad vehicle speed range");
    if (c.ego_speed_min <= 0.0 || c.ego_speed_max < c.ego_speed_min)
        throw ConfigError("world: bad ego speed range");
}

void stamp_box(SemanticGrid& g, int x0, int x1, int y0, int y1, int z0, int z1, uint8_t cls) {
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    z0 = std::max(z0, 0);
    x1 = std::min(x1, g.x);
    y1 = std::min(y1, g.y);
    z1 = std::min(z1, g.z);
    for (int ix = x0; ix < x1; ++ix)
        for (int iy = y0; iy < y1; ++iy)
            for (int iz = z0; iz < z1; ++iz) g.at(ix, iy, iz) = cls;
}

}  // namespace

Sequence generate_toy_world(const WorldConfig& c, uint64_t seed,
                            std::vector<std::array<double, 3>>* ego_track_out) {
    RoadLayout lay = road_layout(c);
    validate_config(c, lay);
    Rng rng(seed);

    // ego: reserved lane, piecewise-constant speed, straight heading
    int ego_lane = static_cast<int>(rng.randint(0, lay.lanes - 1));
    double v1 = rng.uniform(c.ego_speed_min, c.ego_speed_max);
    double v2 = rng.uniform(c.ego_speed_min, c.ego_speed_max);
    double ego_x0 = 3.0;
    int n1 = (c.frames - 1) / 2;
    int n2 = (c.frames - 1) - n1;
    double travel = n1 * v1 + n2 * v2;
    double room = (c.x - 3.5) - ego_x0;
    if (travel > room && travel > 0.0) {
        double f = room / travel;
        v1 *= f;
        v2 *= f;
    }
    double ego_y = (lay.road_y0 + kLaneRows * ego_lane + 1.5) * c.cell_size;

    // static scenery shared by all frames
    SemanticGrid base(c.x, c.y, c.z, c.class_count, c.cell_size);
    for (int iy = lay.road_y0; iy < lay.road_y1; ++iy)
        for (int ix = 0; ix < c.x; ++ix) base.at(ix, iy, 0) = kClassRoad;
    for (int row : lay.sidewalk_rows)
        for (int ix = 0; ix < c.x; ++ix) base.at(ix, row, 0) = kClassRoad;
    for (int b = 0; b < c.static_blocks; ++b) {
        int margin_lo, margin_hi;
        if (b % 2 == 0) {
            margin_lo = 0;
            margin_hi = lay.road_y0 - 2;
        } else {
            margin_lo = lay.road_y1 + 2;
            margin_hi = c.y;
        }
        int sx = static_cast<int>(rng.randint(2, 4));
        int sy = static_cast<int>(rng.randint(2, 4));
        int hz = static_cast<int>(rng.randint(1, std::min(3, c.z)));
        if (margin_hi - margin_lo < sy || c.x < sx) continue;
        int bx = static_cast<int>(rng.randint(0, c.x - sx));
        int by = static_cast<int>(rng.randint(margin_lo, margin_hi - sy));
        stamp_box(base, bx, bx + sx, by, by + sy, 0, hz, kClassStatic);
    }

    // vehicles: one per non-ego lane, integer cell velocity, bounce at edges
    struct Vehicle {
        int lane, x, v;
    };
    std::vector<int> free_lanes;
    for (int l = 0; l < lay.lanes; ++l)
        if (l != ego_lane) free_lanes.push_back(l);
    int vehicle_count = std::min<int>(c.vehicles, static_cast<int>(free_lanes.size()));
    std::vector<Vehicle> vehicles;
    for (int i = 0; i < vehicle_count; ++i) {
        Vehicle v;
        v.lane = free_lanes[static_cast<size_t>(i)];
        v.x = static_cast<int>(rng.randint(0, c.x - kVehicleLen));
        int speed = static_cast<int>(rng.randint(c.vehicle_speed_min, c.vehicle_speed_max));
        v.v = rng.uniform() < 0.5 ? speed : -speed;
        vehicles.push_back(v);
    }

    struct Ped {
        int x, y;
    };
    std::vector<Ped> peds;
    if (!lay.sidewalk_rows.empty()) {
        for (int i = 0; i < c.pedestrians; ++i) {
            Ped p;
            p.x = static_cast<int>(rng.randint(0, c.x - 1));
            p.y = lay.sidewalk_rows[static_cast<size_t>(
                rng.randint(0, static_cast<int64_t>(lay.sidewalk_rows.size()) - 1))];
            peds.push_back(p);
        }
    }

    Sequence seq;
    seq.rate_hz = c.rate_hz;
    seq.frames.reserve(static_cast<size_t>(c.frames));
    if (ego_track_out) ego_track_out->clear();

    double ego_x = ego_x0 * c.cell_size;
    double prev_x = ego_x;
    int veh_z = std::min(2, c.z);
    for (int t = 0; t < c.frames; ++t) {
        if (t > 0) {
            for (auto& v : vehicles) {
                int nx = v.x + v.v;
                if (nx < 0 || nx > c.x - kVehicleLen) {
                    v.v = -v.v;
                    nx = v.x + v.v;
                }
                v.x = std::clamp(nx, 0, c.x - kVehicleLen);
            }
            for (auto& p : peds) p.x = std::clamp(p.x + static_cast<int>(rng.randint(-1, 1)), 0, c.x - 1);
            prev_x = ego_x;
            ego_x += (t <= n1 ? v1 : v2) * c.cell_size;
        }

        Frame f;
        f.grid = base;
        f.timestamp_index = t;
        for (const auto& v : vehicles) {
            int y0 = lay.road_y0 + kLaneRows * v.lane;
            stamp_box(f.grid, v.x, v.x + kVehicleLen, y0, y0 + kLaneRows, 0, veh_z, kClassVehicle);
        }
        for (const auto& p : peds) f.grid.at(p.x, p.y, 0) = kClassPedestrian;
        f.rel_pose = t == 0 ? RelPose{} : RelPose{ego_x - prev_x, 0.0, 0.0};
        seq.frames.push_back(std::move(f));
        if (ego_track_out) ego_track_out->push_back({ego_x, ego_y, 0.0});
    }
    return seq;
}

namespace {

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
    uint64_t bits = std::bit_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n, const char* what) {
        if (pos + n > buf.size()) throw DataError(std::string("OCCT file truncated while reading ") + what);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint8_t>(buf[pos]) | (static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + 1])) << 8);
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    double f64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 8;
        return std::bit_cast<double>(v);
    }
};

}  // namespace

void validate_sequence(const Sequence& seq) {
    if (seq.frames.empty()) throw DataError("sequence: no frames");
    const SemanticGrid& g0 = seq.frames[0].grid;
    if (seq.frames[0].rel_pose != RelPose{}) throw DataError("sequence: frame 0 rel_pose must be zero");
    for (size_t i = 0; i < seq.frames.size(); ++i) {
        const Frame& f = seq.frames[i];
        if (f.timestamp_index != static_cast<int>(i)) throw DataError("sequence: timestamp indices must be 0,1,2,...");
        if (f.grid.x != g0.x || f.grid.y != g0.y || f.grid.z != g0.z || f.grid.class_count != g0.class_count ||
            f.grid.cell_size != g0.cell_size)
            throw DataError("sequence: frames disagree on grid dimensions");
        for (uint8_t l : f.grid.labels)
            if (l >= f.grid.class_count) throw DataError("sequence: label out of class range");
        if (!(f.rel_pose.dtheta > -M_PI && f.rel_pose.dtheta <= M_PI))
            throw DataError("sequence: dtheta outside (-pi, pi]");
    }
}

void save_sequence(const Sequence& seq, const std::string& path) {
    validate_sequence(seq);
    const SemanticGrid& g0 = seq.frames[0].grid;
    std::string out;
    out.append(kMagic, 4);
    put_u16(out, kVersion);
    put_u32(out, static_cast<uint32_t>(g0.x));
    put_u32(out, static_cast<uint32_t>(g0.y));
    put_u32(out, static_cast<uint32_t>(g0.z));
    put_u32(out, static_cast<uint32_t>(g0.class_count));
    put_u32(out, static_cast<uint32_t>(seq.frames.size()));
    put_f64(out, seq.rate_hz);
    put_f64(out, g0.cell_size);
    for (const Frame& f : seq.frames) {
        out.append(reinterpret_cast<const char*>(f.grid.labels.data()), f.grid.labels.size());
        put_f64(out, f.rel_pose.dx);
        put_f64(out, f.rel_pose.dy);
        put_f64(out, f.rel_pose.dtheta);
    }
    std::ofstream fs(path, std::ios::binary | std::ios::trunc);
    if (!fs) throw DataError("cannot open for writing: " + path);
    fs.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!fs) throw DataError("write failed: " + path);
}

Sequence load_sequence(const std::string& path) {
    std::ifstream fs(path, std::ios::binary);
    if (!fs) throw DataError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(fs)), std::istreambuf_iterator<char>());
    Reader r{buf};

    r.need(4, "magic");
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw DataError("bad magic bytes (expected \"OCCT\"): " + path);
    r.pos = 4;
    uint16_t version = r.u16("version");
    if (version != kVersion) throw DataError("unsupported OCCT version " + std::to_string(version));
    uint32_t x = r.u32("dim X"), y = r.u32("dim Y"), z = r.u32("dim Z"), k = r.u32("class count");
    uint32_t frames = r.u32("frame count");
    double rate = r.f64("rate");
    double cell = r.f64("cell size");
    if (x == 0 || y == 0 || z == 0) throw DataError("OCCT header: zero grid dimension");
    if (k < 2 || k > 256) throw DataError("OCCT header: class count out of range");
    if (frames == 0) throw DataError("OCCT header: zero frame count");

    Sequence seq;
    seq.rate_hz = rate;
    size_t voxels = static_cast<size_t>(x) * y * z;
    for (uint32_t t = 0; t < frames; ++t) {
        Frame f;
        f.grid = SemanticGrid(static_cast<int>(x), static_cast<int>(y), static_cast<int>(z), static_cast<int>(k), cell);
        f.timestamp_index = static_cast<int>(t);
        r.need(voxels, "frame labels");
        std::memcpy(f.grid.labels.data(), buf.data() + r.pos, voxels);
        r.pos += voxels;
        f.rel_pose.dx = r.f64("rel pose dx");
        f.rel_pose.dy = r.f64("rel pose dy");
        f.rel_pose.dtheta = r.f64("rel pose dtheta");
        seq.frames.push_back(std::move(f));
    }
    if (r.pos != buf.size()) throw DataError("trailing bytes after last frame: " + path);
    validate_sequence(seq);
    return seq;
}

}  // namespace occtens
