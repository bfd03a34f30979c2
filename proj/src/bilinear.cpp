#include "occtens/bilinear.hpp"

#include <algorithm>
#include <cmath>

#include "occtens/common.hpp"

namespace occtens {

namespace {

struct Axis {
    int lo, hi;
    float w_hi;  // weight on hi; lo gets 1 - w_hi
};

Axis axis_taps(int out_i, int out_n, int in_n) {
    double u = (out_i + 0.5) * static_cast<double>(in_n) / out_n - 0.5;
    double fl = std::floor(u);
    int lo = static_cast<int>(fl);
    float f = static_cast<float>(u - fl);
    int hi = lo + 1;
    lo = std::clamp(lo, 0, in_n - 1);
    hi = std::clamp(hi, 0, in_n - 1);
    return {lo, hi, f};
}

}  // namespace

ResizeMap bilinear_resize_map(int in_h, int in_w, int out_h, int out_w) {
    if (in_h < 1 || in_w < 1 || out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize_map: bad dims");
    ResizeMap m;
    m.in_h = in_h;
    m.in_w = in_w;
    m.out_h = out_h;
    m.out_w = out_w;
    m.row_offset.reserve(static_cast<size_t>(out_h) * out_w + 1);
    m.row_offset.push_back(0);
    for (int oy = 0; oy < out_h; ++oy) {
        Axis ay = axis_taps(oy, out_h, in_h);
        for (int ox = 0; ox < out_w; ++ox) {
            Axis ax = axis_taps(ox, out_w, in_w);
            // accumulate up to 4 taps, merging duplicates from clamping
            std::pair<int, float> cand[4] = {
                {ay.lo * in_w + ax.lo, (1.0f - ay.w_hi) * (1.0f - ax.w_hi)},
                {ay.lo * in_w + ax.hi, (1.0f - ay.w_hi) * ax.w_hi},
                {ay.hi * in_w + ax.lo, ay.w_hi * (1.0f - ax.w_hi)},
                {ay.hi * in_w + ax.hi, ay.w_hi * ax.w_hi},
            };
            for (int k = 0; k < 4; ++k) {
                if (cand[k].second == 0.0f) continue;
                bool merged = false;
                for (size_t t = m.row_offset.back(); t < m.taps.size(); ++t) {
                    if (m.taps[t].src == cand[k].first) {
                        m.taps[t].w += cand[k].second;
                        merged = true;
                        break;
                    }
                }
                if (!merged) m.taps.push_back({cand[k].first, cand[k].second});
            }
            m.row_offset.push_back(static_cast<int>(m.taps.size()));
        }
    }
    return m;
}

ResizeMap adjoint_average_map(const ResizeMap& up) {
    ResizeMap m;
    m.in_h = up.out_h;
    m.in_w = up.out_w;
    m.out_h = up.in_h;
    m.out_w = up.in_w;
    int coarse_n = up.in_h * up.in_w;
    int fine_n = up.out_h * up.out_w;
    std::vector<std::vector<ResizeMap::Tap>> rows(static_cast<size_t>(coarse_n));
    std::vector<double> colsum(static_cast<size_t>(coarse_n), 0.0);
    for (int f = 0; f < fine_n; ++f) {
        for (int t = up.row_offset[static_cast<size_t>(f)]; t < up.row_offset[static_cast<size_t>(f) + 1]; ++t) {
            rows[static_cast<size_t>(up.taps[static_cast<size_t>(t)].src)].push_back(
                {f, up.taps[static_cast<size_t>(t)].w});
            colsum[static_cast<size_t>(up.taps[static_cast<size_t>(t)].src)] +=
                up.taps[static_cast<size_t>(t)].w;
        }
    }
    m.row_offset.push_back(0);
    for (int c = 0; c < coarse_n; ++c) {
        if (colsum[static_cast<size_t>(c)] <= 0.0)
            throw ConfigError("adjoint_average_map: coarse cell receives no weight");
        float inv = static_cast<float>(1.0 / colsum[static_cast<size_t>(c)]);
        for (auto tap : rows[static_cast<size_t>(c)]) m.taps.push_back({tap.src, tap.w * inv});
        m.row_offset.push_back(static_cast<int>(m.taps.size()));
    }
    return m;
}

void apply_resize(const ResizeMap& map, const float* src, float* dst, int channels) {
    int out_n = map.out_h * map.out_w;
    for (int i = 0; i < out_n; ++i) {
        float* d = dst + static_cast<size_t>(i) * channels;
        std::fill(d, d + channels, 0.0f);
        for (int t = map.row_offset[static_cast<size_t>(i)]; t < map.row_offset[static_cast<size_t>(i) + 1]; ++t) {
            const float* s = src + static_cast<size_t>(map.taps[static_cast<size_t>(t)].src) * channels;
            float w = map.taps[static_cast<size_t>(t)].w;
            for (int c = 0; c < channels; ++c) d[c] += w * s[c];
        }
    }
}

Tensor apply_resize(const ResizeMap& map, const Tensor& src) {
    int channels = src.dim(2);
    Tensor out({map.out_h, map.out_w, channels});
    apply_resize(map, src.data.data(), out.data.data(), channels);
    return out;
}

}  // namespace occtens
