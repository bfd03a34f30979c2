#pragma once

#include <vector>

#include "occtens/tensor.hpp"

namespace occtens {

// Sparse linear resize: out pixel i = sum of taps[k].w * in[taps[k].src] over
// its tap range. Built once per (in, out) shape pair and reused.
struct ResizeMap {
    struct Tap {
        int src;
        float w;
    };
    int in_h = 0, in_w = 0;
    int out_h = 0, out_w = 0;
    std::vector<Tap> taps;
    std::vector<int> row_offset;  // out_h*out_w + 1 entries
};

// Bilinear interpolation with half-pixel center alignment. Every output row
// of the map sums to exactly 1 (boundary samples clamp).
ResizeMap bilinear_resize_map(int in_h, int in_w, int out_h, int out_w);

// Normalized adjoint of `up`: tent-weighted averaging from the fine grid back
// to the coarse grid. Using the adjoint (rather than an independent bilinear
// map) is what makes the multi-scale residual quantizer's refinement
// monotone: with row sums of 1 on the upsample side, choosing the per-cell
// nearest code can never increase the full-resolution residual norm.
ResizeMap adjoint_average_map(const ResizeMap& up);

// src has in_h*in_w*channels entries, dst out_h*out_w*channels.
void apply_resize(const ResizeMap& map, const float* src, float* dst, int channels);
Tensor apply_resize(const ResizeMap& map, const Tensor& src);  // [h,w,c]

}  // namespace occtens
