#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

namespace occtens {

// Dense row-major float tensor. Shapes are small, so no stride tricks.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0f) {}
    Tensor(std::vector<int> s, float fill) : shape(std::move(s)), data(count(shape), fill) {}

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    float& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 2-D accessors (rows x cols)
    float& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
};

}  // namespace occtens
