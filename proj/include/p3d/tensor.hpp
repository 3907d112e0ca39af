#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "p3d/errors.hpp"

namespace p3d {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

// Throws ShapeError if any dimension is < 1.
int64_t numel_of(const Shape& s);

// Dense row-major tensor of doubles. Rank is whatever the shape says;
// video tensors use (B, C, F, H, W).
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)) { data.assign(numel_of(shape), 0.0); }
    Tensor(Shape s, double fill) : shape(std::move(s)) { data.assign(numel_of(shape), fill); }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }

    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    void fill(double v) { data.assign(data.size(), v); }
};

bool all_finite(const Tensor& t);
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
double mse_between(const Tensor& a, const Tensor& b);

inline void check_rank(const Tensor& t, int rank, const char* who) {
    if (t.rank() != rank)
        throw ShapeError(std::string(who) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape));
}

}  // namespace p3d
