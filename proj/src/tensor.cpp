#include "p3d/tensor.hpp"

#include <algorithm>

namespace p3d {

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

int64_t numel_of(const Shape& s) {
    if (s.empty()) throw ShapeError("empty shape");
    int64_t n = 1;
    for (int d : s) {
        if (d < 1) throw ShapeError("invalid shape " + shape_str(s) + ": dims must be >= 1");
        n *= d;
    }
    return n;
}

bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double v : t.data) m = std::max(m, std::fabs(v));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("max_abs_diff: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

double mse_between(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("mse_between: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

}  // namespace p3d
