#include "p3d/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "p3d/errors.hpp"

namespace p3d {

CostReport count_conv_costs(int cin, int cout, int k, int k_t, const Shape& input_shape) {
    if (cin < 1 || cout < 1) throw ConfigError("conv needs positive channel counts");
    if (k < 1 || k % 2 == 0 || k_t < 1 || k_t % 2 == 0)
        throw ConfigError("kernel sizes must be odd and positive");
    if (input_shape.size() != 5) throw ShapeError("cost accounting wants a (B,C,F,H,W) shape");
    for (int d : input_shape)
        if (d < 1) throw ShapeError("input dims must be positive");
    if (input_shape[1] != cin)
        throw ShapeError("declared input shape carries " + std::to_string(input_shape[1]) +
                         " channels, conv expects " + std::to_string(cin));

    CostReport r;
    char label[96];
    std::snprintf(label, sizeof label, "conv %d->%d k%d kt%d @ (%d,%d,%d,%d,%d)", cin, cout, k,
                  k_t, input_shape[0], input_shape[1], input_shape[2], input_shape[3],
                  input_shape[4]);
    r.layer = label;

    const int64_t ci = cin, co = cout, kk = static_cast<int64_t>(k) * k, kt = k_t;
    r.params_p3d = co * ci * kk + co + co * co * kt + co;
    r.params_full3d = co * ci * kk * kt + co;

    const int64_t out_elems = static_cast<int64_t>(input_shape[0]) * co * input_shape[2] *
                              input_shape[3] * input_shape[4];
    r.flops_p3d = (ci * kk + 1 + co * kt + 1) * out_elems;
    r.flops_full3d = (ci * kk * kt + 1) * out_elems;
    r.ratio = static_cast<double>(r.params_p3d) / static_cast<double>(r.params_full3d);
    return r;
}

std::string cost_table(const std::vector<CostReport>& rows) {
    size_t width = 8;
    for (const CostReport& r : rows) width = std::max(width, r.layer.size());
    std::string out = "layer";
    out.append(width - 4, ' ');
    out += "params(p3d)  params(3d)   flops(p3d)     flops(3d)      ratio\n";
    char line[256];
    for (const CostReport& r : rows) {
        std::snprintf(line, sizeof line, "%-*s %-12lld %-12lld %-14lld %-14lld %.4f\n",
                      static_cast<int>(width), r.layer.c_str(),
                      static_cast<long long>(r.params_p3d),
                      static_cast<long long>(r.params_full3d),
                      static_cast<long long>(r.flops_p3d),
                      static_cast<long long>(r.flops_full3d), r.ratio);
        out += line;
    }
    return out;
}

double temporal_consistency(const Tensor& video) {
    check_rank(video, 5, "temporal_consistency");
    const int B = video.dim(0), C = video.dim(1), F = video.dim(2);
    if (F < 2) throw ConfigError("consistency needs at least two frames");
    const int64_t hw = static_cast<int64_t>(video.dim(3)) * video.dim(4);
    double acc = 0.0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int f = 0; f + 1 < F; ++f) {
                const int64_t at = ((static_cast<int64_t>(b) * C + c) * F + f) * hw;
                for (int64_t i = 0; i < hw; ++i)
                    acc += std::fabs(video[at + hw + i] - video[at + i]);
            }
    return acc / (static_cast<double>(B) * C * (F - 1) * hw);
}

double psnr(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("psnr wants same-shaped inputs");
    const double mse = mse_between(a, b);
    if (mse == 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(4.0 / mse));
}

}  // namespace p3d
