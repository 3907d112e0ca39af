#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p3d/tensor.hpp"

namespace p3d {

// Cost comparison between the factorized conv pair (2D spatial followed by a
// 1D temporal conv) and the dense 3D conv it replaces, at one input shape.
struct CostReport {
    std::string layer;
    int64_t params_p3d = 0;
    int64_t params_full3d = 0;
    int64_t flops_p3d = 0;    // multiply-adds; bias counted once per output element
    int64_t flops_full3d = 0;
    double ratio = 0.0;       // params_p3d / params_full3d
};

// Closed forms, exact by construction:
//   params_p3d    = cout*cin*k^2 + cout  +  cout^2*k_t + cout
//   params_full3d = cout*cin*k^2*k_t + cout
// FLOPs are weights-touched-per-output-element times output elements, with
// same padding everywhere, so both stages emit B*cout*F*H*W elements.
CostReport count_conv_costs(int cin, int cout, int k, int k_t, const Shape& input_shape);

// Aligned human-readable table, one report per line.
std::string cost_table(const std::vector<CostReport>& rows);

// Mean over consecutive-frame pairs of mean |delta|; 0 for a frozen clip,
// bigger when frames move more. Needs (B,C,F,H,W) with F >= 2.
double temporal_consistency(const Tensor& video);

// 10*log10(4/mse) for signals in [-1,1] (peak-to-peak 2); equal inputs are
// reported as the 99 dB cap instead of infinity.
double psnr(const Tensor& a, const Tensor& b);

}  // namespace p3d
