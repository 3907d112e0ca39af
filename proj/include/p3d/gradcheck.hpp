#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "p3d/autodiff.hpp"

namespace p3d {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t checked_elements = 0;
};

// Compares analytic gradients against central finite differences:
//   fd = (loss(w + step) - loss(w - step)) / (2 * step)
// loss_fn must rebuild its graph from the same parameter nodes on every call.
// Per parameter tensor, rel err = max|analytic - fd| / max(|analytic|_inf,
// |fd|_inf, floor); the report keeps the worst tensor.
// The floor sits well above the difference-quotient noise for O(1) losses
// (~eps*loss/step ~ 1e-12): parameters with structurally zero gradients, like
// attention key biases or position rows past the clip length, read as noise in
// the fd column and must not fail the ratio.
GradCheckReport check_gradients(const std::function<ad::Var()>& loss_fn,
                                const std::vector<std::pair<std::string, ad::Var>>& params,
                                double step = 1e-4, double floor = 1e-6);

}  // namespace p3d
