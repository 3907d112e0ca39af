#pragma once

#include <utility>
#include <vector>

#include "p3d/layers.hpp"

namespace p3d {

// Adam with bias correction. Holds one first/second moment buffer per
// parameter tensor; step() consumes whatever gradients backward() left behind.
struct Adam {
    double lr;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit Adam(const ParamMap& params, double lr = 1e-3);

    void zero_grad();
    void step();

  private:
    struct Slot {
        ad::Var param;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

}  // namespace p3d
