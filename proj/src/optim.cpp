#include "p3d/optim.hpp"

#include <cmath>

namespace p3d {

Adam::Adam(const ParamMap& params, double lr_) : lr(lr_) {
    slots_.reserve(params.items.size());
    for (const auto& [_, var] : params.items) {
        Slot s;
        s.param = var;
        s.m.assign(static_cast<size_t>(var->value.numel()), 0.0);
        s.v.assign(static_cast<size_t>(var->value.numel()), 0.0);
        slots_.push_back(std::move(s));
    }
}

void Adam::zero_grad() {
    for (auto& s : slots_) s.param->zero_grad();
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
        double* w = s.param->value.data.data();
        const bool untouched = s.param->grad.data.empty();  // not in this graph: g = 0
        const double* g = untouched ? nullptr : s.param->grad.data.data();
        for (size_t i = 0; i < s.m.size(); ++i) {
            const double gi = untouched ? 0.0 : g[i];
            s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * gi;
            s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * gi * gi;
            w[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
        }
    }
}

}  // namespace p3d
