#include "p3d/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace p3d {

GradCheckReport check_gradients(const std::function<ad::Var()>& loss_fn,
                                const std::vector<std::pair<std::string, ad::Var>>& params,
                                double step, double floor) {
    for (const auto& [name, p] : params) p->zero_grad();
    ad::Var loss = loss_fn();
    ad::backward(loss);

    GradCheckReport report;
    for (const auto& [name, p] : params) {
        Tensor analytic = p->grad.data.empty() ? Tensor(p->value.shape) : p->grad;
        double num = 0.0, den = floor;
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            const double saved = p->value[i];
            double lp, lm;
            {
                ad::NoGradGuard ng;
                p->value[i] = saved + step;
                lp = loss_fn()->value[0];
                p->value[i] = saved - step;
                lm = loss_fn()->value[0];
            }
            p->value[i] = saved;
            const double fd = (lp - lm) / (2.0 * step);
            num = std::max(num, std::fabs(analytic[i] - fd));
            den = std::max({den, std::fabs(analytic[i]), std::fabs(fd)});
            ++report.checked_elements;
        }
        const double rel = num / den;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_param = name;
        }
    }
    return report;
}

}  // namespace p3d
