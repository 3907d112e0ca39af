#include "p3d/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "p3d/errors.hpp"

namespace p3d {

NoiseSchedule NoiseSchedule::linear(int T, double lo, double hi) {
    if (T < 1) throw ConfigError("schedule needs at least one step");
    if (!(lo > 0.0) || !(hi < 1.0) || lo > hi)
        throw ConfigError("beta range must satisfy 0 < lo <= hi < 1");
    NoiseSchedule ns;
    ns.T = T;
    ns.beta.resize(T);
    ns.alpha.resize(T);
    ns.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        ns.beta[t] = T == 1 ? lo : lo + (hi - lo) * t / (T - 1);
        ns.alpha[t] = 1.0 - ns.beta[t];
        prod *= ns.alpha[t];
        ns.alpha_bar[t] = prod;
        if (!(ns.alpha_bar[t] > 0.0 && ns.alpha_bar[t] < 1.0))
            throw ConfigError("alpha_bar left (0,1) at step " + std::to_string(t));
        if (t > 0 && ns.alpha_bar[t] >= ns.alpha_bar[t - 1])
            throw ConfigError("alpha_bar must decrease strictly");
    }
    return ns;
}

namespace {

void check_t(int t, const NoiseSchedule& ns) {
    if (t < 0 || t >= ns.T)
        throw std::invalid_argument("step " + std::to_string(t) + " outside [0," +
                                    std::to_string(ns.T) + ")");
}

}  // namespace

Tensor q_sample(const Tensor& x0, const std::vector<int>& t, const Tensor& noise,
                const NoiseSchedule& ns) {
    if (!x0.same_shape(noise)) throw ShapeError("x0 and noise must share a shape");
    if (static_cast<int>(t.size()) != x0.dim(0))
        throw ShapeError("need one step index per sample");
    Tensor out(x0.shape);
    const int64_t per = x0.numel() / x0.dim(0);
    for (int b = 0; b < x0.dim(0); ++b) {
        check_t(t[b], ns);
        const double ab = ns.alpha_bar[t[b]];
        const double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
        for (int64_t i = b * per; i < (b + 1) * per; ++i)
            out[i] = cs * x0[i] + cn * noise[i];
    }
    return out;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& ns) {
    return q_sample(x0, std::vector<int>(x0.dim(0), t), noise, ns);
}

ad::Var training_loss(const UNetModel& model, const NoiseSchedule& ns, const Tensor& x0,
                      const ad::Var* cond, const std::vector<double>& fps, Rng& rng,
                      double cond_dropout, int global_step) {
    const int B = x0.dim(0);
    std::vector<int> t(B);
    std::vector<double> td(B);
    for (int b = 0; b < B; ++b) {
        t[b] = rng.uniform_int(0, ns.T - 1);
        td[b] = t[b];
    }
    Tensor noise(x0.shape);
    rng.fill_normal(noise);
    Tensor xt = q_sample(x0, t, noise, ns);

    ad::Var dropped;
    const ad::Var* used = cond;
    if (cond && cond_dropout > 0.0) {
        Tensor mask((*cond)->value.shape);
        const int64_t width = mask.numel() / mask.dim(0);
        for (int b = 0; b < mask.dim(0); ++b) {
            const double keep = rng.uniform() < cond_dropout ? 0.0 : 1.0;
            for (int64_t i = 0; i < width; ++i) mask[b * width + i] = keep;
        }
        dropped = ad::mul(*cond, ad::constant(mask));
        used = &dropped;
    }

    ad::Var pred = model.forward(ad::constant(xt), td, fps, used);
    ad::Var loss = ad::mse(pred, noise);
    if (!std::isfinite(loss->value[0])) {
        std::string where =
            global_step >= 0 ? " at training step " + std::to_string(global_step) : "";
        throw NumericError("training loss is not finite" + where);
    }
    return loss;
}

std::vector<int> full_steps(int T) {
    std::vector<int> s(T);
    for (int i = 0; i < T; ++i) s[i] = T - 1 - i;
    return s;
}

std::vector<int> strided_steps(int T, int count) {
    if (count < 1 || count > T) throw ConfigError("strided step count must be in [1,T]");
    if (count == 1) return {0};
    std::vector<int> s(count);
    for (int i = 0; i < count; ++i)
        s[i] = static_cast<int>(static_cast<int64_t>(T - 1) * (count - 1 - i) / (count - 1));
    return s;
}

namespace {

// draws one sample's worth of noise; shared repeats one image across frames
void fill_sample_noise(Tensor& x, int b, Rng& rng, bool shared) {
    const int64_t per = x.numel() / x.dim(0);
    double* base = x.data.data() + b * per;
    if (!shared) {
        for (int64_t i = 0; i < per; ++i) base[i] = rng.normal();
        return;
    }
    const int C = x.dim(1), F = x.dim(2);
    const int64_t hw = static_cast<int64_t>(x.dim(3)) * x.dim(4);
    for (int c = 0; c < C; ++c)
        for (int64_t i = 0; i < hw; ++i) {
            const double v = rng.normal();
            for (int f = 0; f < F; ++f) base[(static_cast<int64_t>(c) * F + f) * hw + i] = v;
        }
}

void check_steps(const std::vector<int>& steps, const NoiseSchedule& ns) {
    if (steps.empty()) throw ConfigError("sampler needs at least one step");
    for (size_t i = 0; i < steps.size(); ++i) {
        check_t(steps[i], ns);
        if (i > 0 && steps[i] >= steps[i - 1])
            throw ConfigError("sampler steps must decrease strictly");
    }
}

}  // namespace

Tensor ddpm_sample(const EpsFn& eps, const NoiseSchedule& ns, const Shape& shape,
                   const SamplerOptions& opt) {
    if (shape.size() != 4 && shape.size() != 5)
        throw ShapeError("sampling wants an image or video shape");
    if (opt.shared_frame_noise && shape.size() != 5)
        throw ConfigError("shared frame noise only makes sense for clips");
    const std::vector<int> steps = opt.steps.empty() ? full_steps(ns.T) : opt.steps;
    check_steps(steps, ns);

    const int B = shape[0];
    std::vector<Rng> streams;
    streams.reserve(B);
    for (int b = 0; b < B; ++b) streams.emplace_back(opt.seed, static_cast<uint64_t>(b));

    Tensor x(shape);
    for (int b = 0; b < B; ++b) fill_sample_noise(x, b, streams[b], opt.shared_frame_noise);

    Tensor z(shape);
    const size_t K = steps.size();
    for (size_t i = 0; i < K; ++i) {
        const int t = steps[i];
        Tensor e = eps(x, t);
        if (!e.same_shape(x)) throw ShapeError("noise prediction shape mismatch");
        const double ab_t = ns.alpha_bar[t];
        const double inv_sab = 1.0 / std::sqrt(ab_t);
        const double cn = std::sqrt(1.0 - ab_t);

        if (i + 1 == K) {
            for (int64_t j = 0; j < x.numel(); ++j) x[j] = inv_sab * (x[j] - cn * e[j]);
            if (!all_finite(x))
                throw NumericError("sampling diverged at final step " + std::to_string(t));
            for (double& v : x.data) v = std::clamp(v, -1.0, 1.0);
            if (opt.post_step) opt.post_step(x, -1);
            break;
        }

        const int s = steps[i + 1];
        const double ab_s = ns.alpha_bar[s];
        const double a_ts = ab_t / ab_s;   // product of alphas over (s, t]
        const double b_ts = 1.0 - a_ts;
        const double c0 = std::sqrt(ab_s) * b_ts / (1.0 - ab_t);
        const double ct = std::sqrt(a_ts) * (1.0 - ab_s) / (1.0 - ab_t);
        const double sigma = std::sqrt(b_ts * (1.0 - ab_s) / (1.0 - ab_t));

        for (int b = 0; b < B; ++b) fill_sample_noise(z, b, streams[b], opt.shared_frame_noise);
        for (int64_t j = 0; j < x.numel(); ++j) {
            // the clean-data estimate is thresholded to the data range before
            // it enters the posterior mean; an imperfect predictor would
            // otherwise walk the trajectory off the data manifold and the
            // errors compound across the remaining steps
            const double x0hat =
                std::clamp(inv_sab * (x[j] - cn * e[j]), -1.0, 1.0);
            x[j] = c0 * x0hat + ct * x[j] + sigma * z[j];
        }
        if (!all_finite(x)) throw NumericError("sampling diverged at step " + std::to_string(s));
        if (opt.post_step) opt.post_step(x, s);
    }
    return x;
}

Tensor ddpm_sample(const UNetModel& model, const NoiseSchedule& ns, const Shape& shape,
                   const Tensor* cond, const std::vector<double>& fps,
                   const SamplerOptions& opt) {
    ad::NoGradGuard quiet;
    const int B = shape.empty() ? 0 : shape[0];
    const bool guided = opt.guidance_scale != 1.0;
    if (guided && !model.cfg.conditional())
        throw ConfigError("guidance needs a conditional model");

    ad::Var cv, zero_cv;
    if (cond) cv = ad::constant(*cond);
    if (guided) zero_cv = ad::constant(Tensor::zeros({B, model.cfg.cond_input_dim}));

    EpsFn fn = [&](const Tensor& x, double t) {
        const std::vector<double> tv(static_cast<size_t>(B), t);
        Tensor out = model.forward(ad::constant(x), tv, fps, cond ? &cv : nullptr)->value;
        if (guided) {
            Tensor base = model.forward(ad::constant(x), tv, fps, &zero_cv)->value;
            const double w = opt.guidance_scale;
            for (int64_t j = 0; j < out.numel(); ++j)
                out[j] = base[j] + w * (out[j] - base[j]);
        }
        return out;
    };
    return ddpm_sample(fn, ns, shape, opt);
}

}  // namespace p3d
