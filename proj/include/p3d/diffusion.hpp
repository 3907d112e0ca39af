#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "p3d/rng.hpp"
#include "p3d/tensor.hpp"
#include "p3d/unet.hpp"

namespace p3d {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta, alpha, alpha_bar;

    // beta ramps linearly from lo to hi over T steps; alpha_bar is validated
    // strictly decreasing in (0,1)
    static NoiseSchedule linear(int T = 1000, double lo = 1e-4, double hi = 2e-2);
};

// x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise,
// with one step index per sample along dim 0 (or one step for the whole tensor)
Tensor q_sample(const Tensor& x0, const std::vector<int>& t, const Tensor& noise,
                const NoiseSchedule& ns);
Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& ns);

// One noise-prediction training step: draws a step index and noise per sample,
// noises x0, and returns the mean squared error between the model's prediction
// and the drawn noise. cond_dropout (for guidance training) zeroes the
// conditioning row of a sample with that probability. Throws NumericError with
// the step context when the loss stops being finite; global_step is only used
// to label that error.
ad::Var training_loss(const UNetModel& model, const NoiseSchedule& ns, const Tensor& x0,
                      const ad::Var* cond, const std::vector<double>& fps, Rng& rng,
                      double cond_dropout = 0.0, int global_step = -1);

// Step indices for sampling: all of T-1..0, or a strided subsequence of
// `count` of them (first T-1, last 0, strictly decreasing).
std::vector<int> full_steps(int T);
std::vector<int> strided_steps(int T, int count);

struct SamplerOptions {
    std::vector<int> steps;  // empty means full_steps(ns.T)
    uint64_t seed = 0;
    bool shared_frame_noise = false;  // rank-5 only: one noise image per clip, repeated over F
    double guidance_scale = 1.0;      // 1 = plain conditional sampling (model wrapper only)
    // Runs after every transition with the step the state now sits at
    // (-1 once it is the clean output); used to re-impose known frames.
    std::function<void(Tensor&, int)> post_step;
};

using EpsFn = std::function<Tensor(const Tensor& x, double t)>;

// Ancestral sampling along opt.steps. Each batch element consumes its own RNG
// stream keyed by (seed, element index), so a trajectory does not depend on
// the batch it rides in. The clean-data estimate is clamped to [-1,1] inside
// every transition (imperfect predictors stay near the data range instead of
// compounding); the final output is clamped the same way, and values are
// checked finite before the clamp.
Tensor ddpm_sample(const EpsFn& eps, const NoiseSchedule& ns, const Shape& shape,
                   const SamplerOptions& opt);

// Model-driven wrapper; fps applies in video mode, cond when the model is
// conditional. guidance_scale != 1 mixes the conditional prediction with a
// zero-conditioning one (needs a conditional model).
Tensor ddpm_sample(const UNetModel& model, const NoiseSchedule& ns, const Shape& shape,
                   const Tensor* cond, const std::vector<double>& fps, const SamplerOptions& opt);

}  // namespace p3d
