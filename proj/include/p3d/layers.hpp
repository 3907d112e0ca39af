#pragma once

#include <optional>
#include <string>
#include <vector>

#include "p3d/autodiff.hpp"
#include "p3d/rng.hpp"

namespace p3d {

// Named parameter registry; names are stable hierarchical paths used by
// checkpoints and the optimizer.
struct ParamMap {
    std::vector<std::pair<std::string, ad::Var>> items;

    void add(const std::string& name, const ad::Var& v);
    ad::Var find(const std::string& name) const;  // nullptr when absent
    int64_t total_elements() const;
};

// Largest divisor of channels that is <= min(8, channels/4), so every group
// spans at least 4 channels. Per-channel groups would cancel the additive
// step/fps conditioning against the group mean.
int norm_groups_for(int channels);

struct Dense {
    ad::Var W, b;  // W: (out, in)

    Dense() = default;
    Dense(int in, int out, Rng& rng);
    ad::Var operator()(const ad::Var& x) const { return ad::linear(x, W, b); }
    int in() const { return W->value.dim(1); }
    int out() const { return W->value.dim(0); }
    void collect(ParamMap& pm, const std::string& prefix) const;
};

void zero_init(Dense& d);

struct Conv2D {
    ad::Var W, b;  // W: (out, in, k, k), stride 1, same zero padding

    Conv2D() = default;
    Conv2D(int in, int out, int k, Rng& rng);
    ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, W, b); }
    int in() const { return W->value.dim(1); }
    int out() const { return W->value.dim(0); }
    int kernel() const { return W->value.dim(2); }
    void collect(ParamMap& pm, const std::string& prefix) const;
};

// 1D conv along the frame axis; input and output channels are equal so it can
// start as an exact identity.
struct TemporalConv1D {
    ad::Var W, b;  // W: (ch, ch, kt), same zero padding

    TemporalConv1D() = default;
    TemporalConv1D(int ch, int kt, Rng& rng);  // random init
    ad::Var operator()(const ad::Var& x) const { return ad::conv1d(x, W, b); }
    int channels() const { return W->value.dim(0); }
    int kernel() const { return W->value.dim(2); }
    void collect(ParamMap& pm, const std::string& prefix) const;
};

// Center tap = identity matrix, everything else (including bias) zero, so the
// layer forwards each frame unchanged. Rejects even kernels.
void init_temporal_identity(TemporalConv1D& conv);

struct GroupNormMod {
    ad::Var gamma, beta;
    int groups = 1;

    GroupNormMod() = default;
    explicit GroupNormMod(int channels);
    // Rank-5 input is normalized per frame (stats never pool across time), so
    // the result on a video equals the image path applied frame by frame.
    ad::Var operator()(const ad::Var& x) const;
    void collect(ParamMap& pm, const std::string& prefix) const;
};

// Factorized space-time conv: the 2D conv runs per frame on the spatial-batch
// view, then the 1D conv runs per location on the temporal-batch view. Without
// the temporal piece it is a plain per-frame conv (image mode).
struct P3DConv {
    Conv2D spatial;
    std::optional<TemporalConv1D> temporal;

    P3DConv() = default;
    P3DConv(int in, int out, int k, Rng& rng) : spatial(in, out, k, rng) {}

    // x: (N,C,H,W) image batch, or (B,C,F,H,W) video
    ad::Var operator()(const ad::Var& x) const;
    void add_temporal(int kt);  // identity init
    void collect(ParamMap& pm, const std::string& prefix) const;
};

// Multi-head attention over (N, T, C) token sequences. Keys/values may come
// from a separate context sequence (cross-attention).
struct MultiHeadAttn {
    Dense q, k, v, proj;
    int heads = 1;

    MultiHeadAttn() = default;
    MultiHeadAttn(int dim, int ctx_dim, int heads, Rng& rng);
    ad::Var operator()(const ad::Var& tokens) const { return run(tokens, tokens); }
    ad::Var run(const ad::Var& tokens, const ad::Var& ctx) const;
    void collect(ParamMap& pm, const std::string& prefix) const;
};

// Factorized space-time attention. Sub-blocks are pre-normed and residual:
//   spatial self-attention over H*W tokens per frame,
//   optional cross-attention against conditioning tokens (spatial block only),
//   temporal self-attention over F tokens per location, with learned absolute
//   position rows added to its input only.
// The temporal output projection starts at zero so a freshly inflated layer
// contributes nothing beyond the spatial pass.
struct P3DAttention {
    int channels = 0;

    GroupNormMod norm_s;
    MultiHeadAttn attn_s;

    bool has_cross = false;
    GroupNormMod norm_c;
    MultiHeadAttn attn_c;

    bool has_temporal = false;
    GroupNormMod norm_t;
    MultiHeadAttn attn_t;
    ad::Var pos_table;  // (max_frames, C), zero init

    P3DAttention() = default;
    P3DAttention(int channels, int heads, int cond_dim, Rng& rng);  // cond_dim 0: no cross slot

    void add_temporal(int max_frames, Rng& rng);
    // x: (N,C,H,W) or (B,C,F,H,W); cond: (B, n_ctx, cond_dim) tokens or null.
    // skip_temporal exists so tests can measure the temporal branch contribution.
    ad::Var forward(const ad::Var& x, const ad::Var* cond, bool skip_temporal = false) const;
    void collect(ParamMap& pm, const std::string& prefix) const;
};

// Scalar conditioning (timestep, fps) -> sinusoidal features -> 2-layer MLP.
struct CondEmbedding {
    int dim = 0;
    Dense fc1, fc2;

    CondEmbedding() = default;
    CondEmbedding(int dim, Rng& rng);
    ad::Var operator()(const std::vector<double>& values) const;
    void collect(ParamMap& pm, const std::string& prefix) const;
};

// Half sines, half cosines over log-spaced frequencies (10000^-i), one row per
// value.
Tensor sinusoidal_embedding(const std::vector<double>& values, int dim);

// fps outside [1, 30] is clamped with a warning on stderr.
double clamp_fps(double fps);

}  // namespace p3d
