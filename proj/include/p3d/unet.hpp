#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "p3d/layers.hpp"

namespace p3d {

enum class ModelMode { image2d, video3d };

std::string mode_name(ModelMode m);
ModelMode mode_from_name(const std::string& s);

struct UNetConfig {
    ModelMode mode = ModelMode::image2d;
    int in_channels = 3;
    int out_channels = 3;
    int base_channels = 16;
    std::vector<int> channel_mult = {1, 2};  // nondecreasing
    std::vector<int> attn_levels = {1};      // levels whose blocks attend; mid always does
    int heads = 2;
    int cond_input_dim = 0;  // width of the conditioning vector (0: unconditional)
    int cond_dim = 0;        // width of one cross-attention token
    int cond_tokens = 4;
    int emb_dim = 64;        // step/fps embedding width
    int max_frames = 76;
    int temporal_kernel = 3;

    void validate() const;  // throws ConfigError
    int levels() const { return static_cast<int>(channel_mult.size()); }
    int level_channels(int level) const { return base_channels * channel_mult[level]; }
    bool has_attn(int level) const;
    bool conditional() const { return cond_input_dim > 0; }
    int cross_dim() const { return conditional() ? cond_dim : 0; }
};

// norm -> silu -> conv, add the per-sample embedding per channel,
// norm -> silu -> conv, plus a skip (1x1 conv when widths differ)
struct ResBlock {
    GroupNormMod norm1;
    P3DConv conv1;
    Dense emb;  // emb_dim -> out_ch
    GroupNormMod norm2;
    P3DConv conv2;
    std::optional<P3DConv> skip;

    ResBlock(int in_ch, int out_ch, int emb_dim, Rng& rng);
    ad::Var forward(const ad::Var& x, const ad::Var& e) const;
    void add_temporal(int kt);
    void collect(ParamMap& pm, const std::string& prefix) const;
};

struct UNetModel {
    UNetConfig cfg;

    CondEmbedding time_embed;
    std::optional<CondEmbedding> fps_embed;  // video mode only
    std::optional<Dense> cond_proj;          // cond_input_dim -> cond_tokens * cond_dim

    P3DConv stem;
    std::vector<ResBlock> down_res;
    std::vector<std::optional<P3DAttention>> down_attn;
    ResBlock mid_res1;
    P3DAttention mid_attn;
    ResBlock mid_res2;
    std::vector<ResBlock> up_res;  // indexed by level, applied deepest first
    std::vector<std::optional<P3DAttention>> up_attn;
    GroupNormMod out_norm;
    P3DConv out_conv;  // zero init so the net starts out predicting zeros

    UNetModel(const UNetConfig& cfg, Rng& rng);
    UNetModel(UNetModel&&) = default;
    UNetModel& operator=(UNetModel&&) = default;
    UNetModel(const UNetModel&) = delete;
    UNetModel& operator=(const UNetModel&) = delete;

    // x: (B,C,H,W) in image mode, (B,C,F,H,W) in video mode.
    // t: one diffusion step per sample. fps: per sample, video mode only
    // (missing fps there is an error, not a default). cond: (B, cond_input_dim).
    // skip_temporal_attn lets tests measure the temporal attention contribution.
    ad::Var forward(const ad::Var& x, const std::vector<double>& t,
                    const std::vector<double>& fps, const ad::Var* cond,
                    bool skip_temporal_attn = false) const;

    ParamMap params() const;
    int64_t param_count() const;
};

// Copies every spatial weight bit for bit and starts the new temporal pieces
// at identity (convs) or zero contribution (attention projections, position
// rows, fps embedding output), so the video net evaluated on any clip equals
// the image net applied to each frame separately.
UNetModel inflate_to_video(const UNetModel& image, Rng& rng);

// Grows the stem to accept extra input channels; new weight slices are zero so
// outputs are unchanged when the added channels are fed zeros.
void widen_input_channels(UNetModel& model, int new_in_channels);

}  // namespace p3d
