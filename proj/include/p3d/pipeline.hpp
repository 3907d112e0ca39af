#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p3d/diffusion.hpp"
#include "p3d/interpolation.hpp"
#include "p3d/layers.hpp"
#include "p3d/tensor.hpp"
#include "p3d/unet.hpp"

namespace p3d {

// ----- resampling helpers for the super-resolution stages -----

// Catmull-Rom 2x upsample of the trailing two axes (any rank >= 2, edges
// clamped). Constants pass through unchanged.
Tensor upsample_bicubic2(const Tensor& x);

// 2x2 box average over the trailing two axes; both must be even.
Tensor downsample_box2(const Tensor& x);

// Concatenation along axis 1; shapes must agree everywhere else.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// 64-bit FNV-1a over a file's bytes; stage fingerprints in run manifests.
uint64_t fnv1a_file(const std::string& path);

// ----- toy text and image embeddings -----

struct TextEmbedding {
    std::vector<int> tokens;
    Tensor pooled;  // (dim)
};

struct ImageEmbedding {
    Tensor vector;  // (dim), unit norm
};

// The caption language is tiny: palette colors, shape names, and the motion
// words. Index 0 is the unknown-word slot.
std::vector<std::string> toy_vocabulary();

// One learned vector per vocabulary word; a string embeds as the mean of its
// token vectors, so token order changes tokens but never the pooled value.
struct TextEncoder {
    std::vector<std::string> vocab;
    ad::Var table;  // (dim, vocab), one column per word

    TextEncoder(int dim, Rng& rng);
    int dim() const { return table->value.dim(0); }
    int token_index(const std::string& word) const;          // 0 when unknown
    std::vector<int> tokenize(const std::string& s) const;   // empty -> invalid_argument
    TextEmbedding encode(const std::string& s) const;
    ad::Var pool(const std::vector<int>& tokens) const;      // (1,dim), on the tape
    ParamMap params() const;
};

// Small conv tower, global average pool, dense head, unit sphere. Stands in
// for a pretrained frame embedder and trains jointly with the image decoder
// through the conditioning path. Input is shifted so the background sits at
// zero before the first conv; pooled features then measure the foreground.
struct ImageEncoder {
    int res = 16;  // power of two, >= 8
    Conv2D c1, c2;
    Dense head;

    ImageEncoder(int res, int dim, Rng& rng);
    int dim() const { return head.out(); }
    ad::Var forward(const ad::Var& frames) const;  // (N,3,res,res) -> (N,dim) unit rows
    Tensor encode(const Tensor& frames) const;     // graph-free
    ParamMap params() const;
};

// Deterministic two-layer map from (pooled text, seeded noise) onto the image
// embedding sphere.
struct PriorNet {
    int noise_dim = 8;
    Dense fc1, fc2;

    PriorNet(int text_dim, int noise_dim, int hidden, int out_dim, Rng& rng);
    int text_dim() const { return fc1.in() - noise_dim; }
    int out_dim() const { return fc2.out(); }
    ad::Var forward(const ad::Var& pooled_and_noise) const;  // (N, text+noise) -> unit rows
    ParamMap params() const;
};

ImageEmbedding prior_generate(const PriorNet& prior, const TextEmbedding& xe, uint64_t seed);

// The prior ships with the text table it was trained against.
struct PriorStage {
    TextEncoder text;
    PriorNet map;

    PriorStage(int text_dim, int noise_dim, int hidden, int out_dim, Rng& rng);
    ParamMap params() const;  // "text.*" and "map.*"
};

void save_prior_stage(const PriorStage& stage, const std::string& path);
PriorStage load_prior_stage(const std::string& path);
void save_image_encoder(const ImageEncoder& enc, const std::string& path);
ImageEncoder load_image_encoder(const std::string& path);

// ----- the staged generation chain -----

struct PipelineConfig {
    // checkpoint paths, one per stage
    std::string prior;
    std::string decoder;
    std::string interp;
    std::string sr_l_t;
    std::string sr_h;
    std::string image_encoder;  // frame embedder (animation / variation inputs)

    std::vector<int> resolutions = {16, 32, 64};  // strictly doubling
    int frames = 16;  // decoder clip length
    int skip = 5;     // interpolation spread; output frames = (frames-1)*skip+1
    int fps = 4;      // default rate when a caller names none
    uint64_t seed = 0;

    int output_frames() const { return (frames - 1) * skip + 1; }
};

struct StageId {
    std::string name;
    std::string path;
    uint64_t checksum = 0;  // FNV-1a of the checkpoint file
};

struct Pipeline {
    PipelineConfig cfg;
    PriorStage prior;
    ImageEncoder encoder;
    UNetModel decoder;
    UNetModel interp;
    UNetModel sr_l_t;
    UNetModel sr_h;
    NoiseSchedule ns;
    std::vector<StageId> stages;

    // Loads every stage and cross-checks the neighbors (channel widths,
    // embedding dims, frame capacity, resolution chain). Errors name both
    // sides of the disagreement.
    static Pipeline load(const PipelineConfig& cfg);
};

// Per-call knobs. Stage toggles exist so each stage's frame and resolution
// contribution can be measured on its own; step counts trade fidelity for
// time on the reverse passes.
struct GenerateOptions {
    bool run_interp = true;
    bool run_sr_l = true;
    bool run_sr_h = true;
    int decoder_steps = 18;
    int interp_steps = 12;
    int sr_steps = 8;
    double guidance_scale = 1.0;
};

struct GenerationResult {
    ImageEmbedding embedding;  // the condition the chain ran under
    Tensor decoded;            // (1,3,F,r0,r0)
    Tensor interpolated;       // after frame spreading (empty when the stage is off)
    Tensor upsampled;          // after the spatiotemporal 2x stage (empty when off)
    Tensor video;              // final output
    std::string manifest;      // line-oriented run record; wall_ms is its only
                               // nondeterministic line
};

// text -> prior -> decoder -> frame interpolation -> spatiotemporal 2x ->
// per-frame 2x with shared noise. fps is conditioning and metadata only; no
// stage resamples it.
GenerationResult generate(const Pipeline& p, const std::string& text, int fps, uint64_t seed,
                          const GenerateOptions& opt = {});

// One given frame, extrapolated to a cfg.frames clip at decoder resolution.
// Frame 0 of the result is the input image, bit for bit. text is recorded in
// the manifest; the condition comes from the image itself.
GenerationResult animate_image(const Pipeline& p, const Tensor& image, const std::string& text,
                               int fps, uint64_t seed, const GenerateOptions& opt = {});

// Mean of the per-frame embeddings (renormalized) conditions a fresh run of
// the full chain.
GenerationResult video_variation(const Pipeline& p, const Tensor& video, uint64_t seed,
                                 const GenerateOptions& opt = {});

// One super-resolution stage on its own: denoise at 2x conditioned on the
// bicubic upsample via extra input channels. per_frame runs a 2D model on
// every frame independently (opt.shared_frame_noise then reuses one noise
// image across frames); otherwise the model sees the whole clip.
Tensor sr_sample(const UNetModel& model, const NoiseSchedule& ns, const Tensor& lo, double fps,
                 const SamplerOptions& opt, bool per_frame);

}  // namespace p3d
