#pragma once

#include <string>
#include <vector>

#include "p3d/diffusion.hpp"
#include "p3d/tensor.hpp"
#include "p3d/unet.hpp"

namespace p3d {

enum class MaskedOrigin { interpolation, extrapolate_pre, extrapolate_post, image_animation };

std::string origin_name(MaskedOrigin o);

// A clip in which some frames are given and the rest are to be generated.
// frames holds the given frames at their positions and exact zeros elsewhere;
// mask is (B,1,F,H,W), one constant {0,1} plane per frame, 1 = frame given.
struct MaskedClip {
    Tensor frames;  // (B,C,F,H,W)
    Tensor mask;    // (B,1,F,H,W)
    int skip = 1;
    MaskedOrigin origin = MaskedOrigin::interpolation;

    int given_count() const;  // number of given frames (mask pattern is batch-wide)
    void validate() const;    // throws on any broken invariant above
};

// Spreads the F given frames over (F-1)*skip + 1 slots, placing them at
// multiples of skip; everything between is masked. Needs F >= 2, skip >= 1.
MaskedClip make_masked_input(const Tensor& given, int skip);

// Keeps the given block intact and masks `count` new frames before (pre) or
// after (post/image-animation) it. count == 0 yields an all-given clip.
MaskedClip make_extrapolation_input(const Tensor& given, MaskedOrigin direction, int count);

// Channel layout the masked model consumes: [x | given frames | mask],
// C + C + 1 channels.
Tensor assemble_masked_channels(const Tensor& x, const MaskedClip& clip);

// Overwrites x at every given position with the given frame values.
void impose_given_frames(Tensor& x, const MaskedClip& clip);

// Copies a trained clip model and widens its first conv from C to 2C+1 input
// channels. The new weight slices start at zero, so on [x | 0 | 0] the wide
// model reproduces the original to the last bit; training then wakes the
// masked-frame and mask channels.
UNetModel finetune_interp_from_decoder(const UNetModel& decoder);

// Diffusion sampling steered by the given frames: the model sees
// [x_t | given | mask] at every step, and the given frames are re-imposed
// after every transition, so they reach the output verbatim. cond is the
// per-sample conditioning row for conditional models (nullptr otherwise);
// opt.guidance_scale mixes against a zero-conditioning prediction as usual.
Tensor interpolate(const UNetModel& model, const NoiseSchedule& ns, const MaskedClip& clip,
                   double fps, const SamplerOptions& opt, const Tensor* cond = nullptr);

// Extends a clip by `count` generated frames before or after the given block.
// count == 0 is the identity.
Tensor extrapolate(const UNetModel& model, const NoiseSchedule& ns, const Tensor& given,
                   MaskedOrigin direction, int count, double fps, const SamplerOptions& opt,
                   const Tensor* cond = nullptr);

// Draws one training mask for a batch of full clips: uniformly an
// interpolation pattern (skip from {2,3,5}, restricted to divisors of F-1 so
// the first and last frames stay given) or a pre/post block with a uniform
// given count. The pattern is shared across the batch.
MaskedClip sample_training_mask(const Tensor& clips, Rng& rng);

// Noise-prediction loss for the masked task: noises the full clip, assembles
// [x_t | given | mask], and scores the model's prediction against the drawn
// noise on every frame. global_step only labels divergence errors.
ad::Var masked_training_loss(const UNetModel& model, const NoiseSchedule& ns, const Tensor& x0,
                             const MaskedClip& clip, const ad::Var* cond,
                             const std::vector<double>& fps, Rng& rng, int global_step = -1);

}  // namespace p3d
