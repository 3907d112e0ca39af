#include "p3d/interpolation.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "p3d/autodiff.hpp"
#include "p3d/errors.hpp"

namespace p3d {

std::string origin_name(MaskedOrigin o) {
    switch (o) {
        case MaskedOrigin::interpolation: return "interpolation";
        case MaskedOrigin::extrapolate_pre: return "extrapolate-pre";
        case MaskedOrigin::extrapolate_post: return "extrapolate-post";
        case MaskedOrigin::image_animation: return "image-animation";
    }
    throw ConfigError("unknown masked-clip origin");
}

namespace {

void check_clip_rank(const Tensor& t) {
    if (t.rank() != 5) throw ShapeError("masked clips are (B,C,F,H,W) tensors");
    for (int d = 0; d < 5; ++d)
        if (t.dim(d) < 1) throw ShapeError("masked clip dims must be positive");
}

// frame index -> is the frame given, shared by construction across the batch
std::vector<bool> frame_pattern(const MaskedClip& clip) {
    const int F = clip.mask.dim(2);
    const int64_t hw = static_cast<int64_t>(clip.mask.dim(3)) * clip.mask.dim(4);
    std::vector<bool> given(F);
    for (int f = 0; f < F; ++f) given[f] = clip.mask[f * hw] == 1.0;
    return given;
}

MaskedClip from_pattern(const Tensor& full, const std::vector<bool>& given, int skip,
                        MaskedOrigin origin) {
    MaskedClip clip;
    clip.skip = skip;
    clip.origin = origin;
    clip.frames = Tensor::zeros(full.shape);
    const int B = full.dim(0), C = full.dim(1), F = full.dim(2);
    const int64_t hw = static_cast<int64_t>(full.dim(3)) * full.dim(4);
    clip.mask = Tensor::zeros({B, 1, F, full.dim(3), full.dim(4)});
    for (int b = 0; b < B; ++b)
        for (int f = 0; f < F; ++f) {
            if (!given[f]) continue;
            for (int c = 0; c < C; ++c) {
                const int64_t at = ((static_cast<int64_t>(b) * C + c) * F + f) * hw;
                for (int64_t i = 0; i < hw; ++i) clip.frames[at + i] = full[at + i];
            }
            const int64_t mat = (static_cast<int64_t>(b) * F + f) * hw;
            for (int64_t i = 0; i < hw; ++i) clip.mask[mat + i] = 1.0;
        }
    return clip;
}

}  // namespace

int MaskedClip::given_count() const {
    int n = 0;
    for (bool g : frame_pattern(*this)) n += g ? 1 : 0;
    return n;
}

void MaskedClip::validate() const {
    check_clip_rank(frames);
    if (skip < 1) throw ConfigError("frame skip must be at least 1");
    const Shape want{frames.dim(0), 1, frames.dim(2), frames.dim(3), frames.dim(4)};
    if (mask.shape != want) throw ShapeError("mask must be (B,1,F,H,W) matching the frames");
    const int B = frames.dim(0), C = frames.dim(1), F = frames.dim(2);
    const int64_t hw = static_cast<int64_t>(frames.dim(3)) * frames.dim(4);
    for (int b = 0; b < B; ++b)
        for (int f = 0; f < F; ++f) {
            const int64_t mat = (static_cast<int64_t>(b) * F + f) * hw;
            const double head = mask[mat];
            if (head != 0.0 && head != 1.0)
                throw ConfigError("mask must be exactly {0,1}-valued");
            for (int64_t i = 0; i < hw; ++i)
                if (mask[mat + i] != head)
                    throw ConfigError("mask must be constant within a frame");
            if (head == 1.0) continue;
            for (int c = 0; c < C; ++c) {
                const int64_t at = ((static_cast<int64_t>(b) * C + c) * F + f) * hw;
                for (int64_t i = 0; i < hw; ++i)
                    if (frames[at + i] != 0.0)
                        throw ConfigError("masked frames must be exactly zero");
            }
        }
}

MaskedClip make_masked_input(const Tensor& given, int skip) {
    check_clip_rank(given);
    if (skip < 1) throw ConfigError("frame skip must be at least 1");
    const int F = given.dim(2);
    if (F < 2) throw ConfigError("interpolation needs at least two given frames");
    const int Fw = (F - 1) * skip + 1;

    Shape wide = given.shape;
    wide[2] = Fw;
    Tensor full = Tensor::zeros(wide);
    const int B = given.dim(0), C = given.dim(1);
    const int64_t hw = static_cast<int64_t>(given.dim(3)) * given.dim(4);
    std::vector<bool> pattern(Fw, false);
    for (int f = 0; f < F; ++f) pattern[f * skip] = true;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f) {
                const int64_t src = ((static_cast<int64_t>(b) * C + c) * F + f) * hw;
                const int64_t dst =
                    ((static_cast<int64_t>(b) * C + c) * Fw + f * skip) * hw;
                for (int64_t i = 0; i < hw; ++i) full[dst + i] = given[src + i];
            }
    return from_pattern(full, pattern, skip, MaskedOrigin::interpolation);
}

MaskedClip make_extrapolation_input(const Tensor& given, MaskedOrigin direction, int count) {
    check_clip_rank(given);
    if (count < 0) throw ConfigError("extrapolation count cannot be negative");
    if (direction == MaskedOrigin::interpolation)
        throw ConfigError("extrapolation direction must be pre or post");
    const bool pre = direction == MaskedOrigin::extrapolate_pre;
    const int F = given.dim(2), Fw = F + count;

    Shape wide = given.shape;
    wide[2] = Fw;
    Tensor full = Tensor::zeros(wide);
    const int B = given.dim(0), C = given.dim(1);
    const int64_t hw = static_cast<int64_t>(given.dim(3)) * given.dim(4);
    const int at0 = pre ? count : 0;
    std::vector<bool> pattern(Fw, false);
    for (int f = 0; f < F; ++f) pattern[at0 + f] = true;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f) {
                const int64_t src = ((static_cast<int64_t>(b) * C + c) * F + f) * hw;
                const int64_t dst =
                    ((static_cast<int64_t>(b) * C + c) * Fw + at0 + f) * hw;
                for (int64_t i = 0; i < hw; ++i) full[dst + i] = given[src + i];
            }
    return from_pattern(full, pattern, 1, direction);
}

Tensor assemble_masked_channels(const Tensor& x, const MaskedClip& clip) {
    if (x.shape != clip.frames.shape)
        throw ShapeError("state and given frames must share a shape");
    const int B = x.dim(0), C = x.dim(1), F = x.dim(2);
    const int64_t hw = static_cast<int64_t>(x.dim(3)) * x.dim(4);
    const int Cw = 2 * C + 1;
    Tensor out({B, Cw, F, x.dim(3), x.dim(4)});
    const int64_t per_ch = F * hw;
    for (int b = 0; b < B; ++b) {
        double* dst = out.data.data() + static_cast<int64_t>(b) * Cw * per_ch;
        const double* sx = x.data.data() + static_cast<int64_t>(b) * C * per_ch;
        const double* sg = clip.frames.data.data() + static_cast<int64_t>(b) * C * per_ch;
        const double* sm = clip.mask.data.data() + static_cast<int64_t>(b) * per_ch;
        std::copy(sx, sx + C * per_ch, dst);
        std::copy(sg, sg + C * per_ch, dst + C * per_ch);
        std::copy(sm, sm + per_ch, dst + 2 * C * per_ch);
    }
    return out;
}

void impose_given_frames(Tensor& x, const MaskedClip& clip) {
    if (x.shape != clip.frames.shape)
        throw ShapeError("state and given frames must share a shape");
    const int B = x.dim(0), C = x.dim(1), F = x.dim(2);
    const int64_t hw = static_cast<int64_t>(x.dim(3)) * x.dim(4);
    const std::vector<bool> given = frame_pattern(clip);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f) {
                if (!given[f]) continue;
                const int64_t at = ((static_cast<int64_t>(b) * C + c) * F + f) * hw;
                for (int64_t i = 0; i < hw; ++i) x[at + i] = clip.frames[at + i];
            }
}

UNetModel finetune_interp_from_decoder(const UNetModel& decoder) {
    if (decoder.cfg.mode != ModelMode::video3d)
        throw ConfigError("masked-frame fine-tuning starts from a clip model");
    Rng scratch(0);
    UNetModel wide(decoder.cfg, scratch);
    ParamMap src = decoder.params();
    ParamMap dst = wide.params();
    for (const auto& [name, var] : src.items) {
        ad::Var home = dst.find(name);
        if (!home || !home->value.same_shape(var->value))
            throw std::logic_error("parameter layout drifted while copying " + name);
        home->value = var->value;
    }
    widen_input_channels(wide, 2 * decoder.cfg.in_channels + 1);
    return wide;
}

namespace {

void check_masked_model(const UNetModel& model, const MaskedClip& clip) {
    if (model.cfg.mode != ModelMode::video3d)
        throw ConfigError("frame interpolation needs a clip model");
    const int C = clip.frames.dim(1);
    if (model.cfg.in_channels != 2 * C + 1)
        throw ConfigError("masked assembly provides " + std::to_string(2 * C + 1) +
                          " channels but the model takes " +
                          std::to_string(model.cfg.in_channels));
    if (model.cfg.out_channels != C)
        throw ConfigError("model must predict " + std::to_string(C) + " channels");
}

}  // namespace

Tensor interpolate(const UNetModel& model, const NoiseSchedule& ns, const MaskedClip& clip,
                   double fps, const SamplerOptions& opt, const Tensor* cond) {
    clip.validate();
    check_masked_model(model, clip);
    ad::NoGradGuard quiet;
    const int B = clip.frames.dim(0);
    const std::vector<double> fv(static_cast<size_t>(B), fps);
    const bool guided = opt.guidance_scale != 1.0;
    if (guided && !model.cfg.conditional())
        throw ConfigError("guidance needs a conditional model");

    ad::Var cv, zero_cv;
    if (cond) cv = ad::constant(*cond);
    if (guided) zero_cv = ad::constant(Tensor::zeros({B, model.cfg.cond_input_dim}));

    EpsFn fn = [&](const Tensor& x, double t) {
        const std::vector<double> tv(static_cast<size_t>(B), t);
        ad::Var inp = ad::constant(assemble_masked_channels(x, clip));
        Tensor out = model.forward(inp, tv, fv, cond ? &cv : nullptr)->value;
        if (guided) {
            Tensor base = model.forward(inp, tv, fv, &zero_cv)->value;
            const double w = opt.guidance_scale;
            for (int64_t j = 0; j < out.numel(); ++j) out[j] = base[j] + w * (out[j] - base[j]);
        }
        return out;
    };

    SamplerOptions o = opt;
    const auto user = opt.post_step;
    o.post_step = [&clip, user](Tensor& x, int s) {
        impose_given_frames(x, clip);
        if (user) user(x, s);
    };
    return ddpm_sample(fn, ns, clip.frames.shape, o);
}

Tensor extrapolate(const UNetModel& model, const NoiseSchedule& ns, const Tensor& given,
                   MaskedOrigin direction, int count, double fps, const SamplerOptions& opt,
                   const Tensor* cond) {
    check_clip_rank(given);
    if (count < 0) throw ConfigError("extrapolation count cannot be negative");
    if (count == 0) return given;
    MaskedClip clip = make_extrapolation_input(given, direction, count);
    return interpolate(model, ns, clip, fps, opt, cond);
}

MaskedClip sample_training_mask(const Tensor& clips, Rng& rng) {
    check_clip_rank(clips);
    const int F = clips.dim(2);
    if (F < 2) throw ConfigError("training clips need at least two frames");

    // interpolation skips must divide F-1 so the endpoint frames stay given
    std::vector<int> skips;
    for (int s : {2, 3, 5})
        if ((F - 1) % s == 0) skips.push_back(s);

    const int mode = rng.uniform_int(0, 2);
    if (mode == 0 && !skips.empty()) {
        const int s = skips[rng.uniform_int(0, static_cast<int>(skips.size()) - 1)];
        std::vector<bool> given(F, false);
        for (int f = 0; f < F; f += s) given[f] = true;
        return from_pattern(clips, given, s, MaskedOrigin::interpolation);
    }
    const bool pre = mode == 1;
    const int keep = rng.uniform_int(1, F - 1);
    std::vector<bool> given(F, false);
    for (int f = 0; f < keep; ++f) given[pre ? F - 1 - f : f] = true;
    return from_pattern(clips, given, 1,
                        pre ? MaskedOrigin::extrapolate_pre : MaskedOrigin::extrapolate_post);
}

ad::Var masked_training_loss(const UNetModel& model, const NoiseSchedule& ns, const Tensor& x0,
                             const MaskedClip& clip, const ad::Var* cond,
                             const std::vector<double>& fps, Rng& rng, int global_step) {
    if (x0.shape != clip.frames.shape)
        throw ShapeError("mask was drawn for a different clip shape");
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

    ad::Var pred = model.forward(ad::constant(assemble_masked_channels(xt, clip)), td, fps, cond);
    ad::Var loss = ad::mse(pred, noise);
    if (!std::isfinite(loss->value[0])) {
        std::string where =
            global_step >= 0 ? " at training step " + std::to_string(global_step) : "";
        throw NumericError("training loss is not finite" + where);
    }
    return loss;
}

}  // namespace p3d
