#include "p3d/unet.hpp"

#include <algorithm>
#include <stdexcept>

#include "p3d/core.hpp"
#include "p3d/errors.hpp"

namespace p3d {

std::string mode_name(ModelMode m) {
    return m == ModelMode::image2d ? "image2d" : "video3d";
}

ModelMode mode_from_name(const std::string& s) {
    if (s == "image2d") return ModelMode::image2d;
    if (s == "video3d") return ModelMode::video3d;
    throw ConfigError("unknown model mode '" + s + "' (want image2d or video3d)");
}

void UNetConfig::validate() const {
    if (in_channels < 1 || out_channels < 1) throw ConfigError("channel counts must be positive");
    if (base_channels < 1) throw ConfigError("base_channels must be positive");
    if (channel_mult.empty()) throw ConfigError("channel_mult must not be empty");
    for (size_t i = 0; i < channel_mult.size(); ++i) {
        if (channel_mult[i] < 1) throw ConfigError("channel_mult entries must be positive");
        if (i > 0 && channel_mult[i] < channel_mult[i - 1])
            throw ConfigError("channel_mult must be nondecreasing");
    }
    for (int l : attn_levels)
        if (l < 0 || l >= levels()) throw ConfigError("attn_levels entry out of range");
    if (heads < 1) throw ConfigError("heads must be positive");
    auto needs_heads = [&](int ch) {
        if (ch % heads != 0)
            throw ConfigError("heads must divide " + std::to_string(ch) + " channels");
    };
    needs_heads(level_channels(levels() - 1));  // mid attention
    for (int l : attn_levels) needs_heads(level_channels(l));
    if (cond_input_dim < 0) throw ConfigError("cond_input_dim must be nonnegative");
    if (cond_input_dim > 0 && (cond_dim < 1 || cond_tokens < 1))
        throw ConfigError("conditional models need cond_dim and cond_tokens");
    if (emb_dim < 2 || emb_dim % 2 != 0) throw ConfigError("emb_dim must be even and >= 2");
    if (max_frames < 1) throw ConfigError("max_frames must be positive");
    if (temporal_kernel < 1 || temporal_kernel % 2 == 0)
        throw ConfigError("temporal_kernel must be odd and positive");
}

bool UNetConfig::has_attn(int level) const {
    return std::find(attn_levels.begin(), attn_levels.end(), level) != attn_levels.end();
}

ResBlock::ResBlock(int in_ch, int out_ch, int emb_dim, Rng& rng)
    : norm1(in_ch),
      conv1(in_ch, out_ch, 3, rng),
      emb(emb_dim, out_ch, rng),
      norm2(out_ch),
      conv2(out_ch, out_ch, 3, rng) {
    if (in_ch != out_ch) skip.emplace(in_ch, out_ch, 1, rng);
}

ad::Var ResBlock::forward(const ad::Var& x, const ad::Var& e) const {
    ad::Var h = conv1(ad::silu(norm1(x)));
    h = ad::add_sample_channel(h, emb(ad::silu(e)));
    h = conv2(ad::silu(norm2(h)));
    ad::Var base = skip ? (*skip)(x) : x;
    return ad::add(base, h);
}

void ResBlock::add_temporal(int kt) {
    conv1.add_temporal(kt);
    conv2.add_temporal(kt);
    if (skip) skip->add_temporal(kt);
}

void ResBlock::collect(ParamMap& pm, const std::string& prefix) const {
    norm1.collect(pm, prefix + ".norm1");
    conv1.collect(pm, prefix + ".conv1");
    emb.collect(pm, prefix + ".emb");
    norm2.collect(pm, prefix + ".norm2");
    conv2.collect(pm, prefix + ".conv2");
    if (skip) skip->collect(pm, prefix + ".skip");
}

namespace {
UNetConfig checked(UNetConfig c) {
    c.validate();
    return c;
}
}  // namespace

UNetModel::UNetModel(const UNetConfig& cfg_, Rng& rng)
    : cfg(checked(cfg_)),
      time_embed(cfg.emb_dim, rng),
      stem(cfg.in_channels, cfg.base_channels, 3, rng),
      mid_res1(cfg.level_channels(cfg.levels() - 1), cfg.level_channels(cfg.levels() - 1),
               cfg.emb_dim, rng),
      mid_attn(cfg.level_channels(cfg.levels() - 1), cfg.heads, cfg.cross_dim(), rng),
      mid_res2(cfg.level_channels(cfg.levels() - 1), cfg.level_channels(cfg.levels() - 1),
               cfg.emb_dim, rng),
      out_norm(cfg.level_channels(0)),
      out_conv(cfg.level_channels(0), cfg.out_channels, 3, rng) {
    const int L = cfg.levels();
    if (cfg.mode == ModelMode::video3d) fps_embed.emplace(cfg.emb_dim, rng);
    if (cfg.conditional())
        cond_proj.emplace(cfg.cond_input_dim, cfg.cond_tokens * cfg.cond_dim, rng);

    int prev = cfg.base_channels;
    for (int l = 0; l < L; ++l) {
        const int ch = cfg.level_channels(l);
        down_res.emplace_back(prev, ch, cfg.emb_dim, rng);
        if (cfg.has_attn(l))
            down_attn.emplace_back(std::in_place, ch, cfg.heads, cfg.cross_dim(), rng);
        else
            down_attn.emplace_back(std::nullopt);
        prev = ch;
    }
    for (int l = 0; l < L; ++l) {
        const int ch = cfg.level_channels(l);
        const int from = cfg.level_channels(std::min(l + 1, L - 1));
        up_res.emplace_back(from + ch, ch, cfg.emb_dim, rng);
        if (cfg.has_attn(l))
            up_attn.emplace_back(std::in_place, ch, cfg.heads, cfg.cross_dim(), rng);
        else
            up_attn.emplace_back(std::nullopt);
    }

    // start out predicting zeros: stabilizes early steps and makes the
    // untrained loss sit at the noise variance
    out_conv.spatial.W->value.fill(0.0);
    out_conv.spatial.b->value.fill(0.0);

    if (cfg.mode == ModelMode::video3d) {
        const int kt = cfg.temporal_kernel;
        stem.add_temporal(kt);
        for (auto& r : down_res) r.add_temporal(kt);
        for (auto& a : down_attn)
            if (a) a->add_temporal(cfg.max_frames, rng);
        mid_res1.add_temporal(kt);
        mid_attn.add_temporal(cfg.max_frames, rng);
        mid_res2.add_temporal(kt);
        for (auto& r : up_res) r.add_temporal(kt);
        for (auto& a : up_attn)
            if (a) a->add_temporal(cfg.max_frames, rng);
        out_conv.add_temporal(kt);
    }
}

namespace {

ad::Var pool2(const ad::Var& h) {
    if (h->value.rank() == 4) return ad::avgpool2x(h);
    Shape out = h->value.shape;
    out[3] /= 2;
    out[4] /= 2;
    return ad::spatial_batch_to_video(ad::avgpool2x(ad::video_to_spatial_batch(h)), out);
}

ad::Var grow2(const ad::Var& h) {
    if (h->value.rank() == 4) return ad::upsample2x_nearest(h);
    Shape out = h->value.shape;
    out[3] *= 2;
    out[4] *= 2;
    return ad::spatial_batch_to_video(ad::upsample2x_nearest(ad::video_to_spatial_batch(h)), out);
}

}  // namespace

ad::Var UNetModel::forward(const ad::Var& x, const std::vector<double>& t,
                           const std::vector<double>& fps, const ad::Var* cond,
                           bool skip_temporal_attn) const {
    const Tensor& xv = x->value;
    const bool video = cfg.mode == ModelMode::video3d;
    if (xv.rank() != (video ? 5 : 4))
        throw ShapeError("input rank " + std::to_string(xv.rank()) + " does not fit " +
                         mode_name(cfg.mode));
    const int B = xv.dim(0);
    if (xv.dim(1) != cfg.in_channels)
        throw ShapeError("input has " + std::to_string(xv.dim(1)) + " channels, model wants " +
                         std::to_string(cfg.in_channels));
    const int H = xv.dim(video ? 3 : 2), W = xv.dim(video ? 4 : 3);
    const int divisor = 1 << (cfg.levels() - 1);
    if (H % divisor != 0 || W % divisor != 0)
        throw ConfigError("spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                          " not divisible by " + std::to_string(divisor));
    if (video && xv.dim(2) > cfg.max_frames)
        throw ConfigError("clip has " + std::to_string(xv.dim(2)) + " frames, model supports " +
                          std::to_string(cfg.max_frames));
    if (static_cast<int>(t.size()) != B) throw ShapeError("need one diffusion step per sample");
    if (video) {
        if (static_cast<int>(fps.size()) != B)
            throw MissingConditionError("video mode needs one fps value per sample");
    } else if (!fps.empty()) {
        throw ConfigError("fps conditioning only applies to video mode");
    }

    ad::Var e = time_embed(t);
    if (video) {
        std::vector<double> f = fps;
        for (double& v : f) v = clamp_fps(v);
        e = ad::add(e, (*fps_embed)(f));
    }

    ad::Var tokens;
    if (cfg.conditional()) {
        if (!cond) throw MissingConditionError("model is conditional but no conditioning given");
        if (cond->get()->value.rank() != 2 || cond->get()->value.dim(0) != B ||
            cond->get()->value.dim(1) != cfg.cond_input_dim)
            throw ShapeError("conditioning must be (batch, " +
                             std::to_string(cfg.cond_input_dim) + ")");
        tokens = ad::reshape((*cond_proj)(*cond), {B, cfg.cond_tokens, cfg.cond_dim});
    } else if (cond) {
        throw ConfigError("model is unconditional but conditioning was given");
    }
    const ad::Var* tk = cfg.conditional() ? &tokens : nullptr;

    const int L = cfg.levels();
    ad::Var h = stem(x);
    std::vector<ad::Var> skips;
    for (int l = 0; l < L; ++l) {
        h = down_res[l].forward(h, e);
        if (down_attn[l]) h = down_attn[l]->forward(h, tk, skip_temporal_attn);
        skips.push_back(h);
        if (l + 1 < L) h = pool2(h);
    }
    h = mid_res1.forward(h, e);
    h = mid_attn.forward(h, tk, skip_temporal_attn);
    h = mid_res2.forward(h, e);
    for (int l = L - 1; l >= 0; --l) {
        h = up_res[l].forward(ad::concat_ch(h, skips[l]), e);
        if (up_attn[l]) h = up_attn[l]->forward(h, tk, skip_temporal_attn);
        if (l > 0) h = grow2(h);
    }
    return out_conv(ad::silu(out_norm(h)));
}

ParamMap UNetModel::params() const {
    ParamMap pm;
    time_embed.collect(pm, "time");
    if (fps_embed) fps_embed->collect(pm, "fps");
    if (cond_proj) cond_proj->collect(pm, "cond.proj");
    stem.collect(pm, "stem");
    for (size_t l = 0; l < down_res.size(); ++l) {
        const std::string p = "down." + std::to_string(l);
        down_res[l].collect(pm, p + ".res");
        if (down_attn[l]) down_attn[l]->collect(pm, p + ".attn");
    }
    mid_res1.collect(pm, "mid.res1");
    mid_attn.collect(pm, "mid.attn");
    mid_res2.collect(pm, "mid.res2");
    for (size_t l = 0; l < up_res.size(); ++l) {
        const std::string p = "up." + std::to_string(l);
        up_res[l].collect(pm, p + ".res");
        if (up_attn[l]) up_attn[l]->collect(pm, p + ".attn");
    }
    out_norm.collect(pm, "out.norm");
    out_conv.collect(pm, "out.conv");
    return pm;
}

int64_t UNetModel::param_count() const { return params().total_elements(); }

UNetModel inflate_to_video(const UNetModel& image, Rng& rng) {
    if (image.cfg.mode != ModelMode::image2d)
        throw ConfigError("only an image model can be inflated");
    UNetConfig vcfg = image.cfg;
    vcfg.mode = ModelMode::video3d;
    UNetModel video(vcfg, rng);

    ParamMap src = image.params();
    ParamMap dst = video.params();
    for (const auto& [name, var] : src.items) {
        ad::Var d = dst.find(name);
        if (!d) throw std::logic_error("inflation lost parameter " + name);
        if (!d->value.same_shape(var->value))
            throw std::logic_error("inflation changed the shape of " + name);
        d->value.data = var->value.data;
    }
    zero_init(video.fps_embed->fc2);  // fps conditioning starts silent
    return video;
}

void widen_input_channels(UNetModel& model, int new_in_channels) {
    const int old_in = model.cfg.in_channels;
    if (new_in_channels <= old_in)
        throw ConfigError("widening must increase the input channel count");
    const Tensor& oldW = model.stem.spatial.W->value;
    const int out = oldW.dim(0), k = oldW.dim(2);
    Tensor W({out, new_in_channels, k, k});  // fresh slices stay zero
    for (int o = 0; o < out; ++o)
        for (int i = 0; i < old_in; ++i)
            for (int a = 0; a < k; ++a)
                for (int b = 0; b < k; ++b)
                    W[((static_cast<int64_t>(o) * new_in_channels + i) * k + a) * k + b] =
                        oldW[((static_cast<int64_t>(o) * old_in + i) * k + a) * k + b];
    model.stem.spatial.W = ad::parameter(W, "weight");
    model.cfg.in_channels = new_in_channels;
}

}  // namespace p3d
