#include "p3d/layers.hpp"

#include <cmath>
#include <cstdio>

namespace p3d {

void ParamMap::add(const std::string& name, const ad::Var& v) {
    for (const auto& [n, _] : items)
        if (n == name) throw ConfigError("duplicate parameter name: " + name);
    items.emplace_back(name, v);
}

ad::Var ParamMap::find(const std::string& name) const {
    for (const auto& [n, v] : items)
        if (n == name) return v;
    return nullptr;
}

int64_t ParamMap::total_elements() const {
    int64_t n = 0;
    for (const auto& [_, v] : items) n += v->value.numel();
    return n;
}

int norm_groups_for(int channels) {
    // At least 4 channels per group: with one channel per group the norm would
    // erase any per-channel additive conditioning (the step/fps embedding just
    // cancels against the group mean), silencing that pathway entirely.
    for (int g = std::min(8, channels / 4); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

Dense::Dense(int in, int out, Rng& rng) {
    if (in < 1 || out < 1) throw ConfigError("Dense: dims must be positive");
    W = ad::parameter(rng.normal_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in))), "W");
    b = ad::parameter(Tensor::zeros({out}), "b");
}

void Dense::collect(ParamMap& pm, const std::string& prefix) const {
    pm.add(prefix + ".weight", W);
    pm.add(prefix + ".bias", b);
}

void zero_init(Dense& d) {
    d.W->value.fill(0.0);
    d.b->value.fill(0.0);
}

Conv2D::Conv2D(int in, int out, int k, Rng& rng) {
    if (k < 1 || k % 2 == 0) throw ConfigError("Conv2D: kernel must be odd, got " + std::to_string(k));
    if (in < 1 || out < 1) throw ConfigError("Conv2D: channel counts must be positive");
    const double std = 1.0 / std::sqrt(static_cast<double>(in) * k * k);
    W = ad::parameter(rng.normal_tensor({out, in, k, k}, std), "W");
    b = ad::parameter(Tensor::zeros({out}), "b");
}

void Conv2D::collect(ParamMap& pm, const std::string& prefix) const {
    pm.add(prefix + ".weight", W);
    pm.add(prefix + ".bias", b);
}

TemporalConv1D::TemporalConv1D(int ch, int kt, Rng& rng) {
    if (kt < 1 || kt % 2 == 0)
        throw ConfigError("TemporalConv1D: kernel must be odd, got " + std::to_string(kt));
    if (ch < 1) throw ConfigError("TemporalConv1D: channels must be positive");
    const double std = 1.0 / std::sqrt(static_cast<double>(ch) * kt);
    W = ad::parameter(rng.normal_tensor({ch, ch, kt}, std), "W");
    b = ad::parameter(Tensor::zeros({ch}), "b");
}

void TemporalConv1D::collect(ParamMap& pm, const std::string& prefix) const {
    pm.add(prefix + ".weight", W);
    pm.add(prefix + ".bias", b);
}

void init_temporal_identity(TemporalConv1D& conv) {
    const int ch = conv.channels();
    const int kt = conv.kernel();
    if (kt % 2 == 0) throw ConfigError("init_temporal_identity: kernel must be odd");
    conv.W->value.fill(0.0);
    conv.b->value.fill(0.0);
    const int center = kt / 2;
    for (int c = 0; c < ch; ++c)
        conv.W->value[(static_cast<int64_t>(c) * ch + c) * kt + center] = 1.0;
}

GroupNormMod::GroupNormMod(int channels) : groups(norm_groups_for(channels)) {
    gamma = ad::parameter(Tensor::full({channels}, 1.0), "gamma");
    beta = ad::parameter(Tensor::zeros({channels}), "beta");
}

void GroupNormMod::collect(ParamMap& pm, const std::string& prefix) const {
    pm.add(prefix + ".gamma", gamma);
    pm.add(prefix + ".beta", beta);
}

ad::Var GroupNormMod::operator()(const ad::Var& x) const {
    if (x->value.rank() == 5) {
        ad::Var sb = ad::video_to_spatial_batch(x);
        ad::Var normed = ad::group_norm(sb, gamma, beta, groups);
        return ad::spatial_batch_to_video(normed, x->value.shape);
    }
    return ad::group_norm(x, gamma, beta, groups);
}

ad::Var P3DConv::operator()(const ad::Var& x) const {
    const int rank = x->value.rank();
    if (rank == 4) {
        if (temporal) throw ConfigError("P3DConv: video layer applied to an image batch");
        return spatial(x);
    }
    if (rank != 5) throw ShapeError("P3DConv: input must be rank 4 or 5, got " + shape_str(x->value.shape));
    const Shape& in_shape = x->value.shape;
    Shape out_shape = in_shape;
    out_shape[1] = spatial.out();
    ad::Var h = ad::spatial_batch_to_video(spatial(ad::video_to_spatial_batch(x)), out_shape);
    if (temporal)
        h = ad::temporal_batch_to_video((*temporal)(ad::video_to_temporal_batch(h)), out_shape);
    return h;
}

void P3DConv::add_temporal(int kt) {
    if (temporal) throw ConfigError("P3DConv: temporal conv already present");
    Rng dummy(0);
    temporal.emplace(spatial.out(), kt, dummy);
    init_temporal_identity(*temporal);
}

void P3DConv::collect(ParamMap& pm, const std::string& prefix) const {
    spatial.collect(pm, prefix + ".spatial");
    if (temporal) temporal->collect(pm, prefix + ".temporal");
}

MultiHeadAttn::MultiHeadAttn(int dim, int ctx_dim, int heads_, Rng& rng)
    : q(dim, dim, rng), k(ctx_dim, dim, rng), v(ctx_dim, dim, rng), proj(dim, dim, rng), heads(heads_) {
    if (dim % heads_ != 0)
        throw ConfigError("MultiHeadAttn: heads " + std::to_string(heads_) + " must divide dim " +
                          std::to_string(dim));
}

namespace {

// (N, T, C) -> (N*heads, T, C/heads)
ad::Var split_heads(const ad::Var& x, int heads) {
    const int N = x->value.dim(0), T = x->value.dim(1), C = x->value.dim(2);
    ad::Var r = ad::reshape(x, {N, T, heads, C / heads});
    r = ad::permute(r, {0, 2, 1, 3});
    return ad::reshape(r, {N * heads, T, C / heads});
}

ad::Var merge_heads(const ad::Var& x, int heads) {
    const int NH = x->value.dim(0), T = x->value.dim(1), dh = x->value.dim(2);
    ad::Var r = ad::reshape(x, {NH / heads, heads, T, dh});
    r = ad::permute(r, {0, 2, 1, 3});
    return ad::reshape(r, {NH / heads, T, heads * dh});
}

// rank-2 view for Dense over token tensors
ad::Var dense_tokens(const Dense& d, const ad::Var& tokens) {
    const int N = tokens->value.dim(0), T = tokens->value.dim(1), C = tokens->value.dim(2);
    ad::Var flat = ad::reshape(tokens, {N * T, C});
    return ad::reshape(d(flat), {N, T, d.out()});
}

}  // namespace

ad::Var MultiHeadAttn::run(const ad::Var& tokens, const ad::Var& ctx) const {
    check_rank(tokens->value, 3, "MultiHeadAttn tokens");
    check_rank(ctx->value, 3, "MultiHeadAttn context");
    if (tokens->value.dim(0) != ctx->value.dim(0))
        throw ShapeError("MultiHeadAttn: token/context batch mismatch");
    const int dh = q.out() / heads;
    ad::Var qs = split_heads(dense_tokens(q, tokens), heads);
    ad::Var ks = split_heads(dense_tokens(k, ctx), heads);
    ad::Var vs = split_heads(dense_tokens(v, ctx), heads);
    ad::Var scores = ad::scale(ad::bmm_nt(qs, ks), 1.0 / std::sqrt(static_cast<double>(dh)));
    ad::Var mix = ad::bmm_nn(ad::softmax_last(scores), vs);
    return dense_tokens(proj, merge_heads(mix, heads));
}

void MultiHeadAttn::collect(ParamMap& pm, const std::string& prefix) const {
    q.collect(pm, prefix + ".q");
    k.collect(pm, prefix + ".k");
    v.collect(pm, prefix + ".v");
    proj.collect(pm, prefix + ".proj");
}

P3DAttention::P3DAttention(int channels_, int heads, int cond_dim, Rng& rng)
    : channels(channels_),
      norm_s(channels_),
      attn_s(channels_, channels_, heads, rng),
      has_cross(cond_dim > 0) {
    if (has_cross) {
        norm_c = GroupNormMod(channels_);
        attn_c = MultiHeadAttn(channels_, cond_dim, heads, rng);
    }
}

void P3DAttention::add_temporal(int max_frames, Rng& rng) {
    if (has_temporal) throw ConfigError("P3DAttention: temporal attention already present");
    has_temporal = true;
    norm_t = GroupNormMod(channels);
    attn_t = MultiHeadAttn(channels, channels, attn_s.heads, rng);
    zero_init(attn_t.proj);
    pos_table = ad::parameter(Tensor::zeros({max_frames, channels}), "pos");
}

namespace {

// (N,C,H,W) -> (N, H*W, C)
ad::Var spatial_tokens(const ad::Var& x) {
    const int N = x->value.dim(0), C = x->value.dim(1), S = x->value.dim(2) * x->value.dim(3);
    return ad::permute(ad::reshape(x, {N, C, S}), {0, 2, 1});
}

ad::Var untokenize_spatial(const ad::Var& tokens, const Shape& like) {
    return ad::reshape(ad::permute(tokens, {0, 2, 1}), like);
}

}  // namespace

ad::Var P3DAttention::forward(const ad::Var& x, const ad::Var* cond, bool skip_temporal) const {
    const int rank = x->value.rank();
    if (rank != 4 && rank != 5) throw ShapeError("P3DAttention: input must be rank 4 or 5");
    const bool video = rank == 5;
    if (has_cross && cond == nullptr)
        throw MissingConditionError("P3DAttention: conditioning tokens required but not provided");

    ad::Var h = x;

    // spatial self-attention, per frame
    {
        ad::Var sb = video ? ad::video_to_spatial_batch(h) : h;
        const Shape sb_shape = sb->value.shape;
        ad::Var tokens = spatial_tokens(norm_s(sb));
        ad::Var out = untokenize_spatial(attn_s(tokens), sb_shape);
        sb = ad::add(sb, out);
        h = video ? ad::spatial_batch_to_video(sb, h->value.shape) : sb;
    }

    // cross-attention against conditioning tokens
    if (has_cross) {
        check_rank((*cond)->value, 3, "P3DAttention conditioning");
        ad::Var sb = video ? ad::video_to_spatial_batch(h) : h;
        const Shape sb_shape = sb->value.shape;
        ad::Var ctx = *cond;
        if (video) ctx = ad::repeat_rows(ctx, h->value.dim(2));  // one copy per frame
        if (ctx->value.dim(0) != sb_shape[0])
            throw ShapeError("P3DAttention: conditioning batch mismatch");
        ad::Var tokens = spatial_tokens(norm_c(sb));
        ad::Var out = untokenize_spatial(attn_c.run(tokens, ctx), sb_shape);
        sb = ad::add(sb, out);
        h = video ? ad::spatial_batch_to_video(sb, h->value.shape) : sb;
    }

    // temporal self-attention, per location
    if (video && has_temporal && !skip_temporal) {
        ad::Var tb = ad::video_to_temporal_batch(h);  // (B*H*W, C, F)
        ad::Var tokens = ad::permute(norm_t(tb), {0, 2, 1});
        tokens = ad::add_pos_rows(tokens, pos_table);
        ad::Var out = ad::permute(attn_t(tokens), {0, 2, 1});
        tb = ad::add(tb, out);
        h = ad::temporal_batch_to_video(tb, h->value.shape);
    }
    return h;
}

void P3DAttention::collect(ParamMap& pm, const std::string& prefix) const {
    norm_s.collect(pm, prefix + ".norm_s");
    attn_s.collect(pm, prefix + ".spatial");
    if (has_cross) {
        norm_c.collect(pm, prefix + ".norm_c");
        attn_c.collect(pm, prefix + ".cross");
    }
    if (has_temporal) {
        norm_t.collect(pm, prefix + ".norm_t");
        attn_t.collect(pm, prefix + ".temporal");
        pm.add(prefix + ".temporal.pos", pos_table);
    }
}

CondEmbedding::CondEmbedding(int dim_, Rng& rng) : dim(dim_), fc1(dim_, dim_, rng), fc2(dim_, dim_, rng) {
    if (dim_ < 2 || dim_ % 2 != 0) throw ConfigError("CondEmbedding: dim must be even and >= 2");
}

ad::Var CondEmbedding::operator()(const std::vector<double>& values) const {
    ad::Var h = ad::constant(sinusoidal_embedding(values, dim));
    return fc2(ad::silu(fc1(h)));
}

void CondEmbedding::collect(ParamMap& pm, const std::string& prefix) const {
    fc1.collect(pm, prefix + ".fc1");
    fc2.collect(pm, prefix + ".fc2");
}

Tensor sinusoidal_embedding(const std::vector<double>& values, int dim) {
    if (values.empty()) throw ShapeError("sinusoidal_embedding: no values");
    if (dim < 2 || dim % 2 != 0) throw ConfigError("sinusoidal_embedding: dim must be even");
    const int half = dim / 2;
    Tensor out({static_cast<int>(values.size()), dim});
    for (size_t n = 0; n < values.size(); ++n)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            out[static_cast<int64_t>(n) * dim + i] = std::sin(values[n] * freq);
            out[static_cast<int64_t>(n) * dim + half + i] = std::cos(values[n] * freq);
        }
    return out;
}

double clamp_fps(double fps) {
    if (fps < 1.0 || fps > 30.0) {
        std::fprintf(stderr, "warning: fps %.3f outside [1, 30], clamping\n", fps);
        return fps < 1.0 ? 1.0 : 30.0;
    }
    return fps;
}

}  // namespace p3d
