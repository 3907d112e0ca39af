#include "p3d/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "p3d/checkpoint.hpp"
#include "p3d/core.hpp"
#include "p3d/data.hpp"
#include "p3d/errors.hpp"

namespace p3d {

using nlohmann::json;

// ----- resampling -----

namespace {

// Catmull-Rom taps of an aligned 2x upsample. Even outputs sit a quarter
// pixel left of their nearest source sample, odd outputs a quarter right, so
// only two weight sets ever occur (and both are exact in binary).
constexpr double kEvenW[4] = {-3.0 / 128.0, 29.0 / 128.0, 111.0 / 128.0, -9.0 / 128.0};
constexpr double kOddW[4] = {-9.0 / 128.0, 111.0 / 128.0, 29.0 / 128.0, -3.0 / 128.0};

struct Taps {
    int idx[4];
    const double* w;
};

std::vector<Taps> make_taps(int n_in) {
    std::vector<Taps> taps(static_cast<size_t>(2 * n_in));
    for (int i = 0; i < 2 * n_in; ++i) {
        const bool even = i % 2 == 0;
        const int base = i / 2 + (even ? -2 : -1);
        taps[static_cast<size_t>(i)].w = even ? kEvenW : kOddW;
        for (int k = 0; k < 4; ++k)
            taps[static_cast<size_t>(i)].idx[k] = std::clamp(base + k, 0, n_in - 1);
    }
    return taps;
}

}  // namespace

Tensor upsample_bicubic2(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("upsampling wants trailing row and column axes");
    const int H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    const int64_t planes = x.numel() / (static_cast<int64_t>(H) * W);
    const auto row_taps = make_taps(H);
    const auto col_taps = make_taps(W);

    Shape mid_shape = x.shape;
    mid_shape[static_cast<size_t>(x.rank() - 2)] = 2 * H;
    Tensor mid(mid_shape);
    for (int64_t p = 0; p < planes; ++p) {
        const double* src = x.data.data() + p * H * W;
        double* dst = mid.data.data() + p * 2 * H * W;
        for (int i = 0; i < 2 * H; ++i) {
            const Taps& t = row_taps[static_cast<size_t>(i)];
            for (int c = 0; c < W; ++c)
                dst[static_cast<int64_t>(i) * W + c] =
                    t.w[0] * src[static_cast<int64_t>(t.idx[0]) * W + c] +
                    t.w[1] * src[static_cast<int64_t>(t.idx[1]) * W + c] +
                    t.w[2] * src[static_cast<int64_t>(t.idx[2]) * W + c] +
                    t.w[3] * src[static_cast<int64_t>(t.idx[3]) * W + c];
        }
    }

    Shape out_shape = mid_shape;
    out_shape[static_cast<size_t>(x.rank() - 1)] = 2 * W;
    Tensor out(out_shape);
    const int64_t rows = planes * 2 * H;
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = mid.data.data() + r * W;
        double* dst = out.data.data() + r * 2 * W;
        for (int i = 0; i < 2 * W; ++i) {
            const Taps& t = col_taps[static_cast<size_t>(i)];
            dst[i] = t.w[0] * src[t.idx[0]] + t.w[1] * src[t.idx[1]] + t.w[2] * src[t.idx[2]] +
                     t.w[3] * src[t.idx[3]];
        }
    }
    return out;
}

Tensor downsample_box2(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("downsampling wants trailing row and column axes");
    const int H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    if (H % 2 != 0 || W % 2 != 0) throw ShapeError("box downsample needs even trailing dims");
    const int64_t planes = x.numel() / (static_cast<int64_t>(H) * W);

    Shape out_shape = x.shape;
    out_shape[static_cast<size_t>(x.rank() - 2)] = H / 2;
    out_shape[static_cast<size_t>(x.rank() - 1)] = W / 2;
    Tensor out(out_shape);
    for (int64_t p = 0; p < planes; ++p) {
        const double* src = x.data.data() + p * H * W;
        double* dst = out.data.data() + p * (H / 2) * (W / 2);
        for (int y = 0; y < H / 2; ++y)
            for (int c = 0; c < W / 2; ++c)
                dst[static_cast<int64_t>(y) * (W / 2) + c] =
                    0.25 * (src[static_cast<int64_t>(2 * y) * W + 2 * c] +
                            src[static_cast<int64_t>(2 * y) * W + 2 * c + 1] +
                            src[static_cast<int64_t>(2 * y + 1) * W + 2 * c] +
                            src[static_cast<int64_t>(2 * y + 1) * W + 2 * c + 1]);
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 2)
        throw ShapeError("channel concat wants two tensors of equal rank >= 2");
    for (int d = 0; d < a.rank(); ++d)
        if (d != 1 && a.dim(d) != b.dim(d))
            throw ShapeError("channel concat shapes disagree beyond axis 1");
    Shape s = a.shape;
    s[1] = a.dim(1) + b.dim(1);
    Tensor out(s);
    const int B = a.dim(0);
    const int64_t pa = a.numel() / B, pb = b.numel() / B;
    for (int i = 0; i < B; ++i) {
        std::copy_n(a.data.begin() + i * pa, pa, out.data.begin() + i * (pa + pb));
        std::copy_n(b.data.begin() + i * pb, pb, out.data.begin() + i * (pa + pb) + pa);
    }
    return out;
}

uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path + " for fingerprinting");
    uint64_t h = 14695981039346656037ULL;
    char buf[1 << 14];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

// ----- text embedding -----

std::vector<std::string> toy_vocabulary() {
    std::vector<std::string> v = {"<unk>"};
    auto push = [&v](const std::string& w) {
        if (std::find(v.begin(), v.end(), w) == v.end()) v.push_back(w);
    };
    for (const auto& [name, rgb] : color_palette()) push(name);
    for (ShapeKind k : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle})
        push(shape_name(k));
    for (const char* w : {"moving", "right", "left", "up", "down", "in", "a"}) push(w);
    return v;
}

TextEncoder::TextEncoder(int dim, Rng& rng) : vocab(toy_vocabulary()) {
    if (dim < 1) throw ConfigError("text embedding width must be positive");
    table = ad::parameter(rng.normal_tensor({dim, static_cast<int>(vocab.size())}, 0.1),
                          "text_table");
}

int TextEncoder::token_index(const std::string& word) const {
    for (size_t i = 0; i < vocab.size(); ++i)
        if (vocab[i] == word) return static_cast<int>(i);
    return 0;
}

std::vector<int> TextEncoder::tokenize(const std::string& s) const {
    std::istringstream words(s);
    std::vector<int> tokens;
    std::string w;
    while (words >> w) {
        for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        tokens.push_back(token_index(w));
    }
    if (tokens.empty()) throw std::invalid_argument("cannot embed an empty string");
    return tokens;
}

TextEmbedding TextEncoder::encode(const std::string& s) const {
    TextEmbedding e;
    e.tokens = tokenize(s);
    const int D = dim(), V = static_cast<int>(vocab.size());
    // count per word first; summing in vocabulary order keeps the pooled
    // value independent of token order down to the last bit
    std::vector<double> count(static_cast<size_t>(V), 0.0);
    for (int t : e.tokens) count[static_cast<size_t>(t)] += 1.0;
    const double inv = 1.0 / static_cast<double>(e.tokens.size());
    e.pooled = Tensor::zeros({D});
    for (int v = 0; v < V; ++v) {
        if (count[static_cast<size_t>(v)] == 0.0) continue;
        const double w = count[static_cast<size_t>(v)] * inv;
        for (int d = 0; d < D; ++d) e.pooled[d] += w * table->value[d * V + v];
    }
    return e;
}

ad::Var TextEncoder::pool(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw std::invalid_argument("cannot pool an empty token list");
    const int V = static_cast<int>(vocab.size());
    Tensor freq = Tensor::zeros({1, V});
    const double inv = 1.0 / static_cast<double>(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t >= V) throw std::invalid_argument("token index outside the vocabulary");
        freq[t] += inv;
    }
    return ad::linear(ad::constant(freq), table, ad::constant(Tensor::zeros({dim()})));
}

ParamMap TextEncoder::params() const {
    ParamMap pm;
    pm.add("table", table);
    return pm;
}

// ----- image embedding -----

ImageEncoder::ImageEncoder(int res, int dim, Rng& rng)
    : res(res), c1(3, 12, 3, rng), c2(12, 24, 3, rng), head(12 + 24 + 24, dim, rng) {
    if (res < 8 || (res & (res - 1)) != 0)
        throw ConfigError("image encoder wants a power-of-two canvas of at least 8");
    if (dim < 1) throw ConfigError("image embedding width must be positive");
}

ad::Var ImageEncoder::forward(const ad::Var& frames) const {
    const Tensor& v = frames->value;
    check_rank(v, 4, "encoder frames");
    if (v.dim(1) != 3 || v.dim(2) != res || v.dim(3) != res)
        throw ShapeError("image encoder wants (N,3," + std::to_string(res) + "," +
                         std::to_string(res) + ") frames, got " + shape_str(v.shape));
    // shift so the background maps to zero; otherwise it dominates the
    // pooled features and every embedding collapses onto one direction
    ad::Var fg = ad::scale(ad::add(frames, ad::constant(Tensor(v.shape, 1.0))), 0.5);
    auto global_avg = [](ad::Var h, int side) {
        for (; side > 1; side /= 2) h = ad::avgpool2x(h);
        return h;
    };
    // mean statistics at two scales plus second moments of the deep
    // features; the ratios between the groups survive the final row
    // normalization, so the embedding direction keeps shape information
    // that plain magnitudes would lose
    ad::Var h1 = ad::silu(c1(fg));
    ad::Var h2 = ad::silu(c2(ad::avgpool2x(h1)));
    ad::Var g = ad::concat_ch(global_avg(h1, res), global_avg(h2, res / 2));
    g = ad::concat_ch(g, global_avg(ad::mul(h2, h2), res / 2));
    g = ad::reshape(g, {v.dim(0), head.in()});
    return ad::l2normalize_rows(head(g));
}

Tensor ImageEncoder::encode(const Tensor& frames) const {
    ad::NoGradGuard quiet;
    return forward(ad::constant(frames))->value;
}

ParamMap ImageEncoder::params() const {
    ParamMap pm;
    c1.collect(pm, "c1");
    c2.collect(pm, "c2");
    head.collect(pm, "head");
    return pm;
}

// ----- prior -----

PriorNet::PriorNet(int text_dim, int noise_dim, int hidden, int out_dim, Rng& rng)
    : noise_dim(noise_dim),
      fc1(text_dim + noise_dim, hidden, rng),
      fc2(hidden, out_dim, rng) {
    if (text_dim < 1 || noise_dim < 0 || hidden < 1 || out_dim < 1)
        throw ConfigError("prior dims must be positive (noise may be zero)");
}

ad::Var PriorNet::forward(const ad::Var& pooled_and_noise) const {
    const Tensor& v = pooled_and_noise->value;
    check_rank(v, 2, "prior input");
    if (v.dim(1) != fc1.in())
        throw ShapeError("prior wants " + std::to_string(fc1.in()) + " input columns, got " +
                         std::to_string(v.dim(1)));
    return ad::l2normalize_rows(fc2(ad::silu(fc1(pooled_and_noise))));
}

ParamMap PriorNet::params() const {
    ParamMap pm;
    fc1.collect(pm, "fc1");
    fc2.collect(pm, "fc2");
    return pm;
}

ImageEmbedding prior_generate(const PriorNet& prior, const TextEmbedding& xe, uint64_t seed) {
    if (xe.pooled.rank() != 1 || xe.pooled.dim(0) != prior.text_dim())
        throw ShapeError("pooled text embedding width does not match the prior");
    Tensor in({1, prior.fc1.in()});
    for (int d = 0; d < prior.text_dim(); ++d) in[d] = xe.pooled[d];
    Rng noise(seed, 777);
    for (int d = 0; d < prior.noise_dim; ++d) in[prior.text_dim() + d] = noise.normal();

    ad::NoGradGuard quiet;
    Tensor out = prior.forward(ad::constant(in))->value;
    ImageEmbedding e;
    e.vector = Tensor({prior.out_dim()});
    for (int d = 0; d < prior.out_dim(); ++d) e.vector[d] = out[d];
    return e;
}

PriorStage::PriorStage(int text_dim, int noise_dim, int hidden, int out_dim, Rng& rng)
    : text(text_dim, rng), map(text_dim, noise_dim, hidden, out_dim, rng) {}

ParamMap PriorStage::params() const {
    ParamMap pm;
    for (const auto& [name, var] : text.params().items) pm.add("text." + name, var);
    for (const auto& [name, var] : map.params().items) pm.add("map." + name, var);
    return pm;
}

// ----- stage checkpoints -----

void save_prior_stage(const PriorStage& stage, const std::string& path) {
    const json config{{"text_dim", stage.text.dim()},
                      {"vocab", stage.text.vocab.size()},
                      {"noise_dim", stage.map.noise_dim},
                      {"hidden", stage.map.fc1.out()},
                      {"out_dim", stage.map.out_dim()}};
    save_param_bundle(stage.params(), "prior", config, path);
}

PriorStage load_prior_stage(const std::string& path) {
    const json header = read_checkpoint_header(path);
    const json config = header.value("config", json::object());
    Rng scratch(0);
    PriorStage stage(config.value("text_dim", 0), config.value("noise_dim", 0),
                     config.value("hidden", 0), config.value("out_dim", 0), scratch);
    if (config.value("vocab", size_t{0}) != stage.text.vocab.size())
        throw ConfigError(path + ": vocabulary size drifted since this prior was trained");
    ParamMap pm = stage.params();
    load_param_bundle(path, "prior", pm);
    return stage;
}

void save_image_encoder(const ImageEncoder& enc, const std::string& path) {
    const json config{{"res", enc.res}, {"dim", enc.dim()}};
    save_param_bundle(enc.params(), "image-encoder", config, path);
}

ImageEncoder load_image_encoder(const std::string& path) {
    const json header = read_checkpoint_header(path);
    const json config = header.value("config", json::object());
    Rng scratch(0);
    ImageEncoder enc(config.value("res", 0), config.value("dim", 0), scratch);
    ParamMap pm = enc.params();
    load_param_bundle(path, "image-encoder", pm);
    return enc;
}

// ----- chain loading and compatibility -----

namespace {

[[noreturn]] void incompatible(const std::string& a, const std::string& b,
                               const std::string& why) {
    throw ConfigError("stages '" + a + "' and '" + b + "' are incompatible: " + why);
}

}  // namespace

Pipeline Pipeline::load(const PipelineConfig& cfg) {
    if (cfg.resolutions.size() != 3)
        throw ConfigError("the chain has exactly two 2x stages, so three resolutions");
    const int r0 = cfg.resolutions[0], r1 = cfg.resolutions[1], r2 = cfg.resolutions[2];
    if (r0 < 1 || r1 != 2 * r0 || r2 != 2 * r1)
        throw ConfigError("resolution chain must double twice, got " + std::to_string(r0) +
                          " -> " + std::to_string(r1) + " -> " + std::to_string(r2));
    if (cfg.frames < 2) throw ConfigError("the decoder clip needs at least two frames");
    if (cfg.skip < 1) throw ConfigError("frame skip must be at least 1");
    if (cfg.fps < 1 || cfg.fps > 30) throw ConfigError("default fps must lie in [1,30]");

    PriorStage prior = load_prior_stage(cfg.prior);
    ImageEncoder encoder = load_image_encoder(cfg.image_encoder);
    UNetModel decoder = load_checkpoint(cfg.decoder);
    UNetModel interp = load_checkpoint(cfg.interp);
    UNetModel sr_l_t = load_checkpoint(cfg.sr_l_t);
    UNetModel sr_h = load_checkpoint(cfg.sr_h);

    if (decoder.cfg.mode != ModelMode::video3d)
        throw ConfigError("decoder stage must be a clip model");
    if (decoder.cfg.in_channels != 3 || decoder.cfg.out_channels != 3)
        throw ConfigError("decoder stage must map 3 channels to 3 channels");
    if (!decoder.cfg.conditional())
        incompatible("prior", "decoder", "decoder takes no conditioning input");
    if (prior.map.out_dim() != decoder.cfg.cond_input_dim)
        incompatible("prior", "decoder",
                     "prior emits " + std::to_string(prior.map.out_dim()) +
                         "-dim embeddings but the decoder conditions on " +
                         std::to_string(decoder.cfg.cond_input_dim));
    if (encoder.dim() != decoder.cfg.cond_input_dim)
        incompatible("image-encoder", "decoder",
                     "encoder emits " + std::to_string(encoder.dim()) +
                         "-dim embeddings but the decoder conditions on " +
                         std::to_string(decoder.cfg.cond_input_dim));
    if (encoder.res != r0)
        incompatible("image-encoder", "decoder",
                     "encoder reads " + std::to_string(encoder.res) +
                         "-pixel frames but the decoder runs at " + std::to_string(r0));

    if (interp.cfg.mode != ModelMode::video3d)
        incompatible("decoder", "interp", "frame interpolation must be a clip model");
    if (interp.cfg.in_channels != 2 * decoder.cfg.out_channels + 1)
        incompatible("decoder", "interp",
                     "masked assembly hands over " +
                         std::to_string(2 * decoder.cfg.out_channels + 1) +
                         " channels but the stage takes " +
                         std::to_string(interp.cfg.in_channels));
    if (interp.cfg.out_channels != decoder.cfg.out_channels)
        incompatible("decoder", "interp", "channel widths disagree");
    if (interp.cfg.cond_input_dim != decoder.cfg.cond_input_dim)
        incompatible("decoder", "interp", "conditioning widths disagree");
    if (interp.cfg.max_frames < cfg.output_frames())
        incompatible("interp", "decoder",
                     "stage knows " + std::to_string(interp.cfg.max_frames) +
                         " frame positions but the chain spreads " +
                         std::to_string(cfg.frames) + " frames to " +
                         std::to_string(cfg.output_frames()));

    if (sr_l_t.cfg.mode != ModelMode::video3d)
        incompatible("interp", "sr-l-t", "the first 2x stage must be a clip model");
    if (sr_l_t.cfg.in_channels != 6 || sr_l_t.cfg.out_channels != 3)
        incompatible("interp", "sr-l-t",
                     "stage must take 6 channels (state plus upsample) and emit 3");
    if (sr_l_t.cfg.max_frames < cfg.output_frames())
        incompatible("sr-l-t", "interp",
                     "stage knows " + std::to_string(sr_l_t.cfg.max_frames) +
                         " frame positions but receives " +
                         std::to_string(cfg.output_frames()));
    if (sr_h.cfg.mode != ModelMode::image2d)
        incompatible("sr-l-t", "sr-h", "the per-frame 2x stage must be an image model");
    if (sr_h.cfg.in_channels != 6 || sr_h.cfg.out_channels != 3)
        incompatible("sr-l-t", "sr-h",
                     "stage must take 6 channels (state plus upsample) and emit 3");

    std::vector<StageId> stages = {
        {"prior", cfg.prior, fnv1a_file(cfg.prior)},
        {"image-encoder", cfg.image_encoder, fnv1a_file(cfg.image_encoder)},
        {"decoder", cfg.decoder, fnv1a_file(cfg.decoder)},
        {"interp", cfg.interp, fnv1a_file(cfg.interp)},
        {"sr-l-t", cfg.sr_l_t, fnv1a_file(cfg.sr_l_t)},
        {"sr-h", cfg.sr_h, fnv1a_file(cfg.sr_h)},
    };
    return Pipeline{cfg,
                    std::move(prior),
                    std::move(encoder),
                    std::move(decoder),
                    std::move(interp),
                    std::move(sr_l_t),
                    std::move(sr_h),
                    NoiseSchedule::linear(),
                    std::move(stages)};
}

// ----- sampling -----

Tensor sr_sample(const UNetModel& model, const NoiseSchedule& ns, const Tensor& lo, double fps,
                 const SamplerOptions& opt, bool per_frame) {
    check_rank(lo, 5, "low-resolution clip");
    const int B = lo.dim(0), C = lo.dim(1), F = lo.dim(2);
    if (model.cfg.in_channels != 2 * C || model.cfg.out_channels != C)
        throw ConfigError("super-resolution stage must map " + std::to_string(2 * C) +
                          " channels (state plus upsample) to " + std::to_string(C));
    Tensor up = upsample_bicubic2(lo);
    ad::NoGradGuard quiet;

    if (per_frame) {
        if (model.cfg.mode != ModelMode::image2d)
            throw ConfigError("per-frame super-resolution wants an image model");
        const Tensor up_sb = to_spatial_batch(up).data;
        EpsFn fn = [&, up_sb](const Tensor& x, double t) {
            AxisView v = to_spatial_batch(x);
            const std::vector<double> tv(static_cast<size_t>(B * F), t);
            v.data = model.forward(ad::constant(concat_channels(v.data, up_sb)), tv, {},
                                   nullptr)->value;
            return restore_video(v);
        };
        return ddpm_sample(fn, ns, up.shape, opt);
    }

    if (model.cfg.mode != ModelMode::video3d)
        throw ConfigError("spatiotemporal super-resolution wants a clip model");
    const std::vector<double> fv(static_cast<size_t>(B), fps);
    EpsFn fn = [&](const Tensor& x, double t) {
        const std::vector<double> tv(static_cast<size_t>(B), t);
        return model.forward(ad::constant(concat_channels(x, up)), tv, fv, nullptr)->value;
    };
    return ddpm_sample(fn, ns, up.shape, opt);
}

namespace {

uint64_t stage_seed(uint64_t seed, int stage) {
    Rng r(seed, 0x70756c7365ULL + static_cast<uint64_t>(stage));
    return r.next_u64();
}

std::string hex64(uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void check_rate(int fps) {
    if (fps < 1 || fps > 30)
        throw ConfigError("fps must lie in [1,30], got " + std::to_string(fps));
}

std::string manifest_header(const Pipeline& p, const std::string& mode, const std::string& text,
                            int fps, uint64_t seed) {
    std::string m;
    m += "mode: " + mode + "\n";
    m += "text: " + text + "\n";
    m += "fps: " + std::to_string(fps) + "\n";
    m += "seed: " + std::to_string(seed) + "\n";
    m += "frames: " + std::to_string(p.cfg.frames) + "\n";
    m += "skip: " + std::to_string(p.cfg.skip) + "\n";
    m += "output_frames: " + std::to_string(p.cfg.output_frames()) + "\n";
    m += "resolutions: " + std::to_string(p.cfg.resolutions[0]) + " -> " +
         std::to_string(p.cfg.resolutions[1]) + " -> " + std::to_string(p.cfg.resolutions[2]) +
         "\n";
    for (const StageId& s : p.stages)
        m += "stage " + s.name + ": path=" + s.path + " fnv1a=" + hex64(s.checksum) + "\n";
    return m;
}

void finish_manifest(GenerationResult& res, std::string m,
                     std::chrono::steady_clock::time_point t0) {
    if (res.decoded.numel() > 0) m += "shape decoded: " + shape_str(res.decoded.shape) + "\n";
    if (res.interpolated.numel() > 0)
        m += "shape interpolated: " + shape_str(res.interpolated.shape) + "\n";
    if (res.upsampled.numel() > 0)
        m += "shape upsampled: " + shape_str(res.upsampled.shape) + "\n";
    m += "shape video: " + shape_str(res.video.shape) + "\n";
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    m += "wall_ms: " + std::to_string(ms) + "\n";
    res.manifest = std::move(m);
}

Tensor cond_row(const ImageEmbedding& ye) {
    Tensor cond({1, ye.vector.dim(0)});
    std::copy(ye.vector.data.begin(), ye.vector.data.end(), cond.data.begin());
    return cond;
}

// decoder -> frame spreading -> spatiotemporal 2x -> per-frame 2x
GenerationResult run_chain(const Pipeline& p, const ImageEmbedding& ye, int fps, uint64_t seed,
                           const GenerateOptions& opt) {
    check_rate(fps);
    const PipelineConfig& cfg = p.cfg;
    const int r0 = cfg.resolutions[0];
    GenerationResult res;
    res.embedding = ye;
    const Tensor cond = cond_row(ye);

    SamplerOptions dopt;
    dopt.steps = strided_steps(p.ns.T, opt.decoder_steps);
    dopt.seed = stage_seed(seed, 0);
    dopt.guidance_scale = opt.guidance_scale;
    res.decoded = ddpm_sample(p.decoder, p.ns, {1, 3, cfg.frames, r0, r0}, &cond,
                              {static_cast<double>(fps)}, dopt);

    Tensor state = res.decoded;
    double rate = fps;
    if (opt.run_interp) {
        MaskedClip clip = make_masked_input(state, cfg.skip);
        SamplerOptions iopt;
        iopt.steps = strided_steps(p.ns.T, opt.interp_steps);
        iopt.seed = stage_seed(seed, 1);
        iopt.guidance_scale = opt.guidance_scale;
        // filling in frames multiplies the effective playback rate
        rate = std::min(rate * cfg.skip, 30.0);
        state = interpolate(p.interp, p.ns, clip, rate, iopt, &cond);
        res.interpolated = state;
    }
    if (opt.run_sr_l) {
        SamplerOptions sopt;
        sopt.steps = strided_steps(p.ns.T, opt.sr_steps);
        sopt.seed = stage_seed(seed, 2);
        state = sr_sample(p.sr_l_t, p.ns, state, rate, sopt, false);
        res.upsampled = state;
    }
    if (opt.run_sr_h) {
        SamplerOptions sopt;
        sopt.steps = strided_steps(p.ns.T, opt.sr_steps);
        sopt.seed = stage_seed(seed, 3);
        sopt.shared_frame_noise = true;  // one noise image per clip, against flicker
        state = sr_sample(p.sr_h, p.ns, state, rate, sopt, true);
    }
    res.video = state;
    return res;
}

}  // namespace

GenerationResult generate(const Pipeline& p, const std::string& text, int fps, uint64_t seed,
                          const GenerateOptions& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    const TextEmbedding xe = p.prior.text.encode(text);
    const ImageEmbedding ye = prior_generate(p.prior.map, xe, stage_seed(seed, 8));
    GenerationResult res = run_chain(p, ye, fps, seed, opt);
    finish_manifest(res, manifest_header(p, "t2v", text, fps, seed), t0);
    return res;
}

GenerationResult animate_image(const Pipeline& p, const Tensor& image, const std::string& text,
                               int fps, uint64_t seed, const GenerateOptions& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    check_rate(fps);
    const int r0 = p.cfg.resolutions[0];
    if (image.shape != Shape{1, 3, r0, r0})
        throw ShapeError("animation wants one (1,3," + std::to_string(r0) + "," +
                         std::to_string(r0) + ") image, got " + shape_str(image.shape));

    const Tensor emb = p.encoder.encode(image);  // (1,dim)
    GenerationResult res;
    res.embedding.vector = Tensor({p.encoder.dim()});
    std::copy(emb.data.begin(), emb.data.end(), res.embedding.vector.data.begin());

    Tensor given({1, 3, 1, r0, r0});
    std::copy(image.data.begin(), image.data.end(), given.data.begin());

    SamplerOptions iopt;
    iopt.steps = strided_steps(p.ns.T, opt.interp_steps);
    iopt.seed = stage_seed(seed, 1);
    iopt.guidance_scale = opt.guidance_scale;
    res.video = extrapolate(p.interp, p.ns, given, MaskedOrigin::image_animation,
                            p.cfg.frames - 1, fps, iopt, &emb);
    finish_manifest(res, manifest_header(p, "animate", text, fps, seed), t0);
    return res;
}

GenerationResult video_variation(const Pipeline& p, const Tensor& video, uint64_t seed,
                                 const GenerateOptions& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    const int r0 = p.cfg.resolutions[0];
    check_rank(video, 5, "variation input");
    if (video.dim(0) != 1 || video.dim(1) != 3 || video.dim(3) != r0 || video.dim(4) != r0)
        throw ShapeError("variation wants a (1,3,F," + std::to_string(r0) + "," +
                         std::to_string(r0) + ") clip, got " + shape_str(video.shape));

    const Tensor per_frame = p.encoder.encode(to_spatial_batch(video).data);  // (F,dim)
    const int F = video.dim(2), D = p.encoder.dim();
    Tensor mean = Tensor::zeros({D});
    for (int f = 0; f < F; ++f)
        for (int d = 0; d < D; ++d) mean[d] += per_frame[f * D + d] / F;
    double norm = 0.0;
    for (int d = 0; d < D; ++d) norm += mean[d] * mean[d];
    norm = std::sqrt(norm);
    if (!(norm > 1e-9)) throw NumericError("frame embeddings cancel out; nothing to condition on");
    for (int d = 0; d < D; ++d) mean[d] /= norm;

    ImageEmbedding ye;
    ye.vector = mean;
    GenerationResult res = run_chain(p, ye, p.cfg.fps, seed, opt);
    finish_manifest(res, manifest_header(p, "variation", "", p.cfg.fps, seed), t0);
    return res;
}

}  // namespace p3d
