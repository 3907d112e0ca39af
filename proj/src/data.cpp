#include "p3d/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "p3d/errors.hpp"

namespace p3d {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kShapeRadius = 2.2;   // circle/square half-extent
constexpr double kTriangleCirc = 3.2;  // triangle circumradius (similar area)

}  // namespace

double shape_extent(ShapeKind k) {
    return k == ShapeKind::triangle ? kTriangleCirc : kShapeRadius;
}

std::string shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
    }
    throw ConfigError("unknown shape kind");
}

ShapeKind shape_from_name(const std::string& s) {
    if (s == "circle") return ShapeKind::circle;
    if (s == "square") return ShapeKind::square;
    if (s == "triangle") return ShapeKind::triangle;
    throw ConfigError("unknown shape '" + s + "'");
}

std::string trajectory_name(TrajectoryKind k) {
    return k == TrajectoryKind::linear ? "linear" : "circular";
}

TrajectoryKind trajectory_from_name(const std::string& s) {
    if (s == "linear") return TrajectoryKind::linear;
    if (s == "circular") return TrajectoryKind::circular;
    throw ConfigError("unknown trajectory '" + s + "'");
}

const std::vector<std::pair<std::string, std::array<double, 3>>>& color_palette() {
    static const std::vector<std::pair<std::string, std::array<double, 3>>> palette = {
        {"red", {1.0, 0.15, 0.15}},  {"green", {0.15, 1.0, 0.15}},
        {"blue", {0.25, 0.35, 1.0}}, {"yellow", {1.0, 1.0, 0.2}},
        {"cyan", {0.2, 1.0, 1.0}},   {"white", {1.0, 1.0, 1.0}},
    };
    return palette;
}

std::array<double, 3> color_rgb(const std::string& name) {
    for (const auto& [n, rgb] : color_palette())
        if (n == name) return rgb;
    throw ConfigError("unknown color '" + name + "'");
}

namespace {

struct Geometry {
    bool circular = false;
    // linear: start and unit heading, plus the fold box the center bounces in
    double x0 = 0, y0 = 0, dx = 0, dy = 0;
    double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
    // circular: fixed center, radius, phase; omega = velocity / radius
    double cx = 0, cy = 0, radius = 0, phase = 0, omega = 0;
};

Geometry draw_geometry(const SyntheticSpec& spec, uint64_t seed) {
    const double ext = shape_extent(spec.kind);
    Geometry g;
    Rng r(seed);
    if (spec.trajectory == TrajectoryKind::linear) {
        g.lo_x = ext;
        g.hi_x = spec.width - 1 - ext;
        g.lo_y = ext;
        g.hi_y = spec.height - 1 - ext;
        if (g.hi_x <= g.lo_x || g.hi_y <= g.lo_y)
            throw ConfigError("canvas too small for the shape");
        g.x0 = r.uniform(g.lo_x, g.hi_x);
        g.y0 = r.uniform(g.lo_y, g.hi_y);
        const double theta = r.uniform(0.0, 2.0 * kPi);
        g.dx = std::cos(theta);
        g.dy = std::sin(theta);
        return g;
    }
    g.circular = true;
    const double half = 0.5 * (std::min(spec.width, spec.height) - 1);
    const double rmax = half - ext - 0.5;
    if (rmax <= 2.0) throw ConfigError("canvas too small for a circular path");
    g.radius = r.uniform(2.0, rmax);
    g.cx = r.uniform(g.radius + ext, spec.width - 1 - g.radius - ext);
    g.cy = r.uniform(g.radius + ext, spec.height - 1 - g.radius - ext);
    g.phase = r.uniform(0.0, 2.0 * kPi);
    g.omega = spec.velocity / g.radius;
    return g;
}

// triangle-wave reflection of q into [lo, hi]
double fold(double q, double lo, double hi) {
    const double L = hi - lo;
    double u = std::fmod(q - lo, 2.0 * L);
    if (u < 0.0) u += 2.0 * L;
    return lo + (u <= L ? u : 2.0 * L - u);
}

std::array<double, 2> position_at(const SyntheticSpec& spec, const Geometry& g, double t) {
    if (g.circular) {
        const double a = g.phase + g.omega * t;
        return {g.cx + g.radius * std::cos(a), g.cy + g.radius * std::sin(a)};
    }
    return {fold(g.x0 + g.dx * spec.velocity * t, g.lo_x, g.hi_x),
            fold(g.y0 + g.dy * spec.velocity * t, g.lo_y, g.hi_y)};
}

double signed_distance(ShapeKind kind, double px, double py, double X, double Y) {
    switch (kind) {
        case ShapeKind::circle: return std::hypot(px - X, py - Y) - kShapeRadius;
        case ShapeKind::square:
            return std::max(std::fabs(px - X), std::fabs(py - Y)) - kShapeRadius;
        case ShapeKind::triangle: break;
    }
    // equilateral triangle pointing up (screen y grows downward): intersection
    // of three half-planes, signed distance is the largest plane distance
    double sd = -1e9;
    for (int k = 0; k < 3; ++k) {
        const double a0 = -kPi / 2 + 2.0 * kPi * k / 3.0;
        const double a1 = -kPi / 2 + 2.0 * kPi * (k + 1) / 3.0;
        const double vx0 = X + kTriangleCirc * std::cos(a0), vy0 = Y + kTriangleCirc * std::sin(a0);
        const double vx1 = X + kTriangleCirc * std::cos(a1), vy1 = Y + kTriangleCirc * std::sin(a1);
        double nx = vy1 - vy0, ny = vx0 - vx1;  // normal of the edge
        const double len = std::hypot(nx, ny);
        nx /= len;
        ny /= len;
        if (nx * (X - vx0) + ny * (Y - vy0) > 0.0) {  // make it point away from the center
            nx = -nx;
            ny = -ny;
        }
        sd = std::max(sd, nx * (px - vx0) + ny * (py - vy0));
    }
    return sd;
}

std::string heading_word(const Geometry& g) {
    if (g.circular) return "in a circle";
    if (std::fabs(g.dx) >= std::fabs(g.dy)) return g.dx >= 0.0 ? "right" : "left";
    return g.dy >= 0.0 ? "down" : "up";  // raster rows grow downward
}

}  // namespace

std::array<double, 2> object_position(const SyntheticSpec& spec, double time, uint64_t seed) {
    return position_at(spec, draw_geometry(spec, seed), time);
}

RenderedClip render_clip(const SyntheticSpec& spec, int fps, int frames, uint64_t seed,
                         int supersample) {
    if (fps < 1 || fps > spec.native_rate)
        throw ConfigError("fps must lie in [1," + std::to_string(spec.native_rate) + "]");
    if (frames < 1) throw ConfigError("need at least one frame");
    if (supersample < 1) throw ConfigError("supersample factor must be at least 1");
    const Geometry g = draw_geometry(spec, seed);
    const std::array<double, 3> rgb = color_rgb(spec.color);
    const int ss = supersample;
    const int H = spec.height * ss, W = spec.width * ss;

    RenderedClip out;
    out.video = Tensor({1, 3, frames, H, W});
    out.caption = spec.color + " " + shape_name(spec.kind) + " moving " + heading_word(g);
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int f = 0; f < frames; ++f) {
        const auto [X, Y] = position_at(spec, g, static_cast<double>(f) / fps);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                // pixel center in base-canvas units; the distance scales back
                // up so the soft edge stays one output pixel wide
                const double bx = (x + 0.5) / ss - 0.5, by = (y + 0.5) / ss - 0.5;
                const double sd = ss * signed_distance(spec.kind, bx, by, X, Y);
                const double cov = std::clamp(0.5 - sd, 0.0, 1.0);
                for (int c = 0; c < 3; ++c)
                    out.video[(static_cast<int64_t>(c) * frames + f) * hw + y * W + x] =
                        2.0 * cov * rgb[c] - 1.0;
            }
    }
    return out;
}

namespace {

// template mass at unit scale, measured once on a reference grid; used to
// size each candidate template so that correlation compares geometry, not
// area (a fixed-size square template otherwise wins on any spread-out blob)
double unit_template_mass(ShapeKind kind) {
    static const std::array<double, 3> cache = [] {
        std::array<double, 3> a{};
        for (ShapeKind k : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle}) {
            double sum = 0.0;
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 16; ++x) {
                    const double sd = signed_distance(k, x, y, 7.5, 7.5);
                    sum += std::clamp(0.5 - sd, 0.0, 1.0);
                }
            a[static_cast<size_t>(k)] = sum;
        }
        return a;
    }();
    return cache[static_cast<size_t>(kind)];
}

}  // namespace

ShapeKind classify_shape(const Tensor& frame) {
    Shape s = frame.shape;
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3 || s[0] != 3) throw ShapeError("classify_shape wants one (3,H,W) frame");
    const int H = s[1], W = s[2];
    const int64_t hw = static_cast<int64_t>(H) * W;

    // foreground intensity and its centroid
    std::vector<double> m(static_cast<size_t>(hw));
    double mass = 0.0, mx = 0.0, my = 0.0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double v = 0.0;
            for (int c = 0; c < 3; ++c) v = std::max(v, (frame[c * hw + y * W + x] + 1.0) / 2.0);
            v = std::clamp(v, 0.0, 1.0);
            m[static_cast<size_t>(y) * W + x] = v;
            mass += v;
            mx += v * x;
            my += v * y;
        }
    if (mass <= 1e-9) return ShapeKind::circle;
    const double X = mx / mass;
    const double Y = my / mass;

    ShapeKind best = ShapeKind::circle;
    double best_score = -2.0;
    for (ShapeKind kind : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle}) {
        // size the template so its mass matches the observed mass
        const double scale = std::sqrt(mass / unit_template_mass(kind));
        double dot = 0.0, tt = 0.0, mm = 0.0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double sd =
                    scale * signed_distance(kind, x / scale, y / scale, X / scale, Y / scale);
                const double tmpl = std::clamp(0.5 - sd, 0.0, 1.0);
                const double v = m[static_cast<size_t>(y) * W + x];
                dot += tmpl * v;
                tt += tmpl * tmpl;
                mm += v * v;
            }
        const double score = dot / std::sqrt(std::max(tt * mm, 1e-12));
        if (score > best_score) {
            best_score = score;
            best = kind;
        }
    }
    return best;
}

double CurriculumState::progress() const {
    if (total_steps < 1) throw ConfigError("curriculum needs at least one step");
    if (step < 0 || step > total_steps)
        throw ConfigError("curriculum step outside [0," + std::to_string(total_steps) + "]");
    return static_cast<double>(step) / total_steps;
}

double CurriculumState::beta_a() const { return 5.0 - 4.0 * progress(); }
double CurriculumState::beta_b() const { return 1.0 + 2.0 * progress(); }

int sample_fps(const CurriculumState& cur, Rng& rng) {
    const double u = rng.beta(cur.beta_a(), cur.beta_b());
    const int fps = 1 + static_cast<int>(std::floor(29.0 * u));
    return std::clamp(fps, 1, 30);
}

Corpus make_corpus(int size, uint64_t seed) {
    if (size < 1) throw ConfigError("corpus needs at least one spec");
    Rng r(seed);
    const auto& palette = color_palette();
    Corpus corpus;
    corpus.reserve(static_cast<size_t>(size));
    for (int i = 0; i < size; ++i) {
        CorpusEntry e;
        e.spec.kind = static_cast<ShapeKind>(r.uniform_int(0, 2));
        e.spec.color = palette[static_cast<size_t>(r.uniform_int(
                                   0, static_cast<int>(palette.size()) - 1))]
                           .first;
        e.spec.trajectory = static_cast<TrajectoryKind>(r.uniform_int(0, 1));
        e.spec.velocity = r.uniform(6.0, 14.0);
        e.seed = r.next_u64();
        corpus.push_back(std::move(e));
    }
    return corpus;
}

void write_manifest(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write manifest at " + path);
    out << "# synthetic corpus: one spec per line\n";
    char vel[40];
    for (const CorpusEntry& e : corpus) {
        std::snprintf(vel, sizeof vel, "%.17g", e.spec.velocity);
        out << "kind=" << shape_name(e.spec.kind) << " color=" << e.spec.color
            << " trajectory=" << trajectory_name(e.spec.trajectory) << " velocity=" << vel
            << " height=" << e.spec.height << " width=" << e.spec.width
            << " rate=" << e.spec.native_rate << " seed=" << e.seed << "\n";
    }
    if (!out) throw ConfigError("failed while writing manifest at " + path);
}

Corpus read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read manifest at " + path);
    Corpus corpus;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const std::string where = "manifest line " + std::to_string(lineno) + ": ";
        CorpusEntry e;
        bool saw_seed = false;
        std::istringstream fields(line);
        std::string tok;
        while (fields >> tok) {
            const size_t eq = tok.find('=');
            if (eq == std::string::npos) throw ConfigError(where + "expected key=value");
            const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            try {
                if (key == "kind") e.spec.kind = shape_from_name(val);
                else if (key == "color") e.spec.color = val;
                else if (key == "trajectory") e.spec.trajectory = trajectory_from_name(val);
                else if (key == "velocity") e.spec.velocity = std::stod(val);
                else if (key == "height") e.spec.height = std::stoi(val);
                else if (key == "width") e.spec.width = std::stoi(val);
                else if (key == "rate") e.spec.native_rate = std::stoi(val);
                else if (key == "seed") { e.seed = std::stoull(val); saw_seed = true; }
                else throw ConfigError("unknown key '" + key + "'");
            } catch (const std::invalid_argument& ex) {
                throw ConfigError(where + ex.what());
            } catch (const std::out_of_range&) {
                throw ConfigError(where + "value out of range in '" + tok + "'");
            }
        }
        if (!saw_seed) throw ConfigError(where + "missing seed");
        color_rgb(e.spec.color);  // validate the name now, not at render time
        corpus.push_back(std::move(e));
    }
    return corpus;
}

Batch make_batch(const Corpus& corpus, int batch_size, int frames, const CurriculumState& cur,
                 Rng& rng) {
    if (corpus.empty()) throw ConfigError("corpus is empty");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    const int H = corpus[0].spec.height, W = corpus[0].spec.width;
    for (const CorpusEntry& e : corpus)
        if (e.spec.height != H || e.spec.width != W)
            throw ShapeError("corpus canvases disagree");

    Batch batch;
    batch.clips = Tensor({batch_size, 3, frames, H, W});
    batch.first_frames = Tensor({batch_size, 3, H, W});
    batch.fps.resize(static_cast<size_t>(batch_size));
    batch.captions.resize(static_cast<size_t>(batch_size));
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int b = 0; b < batch_size; ++b) {
        const CorpusEntry& e = corpus[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))];
        const int fps = sample_fps(cur, rng);
        RenderedClip clip = render_clip(e.spec, fps, frames, e.seed);
        std::copy(clip.video.data.begin(), clip.video.data.end(),
                  batch.clips.data.begin() + static_cast<int64_t>(b) * 3 * frames * hw);
        for (int c = 0; c < 3; ++c)
            std::copy_n(clip.video.data.begin() + static_cast<int64_t>(c) * frames * hw, hw,
                        batch.first_frames.data.begin() +
                            (static_cast<int64_t>(b) * 3 + c) * hw);
        batch.fps[static_cast<size_t>(b)] = fps;
        batch.captions[static_cast<size_t>(b)] = std::move(clip.caption);
    }
    return batch;
}

}  // namespace p3d
