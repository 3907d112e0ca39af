#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "p3d/rng.hpp"
#include "p3d/tensor.hpp"

namespace p3d {

enum class ShapeKind { circle, square, triangle };
enum class TrajectoryKind { linear, circular };

std::string shape_name(ShapeKind k);
ShapeKind shape_from_name(const std::string& s);
std::string trajectory_name(TrajectoryKind k);
TrajectoryKind trajectory_from_name(const std::string& s);

// Named colors the corpus draws from; rgb components in [0,1].
const std::vector<std::pair<std::string, std::array<double, 3>>>& color_palette();
std::array<double, 3> color_rgb(const std::string& name);  // ConfigError when unknown

// Half-extent of the rasterized shape in pixels; the object center keeps this
// margin from every canvas edge.
double shape_extent(ShapeKind k);

// One synthetic video: a colored shape gliding over a dark canvas along a
// continuous trajectory. velocity is pixels per second along the path; a
// render seed fixes the start position and heading.
struct SyntheticSpec {
    ShapeKind kind = ShapeKind::circle;
    std::string color = "red";
    TrajectoryKind trajectory = TrajectoryKind::linear;
    double velocity = 10.0;
    int height = 16;
    int width = 16;
    int native_rate = 30;  // highest rate a clip may be sampled at
};

// Folded (reflected) object center at a point in continuous time; linear
// paths bounce off the canvas walls, circular ones fit inside by construction.
std::array<double, 2> object_position(const SyntheticSpec& spec, double time, uint64_t seed);

struct RenderedClip {
    Tensor video;         // (1,3,F,H,W) in [-1,1]
    std::string caption;  // e.g. "red circle moving right"
};

// Samples `frames` frames at times f/fps from the trajectory and rasterizes
// the shape with a soft one-pixel edge. Same (spec, fps, seed) -> same clip.
// supersample > 1 renders the identical scene on a supersample-times finer
// grid (same geometry and trajectory, edge stays one output pixel soft), which
// is how matched low/high resolution pairs are made.
RenderedClip render_clip(const SyntheticSpec& spec, int fps, int frames, uint64_t seed,
                         int supersample = 1);

// Best-matching shape for a single frame, (3,H,W) or (1,3,H,W): foreground
// mass centroid, then normalized correlation against each shape's template
// rendered at that centroid. Scale is inferred as H / 16 (the base canvas).
ShapeKind classify_shape(const Tensor& frame);

// Training-time sampling-rate schedule. Early steps favor high rates (small
// inter-frame motion), late steps favor low rates; the mixing weights walk
// linearly from Beta(5,1) to Beta(1,3).
struct CurriculumState {
    int step = 0;
    int total_steps = 1;

    double progress() const;  // step/total_steps, validated
    double beta_a() const;
    double beta_b() const;
};

// Rate in [1, 30]. The unit draw is cut into 30 equal-width buckets
// (1 + floor(29u)); rounding instead would halve the two end buckets and
// starve the extreme rates.
int sample_fps(const CurriculumState& cur, Rng& rng);

struct CorpusEntry {
    SyntheticSpec spec;
    uint64_t seed = 0;  // fixes the clip's geometry for good
};
using Corpus = std::vector<CorpusEntry>;

Corpus make_corpus(int size, uint64_t seed);

// One spec per line as key=value fields, `#` starts a comment line. Velocity
// survives the round trip exactly.
void write_manifest(const Corpus& corpus, const std::string& path);
Corpus read_manifest(const std::string& path);

struct Batch {
    Tensor clips;        // (B,3,F,H,W) in [-1,1]
    std::vector<int> fps;
    Tensor first_frames;  // (B,3,H,W): embedding targets for the prior pair
    std::vector<std::string> captions;
};

// Uniformly picks corpus entries, draws each clip's rate from the curriculum,
// and renders. Entry geometry is pinned by the corpus seed, so the same video
// reappears at different rates.
Batch make_batch(const Corpus& corpus, int batch_size, int frames,
                 const CurriculumState& cur, Rng& rng);

}  // namespace p3d
