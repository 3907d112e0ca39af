#pragma once

#include <cstdint>

#include "p3d/tensor.hpp"

namespace p3d {

// Deterministic RNG used everywhere randomness is needed. The algorithm is
// pinned so runs reproduce across compilers and so the draws can be replayed
// from another language if needed:
//
//   state:    xoshiro256++ (Blackman/Vigna), seeded by splitmix64 applied to
//             (seed, then seed^stream) four times.
//   uniform:  next_u64() >> 11, scaled by 2^-53  ->  [0, 1)
//   normal:   Box-Muller on two uniforms; the pair is consumed sin-then-cos,
//             the cos value is cached and returned on the next call.
//   gamma:    Marsaglia-Tsang squeeze for shape >= 1 (boosted below 1).
//   beta:     X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
//
// Separate logical streams (data, init, noise, ...) use the same seed with
// distinct stream ids so adding draws to one stream never shifts another.
class Rng {
  public:
    explicit Rng(uint64_t seed, uint64_t stream = 0);

    uint64_t next_u64();
    double uniform();                    // [0, 1)
    double uniform(double lo, double hi);
    int uniform_int(int lo, int hi);     // inclusive bounds
    double normal();                     // standard normal
    double gamma(double shape);          // scale 1, shape > 0
    double beta(double a, double b);

    void fill_normal(Tensor& t, double stddev = 1.0);
    void fill_uniform(Tensor& t, double lo, double hi);
    Tensor normal_tensor(Shape shape, double stddev = 1.0);

  private:
    uint64_t s_[4];
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

}  // namespace p3d
