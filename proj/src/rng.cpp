#include "p3d/rng.hpp"

#include <cmath>

namespace p3d {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(uint64_t seed, uint64_t stream) {
    uint64_t sm = seed;
    s_[0] = splitmix64(sm);
    sm ^= stream * 0xda942042e4dd58b5ULL + 0x9e3779b97f4a7c15ULL;
    s_[1] = splitmix64(sm);
    s_[2] = splitmix64(sm);
    s_[3] = splitmix64(sm);
    // xoshiro must not start at the all-zero state
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[3] = 1;
}

uint64_t Rng::next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
    if (hi < lo) throw ConfigError("uniform_int: hi < lo");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_normal_ = r * std::cos(a);
    has_cached_normal_ = true;
    return r * std::sin(a);
}

double Rng::gamma(double shape) {
    if (shape <= 0.0) throw ConfigError("gamma: shape must be > 0");
    if (shape < 1.0) {
        // boost: Gamma(a) = Gamma(a+1) * U^(1/a)
        double u = uniform();
        while (u <= 0.0) u = uniform();
        return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = normal();
        double v = 1.0 + c * x;
        if (v <= 0.0) continue;
        v = v * v * v;
        double u = uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

double Rng::beta(double a, double b) {
    double x = gamma(a);
    double y = gamma(b);
    double s = x + y;
    if (s <= 0.0) return 0.5;  // both underflowed; vanishing probability
    return x / s;
}

void Rng::fill_normal(Tensor& t, double stddev) {
    for (double& v : t.data) v = normal() * stddev;
}

void Rng::fill_uniform(Tensor& t, double lo, double hi) {
    for (double& v : t.data) v = uniform(lo, hi);
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    fill_normal(t, stddev);
    return t;
}

}  // namespace p3d
