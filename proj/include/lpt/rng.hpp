#pragma once

// Deterministic counter-style RNG. Every stochastic draw in the project is
// made from a stream derived from (master seed, purpose tag, epoch, iter,
// slot), so replaying any (seed, config) pair or resuming from a checkpoint
// reproduces the same draws without carrying mutable generator state around.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lpt/common.hpp"

namespace lpt {

class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : state_(seed ^ 0x9e3779b97f4a7c15ull) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    // Standard normal via Box-Muller (cosine branch only, so one draw
    // consumes exactly two words of the stream).
    double normal() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Normal(mean, std) truncated to [mean - cut*std, mean + cut*std].
    double truncated_normal(double mean, double std, double cut = 2.0) {
        for (;;) {
            double z = normal();
            if (z >= -cut && z <= cut) return mean + std * z;
        }
    }

    // Gamma(alpha, 1) by Marsaglia-Tsang, with the boost trick for alpha < 1.
    double gamma(double alpha) {
        if (alpha < 1.0) {
            double u = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        double d = alpha - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
        }
    }

    double beta(double a, double b) {
        double x = gamma(a);
        double y = gamma(b);
        return x / (x + y);
    }

    // In-place Fisher-Yates shuffle.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent stream; folding is order-sensitive by design.
    Rng derive(uint64_t word) const {
        Rng r(*this);
        r.state_ = mix(r.state_ ^ (word + 0x9e3779b97f4a7c15ull));
        return r;
    }
    Rng derive(const std::string& tag) const { return derive(fnv1a64(tag)); }
    Rng derive(const std::string& tag, uint64_t a) const { return derive(tag).derive(a); }
    Rng derive(const std::string& tag, uint64_t a, uint64_t b) const {
        return derive(tag).derive(a).derive(b);
    }
    Rng derive(const std::string& tag, uint64_t a, uint64_t b, uint64_t c) const {
        return derive(tag).derive(a).derive(b).derive(c);
    }

    uint64_t state() const { return state_; }

  private:
    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t state_;
};

}  // namespace lpt
