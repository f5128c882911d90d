#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "crease/image.hpp"

namespace crease {

/// splitmix64 finalizer; used to derive independent child seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = mix_seed(base);
    for (auto p : path) s = mix_seed(s ^ mix_seed(p + 0x632be59bd9b4e019ULL));
    return s;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
    double normal(double mean = 0.0, double stddev = 1.0) { return std::normal_distribution<double>(mean, stddev)(engine_); }
    std::uint64_t next_seed() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

    ImageTensor normal_image(Shape shape) {
        ImageTensor img(shape);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& v : img.values()) v = dist(engine_);
        return img;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace crease
