#pragma once

// The six-way augmentation suite. Parameter ranges:
//   translation       dx, dy in [-0.1, 0.1] (fraction of width / height), edge padding
//   random_distortion amplitude in [0, 2] px on a grid x grid control lattice, grid in [2, 8]
//   horizontal_flip   no parameters
//   brightness        factor in [0.6, 1.4], multiplies pixel values
//   blur              Gaussian sigma in [0.3, 1.5] px
//   occlusion         bar covering fraction in [0.05, 0.3] of the rows, shade in [-1, -0.5]

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "crease/image.hpp"
#include "crease/random.hpp"

namespace crease {

enum class AugKind { translation, random_distortion, horizontal_flip, brightness, blur, occlusion };

inline constexpr std::array<AugKind, 6> kAllAugKinds = {AugKind::translation, AugKind::random_distortion,
                                                       AugKind::horizontal_flip, AugKind::brightness,
                                                       AugKind::blur, AugKind::occlusion};

// The kinds used for image-to-augmentation training pairs.
inline constexpr std::array<AugKind, 4> kPairAugKinds = {AugKind::translation, AugKind::random_distortion,
                                                        AugKind::blur, AugKind::brightness};

inline std::string_view to_string(AugKind k) {
    switch (k) {
        case AugKind::translation: return "translation";
        case AugKind::random_distortion: return "random_distortion";
        case AugKind::horizontal_flip: return "horizontal_flip";
        case AugKind::brightness: return "brightness";
        case AugKind::blur: return "blur";
        case AugKind::occlusion: return "occlusion";
    }
    return "?";
}

inline AugKind parse_aug_kind(std::string_view s) {
    for (auto k : kAllAugKinds)
        if (to_string(k) == s) return k;
    throw ValidationError("unknown augmentation kind '" + std::string(s) + "'");
}

struct TranslationParams { double dx = 0.0, dy = 0.0; };
struct DistortionParams { double amplitude = 1.0; int grid = 4; };
struct FlipParams {};
struct BrightnessParams { double factor = 1.0; };
struct BlurParams { double sigma = 0.8; };
struct OcclusionParams { double fraction = 0.2; double shade = -0.9; };

using AugParams =
    std::variant<TranslationParams, DistortionParams, FlipParams, BrightnessParams, BlurParams, OcclusionParams>;

struct AugSpec {
    AugParams params;
    std::uint64_t seed = 0;

    [[nodiscard]] AugKind kind() const { return static_cast<AugKind>(params.index()); }
};

inline void validate(const AugSpec& spec) {
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    std::visit(
        [&](const auto& p) {
            using P = std::decay_t<decltype(p)>;
            bool ok = true;
            if constexpr (std::is_same_v<P, TranslationParams>) ok = in(p.dx, -0.1, 0.1) && in(p.dy, -0.1, 0.1);
            if constexpr (std::is_same_v<P, DistortionParams>) ok = in(p.amplitude, 0.0, 2.0) && p.grid >= 2 && p.grid <= 8;
            if constexpr (std::is_same_v<P, BrightnessParams>) ok = in(p.factor, 0.6, 1.4);
            if constexpr (std::is_same_v<P, BlurParams>) ok = in(p.sigma, 0.3, 1.5);
            if constexpr (std::is_same_v<P, OcclusionParams>) ok = in(p.fraction, 0.05, 0.3) && in(p.shade, -1.0, -0.5);
            if (!ok) throw ValidationError("augmentation '" + std::string(to_string(spec.kind())) + "': parameter out of range");
        },
        spec.params);
}

namespace detail {

inline double sample_replicate(const ImageTensor& img, double y, double x, int c) {
    const int h = img.height(), w = img.width();
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - y0, fx = x - x0;
    return (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
           fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
}

inline ImageTensor translate(const ImageTensor& img, const TranslationParams& p) {
    const int sx = static_cast<int>(std::lround(p.dx * img.width()));
    const int sy = static_cast<int>(std::lround(p.dy * img.height()));
    ImageTensor out(img.shape());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < img.channels(); ++c)
                out.at(y, x, c) = img.at(std::clamp(y - sy, 0, img.height() - 1), std::clamp(x - sx, 0, img.width() - 1), c);
    return out;
}

inline ImageTensor distort(const ImageTensor& img, const DistortionParams& p, std::uint64_t seed) {
    Rng rng(seed);
    const int g = p.grid;
    std::vector<double> gx(static_cast<std::size_t>(g * g)), gy(gx.size());
    for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] = rng.uniform(-1.0, 1.0) * p.amplitude;
        gy[i] = rng.uniform(-1.0, 1.0) * p.amplitude;
    }
    auto lattice = [&](const std::vector<double>& field, double v, double u) {
        const double fy = v * (g - 1), fx = u * (g - 1);
        const int y0 = std::min(static_cast<int>(fy), g - 2), x0 = std::min(static_cast<int>(fx), g - 2);
        const double ty = fy - y0, tx = fx - x0;
        auto at = [&](int y, int x) { return field[static_cast<std::size_t>(y * g + x)]; };
        return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) + ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
    };
    ImageTensor out(img.shape());
    const double hy = std::max(1, img.height() - 1), hx = std::max(1, img.width() - 1);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            const double dy = lattice(gy, y / hy, x / hx), dx = lattice(gx, y / hy, x / hx);
            for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = sample_replicate(img, y + dy, x + dx, c);
        }
    return out;
}

// scales intensity (x + 1) / 2
inline ImageTensor brighten(ImageTensor img, double factor) {
    for (auto& v : img.values()) v = factor * (v + 1.0) - 1.0;
    return img;
}

inline ImageTensor hflip(const ImageTensor& img) {
    ImageTensor out(img.shape());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(y, img.width() - 1 - x, c);
    return out;
}

inline ImageTensor gaussian_blur(const ImageTensor& img, double sigma) {
    const int r = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-i * i / (2.0 * sigma * sigma));
    for (auto& v : k) v /= sum;
    ImageTensor tmp(img.shape()), out(img.shape());
    const int h = img.height(), w = img.width();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < img.channels(); ++c) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * img.at(y, std::clamp(x + i, 0, w - 1), c);
                tmp.at(y, x, c) = acc;
            }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < img.channels(); ++c) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp.at(std::clamp(y + i, 0, h - 1), x, c);
                out.at(y, x, c) = acc;
            }
    return out;
}

inline ImageTensor occlude(const ImageTensor& img, const OcclusionParams& p, std::uint64_t seed) {
    Rng rng(seed);
    const int rows = std::max(1, static_cast<int>(std::floor(p.fraction * img.height())));
    const int top = rng.uniform_int(0, img.height() - rows);
    ImageTensor out = img;
    for (int y = top; y < top + rows; ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = p.shade;
    return out;
}

}  // namespace detail

/// Applies one augmentation. Output has the input's shape and is NOT clamped
/// (brightness may leave [-1, 1]); use augment_clamped at module boundaries.
inline ImageTensor augment(const ImageTensor& image, const AugSpec& spec) {
    validate(spec);
    return std::visit(
        [&](const auto& p) -> ImageTensor {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, TranslationParams>) return detail::translate(image, p);
            if constexpr (std::is_same_v<P, DistortionParams>) return detail::distort(image, p, spec.seed);
            if constexpr (std::is_same_v<P, FlipParams>) return detail::hflip(image);
            if constexpr (std::is_same_v<P, BrightnessParams>) return detail::brighten(image, p.factor);
            if constexpr (std::is_same_v<P, BlurParams>) return detail::gaussian_blur(image, p.sigma);
            if constexpr (std::is_same_v<P, OcclusionParams>) return detail::occlude(image, p, spec.seed);
        },
        spec.params);
}

inline ImageTensor augment_clamped(const ImageTensor& image, const AugSpec& spec) {
    return augment(image, spec).clamp();
}

/// Draws a spec of the given kind with parameters inside the documented ranges.
inline AugSpec random_aug_spec(AugKind kind, Rng& rng) {
    AugSpec spec;
    spec.seed = rng.next_seed();
    switch (kind) {
        case AugKind::translation: spec.params = TranslationParams{rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)}; break;
        case AugKind::random_distortion: spec.params = DistortionParams{rng.uniform(0.5, 1.5), 4}; break;
        case AugKind::horizontal_flip: spec.params = FlipParams{}; break;
        case AugKind::brightness: spec.params = BrightnessParams{rng.uniform(0.8, 1.2)}; break;
        case AugKind::blur: spec.params = BlurParams{rng.uniform(0.4, 0.8)}; break;
        case AugKind::occlusion: spec.params = OcclusionParams{rng.uniform(0.1, 0.3), rng.uniform(-1.0, -0.7)}; break;
    }
    return spec;
}

inline std::string describe(const AugSpec& spec) {
    std::string s(to_string(spec.kind()));
    std::visit(
        [&](const auto& p) {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, TranslationParams>) s += "(" + std::to_string(p.dx) + "," + std::to_string(p.dy) + ")";
            if constexpr (std::is_same_v<P, DistortionParams>) s += "(" + std::to_string(p.amplitude) + "," + std::to_string(p.grid) + ")";
            if constexpr (std::is_same_v<P, BrightnessParams>) s += "(" + std::to_string(p.factor) + ")";
            if constexpr (std::is_same_v<P, BlurParams>) s += "(" + std::to_string(p.sigma) + ")";
            if constexpr (std::is_same_v<P, OcclusionParams>) s += "(" + std::to_string(p.fraction) + "," + std::to_string(p.shade) + ")";
        },
        spec.params);
    return s;
}

}  // namespace crease
