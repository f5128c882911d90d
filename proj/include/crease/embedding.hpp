#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "crease/image.hpp"

namespace crease {

/// Unit-norm feature vector produced by the verifier.
struct Embedding {
    std::vector<float> values;

    [[nodiscard]] std::size_t dim() const { return values.size(); }

    [[nodiscard]] double norm() const {
        double s = 0.0;
        for (float v : values) s += static_cast<double>(v) * v;
        return std::sqrt(s);
    }
};

/// Euclidean comparison score; lower is more similar, in [0, 2] for unit vectors.
inline double score(const Embedding& a, const Embedding& b) {
    if (a.dim() != b.dim())
        throw ValidationError("score: embedding dimensions differ (" + std::to_string(a.dim()) + " vs " +
                              std::to_string(b.dim()) + ")");
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) {
        const double d = static_cast<double>(a.values[i]) - b.values[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline double cosine(const Embedding& a, const Embedding& b) {
    if (a.dim() != b.dim()) throw ValidationError("cosine: embedding dimensions differ");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) dot += static_cast<double>(a.values[i]) * b.values[i];
    return dot / (a.norm() * b.norm());
}

}  // namespace crease
