#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace crease {

/// Thrown for caller-side contract violations (bad shapes, out-of-range
/// parameters, malformed files). The CLI maps it to exit code 2.
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct Shape {
    int height = 0;
    int width = 0;
    int channels = 1;

    [[nodiscard]] std::size_t numel() const {
        return static_cast<std::size_t>(height) * width * channels;
    }
    friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
    return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

/// H x W x C image, row-major with interleaved channels. Pixel currency is
/// [-1, 1]; intermediate diffusion states may leave that range, so range is
/// only enforced by clamp() at module boundaries.
class ImageTensor {
public:
    ImageTensor() = default;

    explicit ImageTensor(Shape shape, double fill = 0.0) : shape_(shape) {
        if (shape.height <= 0 || shape.width <= 0 || shape.channels <= 0)
            throw ValidationError("ImageTensor: non-positive dimension " + to_string(shape));
        data_.assign(shape.numel(), fill);
    }

    ImageTensor(int height, int width, int channels = 1, double fill = 0.0)
        : ImageTensor(Shape{height, width, channels}, fill) {}

    ImageTensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
        if (data_.size() != shape.numel())
            throw ValidationError("ImageTensor: value count does not match shape " + to_string(shape));
    }

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] int height() const { return shape_.height; }
    [[nodiscard]] int width() const { return shape_.width; }
    [[nodiscard]] int channels() const { return shape_.channels; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    double& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
    [[nodiscard]] double at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] std::span<double> values() { return data_; }
    [[nodiscard]] std::span<const double> values() const { return data_; }

    ImageTensor& clamp(double lo = -1.0, double hi = 1.0) {
        for (auto& v : data_) v = std::clamp(v, lo, hi);
        return *this;
    }

    [[nodiscard]] bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    ImageTensor& operator+=(const ImageTensor& o) {
        require_same_shape(*this, o, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    ImageTensor& operator-=(const ImageTensor& o) {
        require_same_shape(*this, o, "operator-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    ImageTensor& operator*=(double k) {
        for (auto& v : data_) v *= k;
        return *this;
    }

    friend ImageTensor operator+(ImageTensor a, const ImageTensor& b) { return a += b; }
    friend ImageTensor operator-(ImageTensor a, const ImageTensor& b) { return a -= b; }
    friend ImageTensor operator*(double k, ImageTensor a) { return a *= k; }
    friend ImageTensor operator*(ImageTensor a, double k) { return a *= k; }

    friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

    static void require_same_shape(const ImageTensor& a, const ImageTensor& b, const char* what) {
        if (a.shape_ != b.shape_)
            throw ValidationError(std::string(what) + ": shape mismatch " + to_string(a.shape_) + " vs " +
                                  to_string(b.shape_));
    }

private:
    [[nodiscard]] std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * shape_.width + x) * shape_.channels + c;
    }

    Shape shape_{};
    std::vector<double> data_;
};

inline double max_abs_diff(const ImageTensor& a, const ImageTensor& b) {
    ImageTensor::require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double l2_distance(const ImageTensor& a, const ImageTensor& b) {
    ImageTensor::require_same_shape(a, b, "l2_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

inline double from_u8(unsigned char v) { return v / 127.5 - 1.0; }

inline unsigned char to_u8(double v) {
    return static_cast<unsigned char>(std::lround(std::clamp((v + 1.0) * 127.5, 0.0, 255.0)));
}

}  // namespace crease
