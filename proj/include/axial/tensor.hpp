#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "axial/common.hpp"
#include "axial/rng.hpp"

namespace axial {

// Dense (batch, height, width, channel) extents, row-major with channels
// fastest. Axial kernels slice width lines as contiguous runs of c-vectors.
struct Shape4 {
    int b = 0, h = 0, w = 0, c = 0;

    std::size_t numel() const {
        return std::size_t(b) * h * w * std::size_t(c);
    }
    bool operator==(const Shape4&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << b << "," << h << "," << w << "," << c << ")";
        return os.str();
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape4 s) : shape_(s), data_(s.numel(), T(0)) {}
    Tensor(Shape4 s, T fill) : shape_(s), data_(s.numel(), fill) {}
    Tensor(Shape4 s, std::vector<T> data) : shape_(s), data_(std::move(data)) {
        if (data_.size() != shape_.numel())
            throw DimensionError("tensor data length " +
                                 std::to_string(data_.size()) +
                                 " does not match shape " + shape_.str());
    }

    const Shape4& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& at(int b, int h, int w, int c) {
        return data_[idx(b, h, w, c)];
    }
    T at(int b, int h, int w, int c) const {
        return data_[idx(b, h, w, c)];
    }
    std::size_t idx(int b, int h, int w, int c) const {
        return ((std::size_t(b) * shape_.h + h) * shape_.w + w) * shape_.c + c;
    }

    void fill(T v) { data_.assign(data_.size(), v); }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    static Tensor randn(Shape4 s, Rng& rng, double stddev = 1.0) {
        Tensor t(s);
        for (auto& v : t.data_) v = T(rng.normal(0.0, stddev));
        return t;
    }

    static Tensor uniform(Shape4 s, Rng& rng, double lo = -1.0,
                          double hi = 1.0) {
        Tensor t(s);
        for (auto& v : t.data_) v = T(rng.uniform(lo, hi));
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i)
            out.data()[i] = U(data_[i]);
        return out;
    }

private:
    Shape4 shape_;
    std::vector<T> data_;
};

// Matrix convenience: rows x cols stored as (1, rows, cols, 1).
inline Shape4 mat_shape(int rows, int cols) { return Shape4{1, rows, cols, 1}; }

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("max_abs_diff shape mismatch " + a.shape().str() +
                             " vs " + b.shape().str());
    T m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// Largest elementwise |a-b| / max(|a|, |b|, floor).
template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b,
                    double floor = 1e-8) {
    if (a.shape() != b.shape())
        throw DimensionError("max_rel_diff shape mismatch " + a.shape().str() +
                             " vs " + b.shape().str());
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double x = a.data()[i], y = b.data()[i];
        const double denom = std::max({std::abs(x), std::abs(y), floor});
        m = std::max(m, std::abs(x - y) / denom);
    }
    return m;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
    const auto& s = x.shape();
    if (c0 < 0 || c1 > s.c || c0 >= c1)
        throw DimensionError("slice_channels range [" + std::to_string(c0) +
                             "," + std::to_string(c1) + ") invalid for " +
                             s.str());
    Tensor<T> out(Shape4{s.b, s.h, s.w, c1 - c0});
    for (int b = 0; b < s.b; ++b)
        for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w)
                for (int c = c0; c < c1; ++c)
                    out.at(b, h, w, c - c0) = x.at(b, h, w, c);
    return out;
}

}  // namespace axial
