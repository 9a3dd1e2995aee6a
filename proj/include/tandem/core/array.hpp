#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace tandem {

/// Dense row-major array of 64-bit reals. The only numeric container used
/// throughout the library; shapes are explicit and never broadcast silently.
class Array {
public:
    Array() = default;

    explicit Array(std::vector<int64_t> shape)
        : shape_(std::move(shape)), v_(checked_numel(shape_), 0.0) {}

    Array(std::vector<int64_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), v_(std::move(values)) {
        if (static_cast<int64_t>(v_.size()) != checked_numel(shape_))
            throw std::invalid_argument("Array: value count does not match shape");
    }

    static Array scalar(double x) { return Array({1}, {x}); }

    static Array zeros_like(const Array& a) { return Array(a.shape_); }

    static Array full(std::vector<int64_t> shape, double x) {
        Array a(std::move(shape));
        std::fill(a.v_.begin(), a.v_.end(), x);
        return a;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(v_.size()); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    double& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

    /// 2-D accessors; valid only when ndim()==2.
    double& at(int64_t r, int64_t c) { return v_[static_cast<size_t>(r * shape_[1] + c)]; }
    double at(int64_t r, int64_t c) const { return v_[static_cast<size_t>(r * shape_[1] + c)]; }

    bool same_shape(const Array& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    Array reshaped(std::vector<int64_t> shape) const {
        Array a(std::move(shape), v_);
        return a;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    static int64_t checked_numel(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d <= 0) throw std::invalid_argument("Array: non-positive dimension");
            n *= d;
        }
        return n;
    }

    std::vector<int64_t> shape_;
    std::vector<double> v_;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace tandem
