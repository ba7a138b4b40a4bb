#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ccm/errors.hpp"

namespace ccm {

// Dense row-major n-d array. float is the working precision; the double
// instantiation exists for finite-difference gradient checks.
template <typename T>
class TensorT {
  public:
    TensorT() = default;

    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(checked_numel(shape_), T(0));
    }

    TensorT(std::vector<int> shape, T fill) : shape_(std::move(shape)) {
        data_.assign(checked_numel(shape_), fill);
    }

    TensorT(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != static_cast<long>(data_.size()))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string());
    }

    static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }
    static TensorT full(std::vector<int> shape, T v) { return TensorT(std::move(shape), v); }

    static TensorT scalar(T v) { return TensorT({1}, std::vector<T>{v}); }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    long numel() const { return static_cast<long>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::vector<T>& raw() { return data_; }
    const std::vector<T>& raw() const { return data_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](long i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](long i) const { return data_[static_cast<size_t>(i)]; }

    // Indexed access, row-major. No bounds checks in the hot paths.
    T& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    const T& at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }

    T& at(int i, int j, int k) {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    const T& at(int i, int j, int k) const {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }

    T& at(int b, int i, int j, int k) {
        return data_[((static_cast<size_t>(b) * shape_[1] + i) * shape_[2] + j) * shape_[3] + k];
    }
    const T& at(int b, int i, int j, int k) const {
        return data_[((static_cast<size_t>(b) * shape_[1] + i) * shape_[2] + j) * shape_[3] + k];
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    // Reshape without copying; total element count must be preserved.
    TensorT reshaped(std::vector<int> shape) const {
        TensorT out;
        out.shape_ = std::move(shape);
        if (checked_numel(out.shape_) != numel())
            throw DimensionError("reshape from " + shape_string() + " changes element count");
        out.data_ = data_;
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    T min() const { return data_.empty() ? T(0) : *std::min_element(data_.begin(), data_.end()); }
    T max() const { return data_.empty() ? T(0) : *std::max_element(data_.begin(), data_.end()); }
    T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }
    T mean() const { return data_.empty() ? T(0) : sum() / static_cast<T>(data_.size()); }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_string() const {
        std::ostringstream ss;
        ss << "[";
        for (size_t i = 0; i < shape_.size(); ++i) ss << (i ? "," : "") << shape_[i];
        ss << "]";
        return ss.str();
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape_);
        for (long i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
        return out;
    }

  private:
    static long checked_numel(const std::vector<int>& shape) {
        long n = 1;
        for (int e : shape) {
            if (e <= 0) throw DimensionError("non-positive extent in tensor shape");
            n *= e;
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Rescales values to [0,1] by min/max. A constant image maps to all zeros,
// so an all-zero input stays all-zero.
template <typename T>
TensorT<T> normalize_unit(const TensorT<T>& x) {
    TensorT<T> out(x.shape());
    const T lo = x.min(), hi = x.max();
    const T range = hi - lo;
    if (!(range > T(0))) return out;
    for (long i = 0; i < x.numel(); ++i) out[i] = (x[i] - lo) / range;
    return out;
}

// Uniform draw helper used everywhere randomness is needed: draws in double
// for identical values across float/double instantiations.
template <typename T>
void fill_uniform(TensorT<T>& t, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (long i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
}

}  // namespace ccm
