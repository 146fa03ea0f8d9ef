#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "recticast/errors.hpp"

namespace recticast {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

/// Dense row-major N-dimensional array. The empty shape denotes a scalar
/// holding exactly one element.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() : shape_{0} {}
    explicit BasicTensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_to_string(shape_));
        }
    }

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T{0}); }
    static BasicTensor full(Shape shape, T value) { return BasicTensor(std::move(shape), value); }
    static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t dim() const noexcept { return shape_.size(); }
    std::size_t size(std::size_t axis) const {
        if (axis >= shape_.size()) {
            throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                                 shape_to_string(shape_));
        }
        return shape_[axis];
    }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    template <typename... Idx>
    T& at(Idx... idx) {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }
    template <typename... Idx>
    const T& at(Idx... idx) const {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }

    /// Same data, new shape. Element count must be preserved.
    BasicTensor reshaped(Shape shape) const& {
        BasicTensor out = *this;
        out.reshape_inplace(std::move(shape));
        return out;
    }
    BasicTensor reshaped(Shape shape) && {
        reshape_inplace(std::move(shape));
        return std::move(*this);
    }
    void reshape_inplace(Shape shape) {
        if (shape_numel(shape) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " +
                                 shape_to_string(shape));
        }
        shape_ = std::move(shape);
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    /// Contiguous slab [begin, end) along the leading axis (copy).
    BasicTensor slice0(std::size_t begin, std::size_t end) const;

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    BasicTensor<U> cast() const {
        return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size()) {
            throw DimensionError("index rank " + std::to_string(idx.size()) + " does not match shape " +
                                 shape_to_string(shape_));
        }
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : idx) {
            if (i >= shape_[axis]) {
                throw DimensionError("index out of range on axis " + std::to_string(axis));
            }
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
BasicTensor<T> BasicTensor<T>::slice0(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0]) {
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") invalid for shape " + shape_to_string(shape_));
    }
    const std::size_t inner = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
    Shape out_shape = shape_;
    out_shape[0] = end - begin;
    return BasicTensor(std::move(out_shape),
                       std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(begin * inner),
                                      data_.begin() + static_cast<std::ptrdiff_t>(end * inner)));
}

/// Concatenate along the leading axis. All trailing dims must agree.
template <typename T>
BasicTensor<T> concat0(std::span<const BasicTensor<T>> parts);

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": shape " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
}

/// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, backed by CBLAS.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc);

}  // namespace recticast
