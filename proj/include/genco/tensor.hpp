#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "genco/error.hpp"

namespace genco {

// Dense row-major tensor. Rank 0 is a scalar (one element, empty shape).
// The same type carries values and gradients; autodiff lives in graph.hpp.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), T(0));
    }

    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel_of(shape_))
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(T v) {
        Tensor t;
        t.data_.assign(1, v);
        return t;
    }

    static size_t numel_of(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int size(int i) const { return shape_[static_cast<size_t>(i)]; }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty() && shape_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    // 2D / 4D accessors, row-major.
    T& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    const T& at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }

    T& at(int b, int c, int y, int x) {
        return data_[((static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at(int b, int c, int y, int x) const {
        return data_[((static_cast<size_t>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != numel()) shape_fail("reshape", shape_, shape);
        return Tensor(std::move(shape), data_);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    void add_(const Tensor& o) {
        if (!same_shape(o)) shape_fail("add_", shape_, o.shape_);
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace genco
