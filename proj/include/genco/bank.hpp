#pragma once

#include <cmath>
#include <string>

#include "genco/error.hpp"
#include "genco/tensor.hpp"

namespace genco {

// Fixed-capacity FIFO queue of L2-normalized negative keys. Rows live in slot
// order; the write pointer wraps, so once full each enqueue of b rows evicts
// exactly the b oldest.
template <class T>
class MemoryBank {
public:
    MemoryBank(int capacity, int dim) : capacity_(capacity), dim_(dim) {
        if (capacity < 1 || dim < 1) throw ConfigError("bank capacity and dim must be >= 1");
        storage_ = Tensor<T>::zeros({capacity, dim});
    }

    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int fill_count() const { return fill_; }
    int write_pointer() const { return write_ptr_; }

    void enqueue(const Tensor<T>& keys) {
        const auto& s = keys.shape();
        if (s.size() != 2 || s[1] != dim_)
            throw ShapeError("enqueue expects [B," + std::to_string(dim_) + "], got " +
                             shape_str(s));
        const int B = s[0];
        if (B > capacity_)
            throw Error("enqueue of " + std::to_string(B) + " rows exceeds capacity " +
                        std::to_string(capacity_));
        for (int i = 0; i < B; ++i) {
            T ss = T(0);
            for (int d = 0; d < dim_; ++d) {
                const T v = keys[(size_t)i * dim_ + d];
                ss += v * v;
            }
            // unit rows are the contract; an all-zero row is also accepted
            // because clamped normalization maps dead activations to zeros,
            // and a zero key acts as a neutral negative
            const double n = std::sqrt((double)ss);
            if (std::abs(n - 1.0) > 1e-5 && n != 0.0)
                throw Error("enqueue row " + std::to_string(i) + " is not L2-normalized");
        }
        for (int i = 0; i < B; ++i) {
            for (int d = 0; d < dim_; ++d)
                storage_[(size_t)write_ptr_ * dim_ + d] = keys[(size_t)i * dim_ + d];
            write_ptr_ = (write_ptr_ + 1) % capacity_;
        }
        fill_ = std::min(fill_ + B, capacity_);
    }

    // Stored rows in slot order: [fill_count, dim]. This is the canonical
    // order the loss consumes.
    Tensor<T> snapshot() const {
        Tensor<T> out({fill_, dim_});
        std::copy(storage_.data(), storage_.data() + (size_t)fill_ * dim_, out.data());
        return out;
    }

    // Rows in arrival order, oldest first (for tests and inspection).
    Tensor<T> ordered_rows() const {
        Tensor<T> out({fill_, dim_});
        const int start = fill_ == capacity_ ? write_ptr_ : 0;
        for (int i = 0; i < fill_; ++i) {
            const int slot = (start + i) % capacity_;
            std::copy(storage_.data() + (size_t)slot * dim_,
                      storage_.data() + (size_t)(slot + 1) * dim_,
                      out.data() + (size_t)i * dim_);
        }
        return out;
    }

    // Serialization access.
    const Tensor<T>& storage() const { return storage_; }
    void restore(Tensor<T> storage, int write_ptr, int fill) {
        if (!storage.same_shape(storage_)) shape_fail("bank restore", storage_.shape(), storage.shape());
        if (write_ptr < 0 || write_ptr >= capacity_ || fill < 0 || fill > capacity_)
            throw Error("bank restore state out of range");
        storage_ = std::move(storage);
        write_ptr_ = write_ptr;
        fill_ = fill;
    }

private:
    int capacity_;
    int dim_;
    int write_ptr_ = 0;
    int fill_ = 0;
    Tensor<T> storage_;
};

}  // namespace genco
