// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f32 tensors with tape-based reverse-mode autodiff and byte-exact
// allocation accounting.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "speclab/rng.hpp"

namespace speclab {

enum class AllocCategory : std::uint8_t { Parameter = 0, Activation = 1, Scratch = 2 };

inline constexpr std::size_t kAllocCategoryCount = 3;

const char* to_string(AllocCategory c);

/// Process-wide byte counters per allocation category.
///
/// Measurement scopes nest: an allocation made inside an inner scope also
/// counts toward every enclosing scope of the same category.
class AllocationMeter {
public:
    static AllocationMeter& instance();

    void allocate(AllocCategory c, std::size_t bytes);
    void release(AllocCategory c, std::size_t bytes);

    std::size_t current_bytes(AllocCategory c) const;
    std::size_t peak_bytes(AllocCategory c) const;
    void reset_peaks();

    std::size_t open_scope(AllocCategory c);
    /// Closes the innermost scope (which must be `id`) and returns its peak.
    std::size_t close_scope(std::size_t id);

private:
    struct Scope {
        AllocCategory category;
        std::int64_t base;
        std::int64_t peak;
    };

    mutable std::mutex mu_;
    std::array<std::size_t, kAllocCategoryCount> current_{};
    std::array<std::size_t, kAllocCategoryCount> peak_{};
    std::vector<Scope> scopes_;
};

/// Runs `body` and returns the peak number of `c` bytes it held live at once,
/// counted relative to what was live when the scope opened.
std::size_t meter_scope(AllocCategory c, const std::function<void()>& body);

/// Heap array whose lifetime is reported to the AllocationMeter.
template <class T>
class TrackedArray {
public:
    TrackedArray() = default;
    TrackedArray(std::size_t n, AllocCategory c) : size_(n), category_(c) {
        if (n != 0) {
            data_.reset(new T[n]());
            AllocationMeter::instance().allocate(c, n * sizeof(T));
        }
    }
    TrackedArray(const TrackedArray&) = delete;
    TrackedArray& operator=(const TrackedArray&) = delete;
    TrackedArray(TrackedArray&& o) noexcept
        : data_(std::move(o.data_)), size_(std::exchange(o.size_, 0)), category_(o.category_) {}
    TrackedArray& operator=(TrackedArray&& o) noexcept {
        if (this != &o) {
            reset();
            data_ = std::move(o.data_);
            size_ = std::exchange(o.size_, 0);
            category_ = o.category_;
        }
        return *this;
    }
    ~TrackedArray() { reset(); }

    void reset() {
        if (data_) {
            AllocationMeter::instance().release(category_, size_ * sizeof(T));
            data_.reset();
        }
        size_ = 0;
    }

    T* data() { return data_.get(); }
    const T* data() const { return data_.get(); }
    std::size_t size() const { return size_; }
    bool empty() const { return size_ == 0; }
    AllocCategory category() const { return category_; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    std::span<T> span() { return {data_.get(), size_}; }
    std::span<const T> span() const { return {data_.get(), size_}; }

private:
    std::unique_ptr<T[]> data_;
    std::size_t size_ = 0;
    AllocCategory category_ = AllocCategory::Scratch;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;
/// Gradient rule of one recorded op. Receives the op's output (whose grad is
/// populated) and accumulates into the captured inputs.
using BackwardFn = std::function<void(Tensor& out)>;

struct TensorImpl {
    Shape shape;
    TrackedArray<float> data;
    TrackedArray<float> grad;
    AllocCategory category = AllocCategory::Activation;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    BackwardFn backward;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, AllocCategory c = AllocCategory::Activation);
    Tensor(Shape shape, std::span<const float> values, AllocCategory c = AllocCategory::Activation);
    Tensor(Shape shape, std::initializer_list<float> values,
           AllocCategory c = AllocCategory::Activation);

    static Tensor scalar(float v);
    static Tensor randn(Shape shape, Rng& rng, float stddev,
                        AllocCategory c = AllocCategory::Parameter);
    static Tensor full(Shape shape, float v, AllocCategory c = AllocCategory::Activation);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t numel() const;
    /// Leading extent of a 2-D tensor (1 for vectors and scalars).
    std::size_t rows() const;
    /// Trailing extent (1 for scalars).
    std::size_t cols() const;
    AllocCategory category() const;

    std::span<float> data();
    std::span<const float> data() const;
    float item() const;
    float at(std::size_t r, std::size_t c) const;
    float& at(std::size_t r, std::size_t c);
    std::vector<float> to_vector() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const float> grad() const;
    /// Grad buffer, allocated zero-filled on first use.
    std::span<float> grad_accumulator() const;
    void zero_grad();

    /// Copy of the values with no graph history.
    Tensor detach() const;

    /// Hands the value buffer over to the gradient slot without allocating.
    /// The tensor's values are unusable afterwards. Used by ops that compute
    /// their input gradient in place of the input.
    void donate_data_to_grad();

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// True unless a NoGradGuard is live on this thread.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Attaches a gradient rule to `out` when grad mode is on and any input
/// participates in autodiff.
void record(Tensor& out, std::vector<Tensor> inputs, BackwardFn fn);

/// Reverse-mode sweep from a scalar root in reverse topological order.
void backward(const Tensor& root);

// ----- differentiable operations -----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor transpose(const Tensor& a);
/// Concatenates along the leading axis. Vectors concatenate end to end.
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Concatenates 2-D tensors along the trailing axis.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
/// Row-wise RMS normalisation over the trailing axis, times `weight`.
Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps = 1e-6f);
Tensor silu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor embedding_lookup(const Tensor& table, std::span<const std::uint32_t> ids);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor gather_rows(const Tensor& x, std::span<const std::uint32_t> rows);
/// Output of `out_rows` rows where row idx[i] accumulates src row i.
Tensor scatter_add_rows(const Tensor& src, std::span<const std::uint32_t> idx,
                        std::size_t out_rows);
/// Multiplies row i of x by s[i].
Tensor scale_rows(const Tensor& x, const Tensor& s);

}  // namespace speclab
