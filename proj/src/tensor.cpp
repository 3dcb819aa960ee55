// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "speclab/error.hpp"
#include "speclab/kernels.hpp"

namespace speclab {

const char* to_string(AllocCategory c) {
    switch (c) {
        case AllocCategory::Parameter: return "parameter";
        case AllocCategory::Activation: return "activation";
        case AllocCategory::Scratch: return "scratch";
    }
    return "?";
}

// ----- AllocationMeter -----

AllocationMeter& AllocationMeter::instance() {
    static AllocationMeter meter;
    return meter;
}

void AllocationMeter::allocate(AllocCategory c, std::size_t bytes) {
    std::lock_guard lock(mu_);
    const auto i = static_cast<std::size_t>(c);
    current_[i] += bytes;
    peak_[i] = std::max(peak_[i], current_[i]);
    const auto now = static_cast<std::int64_t>(current_[i]);
    for (auto& s : scopes_)
        if (s.category == c) s.peak = std::max(s.peak, now - s.base);
}

void AllocationMeter::release(AllocCategory c, std::size_t bytes) {
    std::lock_guard lock(mu_);
    const auto i = static_cast<std::size_t>(c);
    current_[i] -= std::min(bytes, current_[i]);
}

std::size_t AllocationMeter::current_bytes(AllocCategory c) const {
    std::lock_guard lock(mu_);
    return current_[static_cast<std::size_t>(c)];
}

std::size_t AllocationMeter::peak_bytes(AllocCategory c) const {
    std::lock_guard lock(mu_);
    return peak_[static_cast<std::size_t>(c)];
}

void AllocationMeter::reset_peaks() {
    std::lock_guard lock(mu_);
    peak_ = current_;
}

std::size_t AllocationMeter::open_scope(AllocCategory c) {
    std::lock_guard lock(mu_);
    scopes_.push_back({c, static_cast<std::int64_t>(current_[static_cast<std::size_t>(c)]), 0});
    return scopes_.size() - 1;
}

std::size_t AllocationMeter::close_scope(std::size_t id) {
    std::lock_guard lock(mu_);
    if (scopes_.empty() || id != scopes_.size() - 1)
        throw InternalError("allocation scopes closed out of order");
    const auto peak = scopes_.back().peak;
    scopes_.pop_back();
    return static_cast<std::size_t>(std::max<std::int64_t>(peak, 0));
}

std::size_t meter_scope(AllocCategory c, const std::function<void()>& body) {
    auto& meter = AllocationMeter::instance();
    const std::size_t id = meter.open_scope(c);
    try {
        body();
    } catch (...) {
        meter.close_scope(id);
        throw;
    }
    return meter.close_scope(id);
}

// ----- Shape helpers -----

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// ----- Tensor -----

namespace {

thread_local bool t_grad_enabled = true;

std::shared_ptr<TensorImpl> make_impl(Shape shape, AllocCategory c) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data = TrackedArray<float>(shape_numel(shape), c);
    impl->shape = std::move(shape);
    impl->category = c;
    return impl;
}

void require_defined(const Tensor& t, const char* what) {
    if (!t.defined()) throw InvalidArgument(std::string(what) + ": undefined tensor");
}

void require_rank2(const Tensor& t, const char* what) {
    require_defined(t, what);
    if (t.rank() != 2)
        throw DimensionError(std::string(what) + ": expected rank-2 tensor, got " +
                             shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    require_defined(a, what);
    require_defined(b, what);
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor::Tensor(Shape shape, AllocCategory c) : impl_(make_impl(std::move(shape), c)) {}

Tensor::Tensor(Shape shape, std::span<const float> values, AllocCategory c)
    : impl_(make_impl(std::move(shape), c)) {
    if (values.size() != impl_->data.size())
        throw DimensionError("tensor: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(impl_->shape));
    std::copy(values.begin(), values.end(), impl_->data.data());
}

Tensor::Tensor(Shape shape, std::initializer_list<float> values, AllocCategory c)
    : Tensor(std::move(shape), std::span<const float>(values.begin(), values.size()), c) {}

Tensor Tensor::scalar(float v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, AllocCategory c) {
    Tensor t(std::move(shape), c);
    for (auto& x : t.data()) x = static_cast<float>(rng.normal() * stddev);
    return t;
}

Tensor Tensor::full(Shape shape, float v, AllocCategory c) {
    Tensor t(std::move(shape), c);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
}

const Shape& Tensor::shape() const {
    require_defined(*this, "shape");
    return impl_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= rank()) throw IndexError("dim " + std::to_string(i) + " of " + shape_str(shape()));
    return impl_->shape[i];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const { return rank() >= 2 ? impl_->shape[0] : 1; }

std::size_t Tensor::cols() const { return rank() == 0 ? 1 : impl_->shape.back(); }

AllocCategory Tensor::category() const { return impl_->category; }

std::span<float> Tensor::data() {
    require_defined(*this, "data");
    return impl_->data.span();
}

std::span<const float> Tensor::data() const {
    require_defined(*this, "data");
    return std::as_const(impl_->data).span();
}

float Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

float Tensor::at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

float& Tensor::at(std::size_t r, std::size_t c) { return impl_->data[r * cols() + c]; }

std::vector<float> Tensor::to_vector() const {
    auto d = data();
    return {d.begin(), d.end()};
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    require_defined(*this, "set_requires_grad");
    impl_->requires_grad = on;
    if (!on) impl_->grad.reset();
    return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
    require_defined(*this, "grad");
    return std::as_const(impl_->grad).span();
}

std::span<float> Tensor::grad_accumulator() const {
    require_defined(*this, "grad_accumulator");
    if (!impl_->requires_grad) throw InternalError("grad requested on tensor without requires_grad");
    if (numel() == 0) return {};
    if (impl_->grad.empty()) impl_->grad = TrackedArray<float>(numel(), impl_->category);
    return impl_->grad.span();
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.reset();
}

Tensor Tensor::detach() const {
    Tensor t(shape(), data(), category());
    return t;
}

void Tensor::donate_data_to_grad() {
    require_defined(*this, "donate_data_to_grad");
    if (impl_->grad.empty()) {
        impl_->grad = std::move(impl_->data);
    } else {
        auto g = impl_->grad.span();
        auto d = impl_->data.span();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
        impl_->data.reset();
    }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void record(Tensor& out, std::vector<Tensor> inputs, BackwardFn fn) {
    if (!t_grad_enabled) return;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return;
    auto* impl = out.impl();
    impl->requires_grad = true;
    impl->parents.clear();
    for (auto& t : inputs) impl->parents.push_back(t.impl_ptr());
    impl->backward = std::move(fn);
}

void backward(const Tensor& root) {
    require_defined(root, "backward");
    if (root.numel() != 1)
        throw DimensionError("backward: root must be scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) throw InvalidArgument("backward: root does not require grad");

    // Iterative post-order DFS; parents are visited in recorded order, which
    // makes the resulting order a pure function of the tape.
    std::vector<std::shared_ptr<TensorImpl>> order;
    std::unordered_set<const TensorImpl*> seen;
    std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
    stack.emplace_back(root.impl_ptr(), 0);
    seen.insert(root.impl());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto parent = node->parents[next++];
            if (parent->requires_grad && seen.insert(parent.get()).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    Tensor r(root.impl_ptr());
    r.grad_accumulator()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& node = *it;
        if (!node->backward || node->grad.empty()) continue;
        Tensor out(node);
        node->backward(out);
    }
}

// ----- operations -----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor out({m, n});
    kernels::parallel::matmul(a.data(), b.data(), out.data(), {m, k, n});
    record(out, {a, b}, [a, b, m, k, n](Tensor& o) mutable {
        if (a.requires_grad())
            kernels::parallel::matmul_nt(o.grad(), b.data(), a.grad_accumulator(), {m, n, k},
                                         true);
        if (b.requires_grad())
            kernels::parallel::matmul_tn(a.data(), o.grad(), b.grad_accumulator(), {k, m, n},
                                         true);
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    auto o = out.data();
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
    record(out, {a, b}, [a, b](Tensor& o) mutable {
        auto g = o.grad();
        for (const Tensor* t : {&a, &b}) {
            if (!t->requires_grad()) continue;
            auto ga = t->grad_accumulator();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    auto o = out.data();
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
    record(out, {a, b}, [a, b](Tensor& o) mutable {
        auto g = o.grad();
        if (a.requires_grad()) {
            auto ga = a.grad_accumulator();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto gb = b.grad_accumulator();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    auto o = out.data();
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
    record(out, {a, b}, [a, b](Tensor& o) mutable {
        auto g = o.grad();
        if (a.requires_grad()) {
            auto ga = a.grad_accumulator();
            auto y = b.data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        }
        if (b.requires_grad()) {
            auto gb = b.grad_accumulator();
            auto x = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& a, float s) {
    require_defined(a, "scale");
    Tensor out(a.shape());
    auto o = out.data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
    record(out, {a}, [a, s](Tensor& o) mutable {
        auto g = o.grad();
        auto ga = a.grad_accumulator();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    auto x = a.data();
    auto o = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) o[j * m + i] = x[i * n + j];
    record(out, {a}, [a, m, n](Tensor& o) mutable {
        auto g = o.grad();
        auto ga = a.grad_accumulator();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
    for (auto& p : parts) require_defined(p, "concat_rows");
    const std::size_t rank = parts[0].rank();
    if (rank == 0) throw DimensionError("concat_rows: scalar input");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t lead = 0;
    for (auto& p : parts) {
        if (p.rank() != rank || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1))
            throw DimensionError("concat_rows: trailing extents differ " +
                                 shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        lead += p.dim(0);
    }
    Shape shape{lead};
    shape.insert(shape.end(), tail.begin(), tail.end());
    Tensor out(shape);
    auto o = out.data();
    std::size_t off = 0;
    for (auto& p : parts) {
        auto d = p.data();
        std::copy(d.begin(), d.end(), o.begin() + static_cast<std::ptrdiff_t>(off));
        off += d.size();
    }
    record(out, parts, [parts](Tensor& o) mutable {
        auto g = o.grad();
        std::size_t off = 0;
        for (auto& p : parts) {
            const std::size_t n = p.numel();
            if (p.requires_grad()) {
                auto gp = p.grad_accumulator();
                for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
            }
            off += n;
        }
    });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
    for (auto& p : parts) require_rank2(p, "concat_cols");
    const std::size_t m = parts[0].dim(0);
    std::size_t width = 0;
    for (auto& p : parts) {
        if (p.dim(0) != m) throw DimensionError("concat_cols: row counts differ");
        width += p.dim(1);
    }
    Tensor out({m, width});
    auto o = out.data();
    std::size_t col = 0;
    for (auto& p : parts) {
        const std::size_t w = p.dim(1);
        auto d = p.data();
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(i * w), w,
                        o.begin() + static_cast<std::ptrdiff_t>(i * width + col));
        col += w;
    }
    record(out, parts, [parts, m, width](Tensor& o) mutable {
        auto g = o.grad();
        std::size_t col = 0;
        for (auto& p : parts) {
            const std::size_t w = p.dim(1);
            if (p.requires_grad()) {
                auto gp = p.grad_accumulator();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * width + col + j];
            }
            col += w;
        }
    });
    return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    require_defined(a, "slice_rows");
    if (a.rank() == 0) throw DimensionError("slice_rows: scalar input");
    if (begin > end || end > a.dim(0))
        throw IndexError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(a.shape()));
    Shape shape = a.shape();
    const std::size_t row = a.numel() / a.dim(0);
    shape[0] = end - begin;
    Tensor out(shape);
    auto d = a.data();
    std::copy(d.begin() + static_cast<std::ptrdiff_t>(begin * row),
              d.begin() + static_cast<std::ptrdiff_t>(end * row), out.data().begin());
    record(out, {a}, [a, begin, row](Tensor& o) mutable {
        auto g = o.grad();
        auto ga = a.grad_accumulator();
        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * row + i] += g[i];
    });
    return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    require_rank2(a, "slice_cols");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (begin > end || end > n)
        throw IndexError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(a.shape()));
    const std::size_t w = end - begin;
    Tensor out({m, w});
    auto d = a.data();
    auto o = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) o[i * w + j] = d[i * n + begin + j];
    record(out, {a}, [a, begin, m, n, w](Tensor& o) mutable {
        auto g = o.grad();
        auto ga = a.grad_accumulator();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += g[i * w + j];
    });
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps) {
    require_defined(x, "rms_norm");
    require_defined(weight, "rms_norm");
    const std::size_t n = x.cols();
    if (weight.numel() != n)
        throw DimensionError("rms_norm: weight " + shape_str(weight.shape()) + " for input " +
                             shape_str(x.shape()));
    if (n == 0) throw DimensionError("rms_norm: empty trailing axis");
    const std::size_t m = x.numel() / n;
    Tensor out(x.shape());
    auto xd = x.data();
    auto w = weight.data();
    auto o = out.data();
    std::vector<double> inv(m);
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += static_cast<double>(xd[i * n + j]) * xd[i * n + j];
        inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
        for (std::size_t j = 0; j < n; ++j)
            o[i * n + j] = static_cast<float>(xd[i * n + j] * inv[i] * w[j]);
    }
    record(out, {x, weight}, [x, weight, inv = std::move(inv), m, n](Tensor& o) mutable {
        auto g = o.grad();
        auto xd = x.data();
        auto w = weight.data();
        if (x.requires_grad()) {
            auto gx = x.grad_accumulator();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += static_cast<double>(g[i * n + j]) * w[j] * xd[i * n + j] * inv[i];
                const double c = dot / static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    const double xhat = xd[i * n + j] * inv[i];
                    gx[i * n + j] += static_cast<float>(
                        inv[i] * (static_cast<double>(g[i * n + j]) * w[j] - xhat * c));
                }
            }
        }
        if (weight.requires_grad()) {
            auto gw = weight.grad_accumulator();
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < m; ++i)
                    acc += static_cast<double>(g[i * n + j]) * xd[i * n + j] * inv[i];
                gw[j] += static_cast<float>(acc);
            }
        }
    });
    return out;
}

Tensor silu(const Tensor& x) {
    require_defined(x, "silu");
    Tensor out(x.shape());
    auto xd = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double v = xd[i];
        o[i] = static_cast<float>(v / (1.0 + std::exp(-v)));
    }
    record(out, {x}, [x](Tensor& o) mutable {
        auto g = o.grad();
        auto xd = x.data();
        auto gx = x.grad_accumulator();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xd[i];
            const double s = 1.0 / (1.0 + std::exp(-v));
            gx[i] += static_cast<float>(g[i] * s * (1.0 + v * (1.0 - s)));
        }
    });
    return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    require_defined(x, "softmax");
    if (axis >= x.rank())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " for shape " +
                             shape_str(x.shape()));
    const std::size_t n = x.dim(axis);
    if (n == 0) throw DimensionError("softmax: empty axis");
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t outer = x.numel() / (n * inner);
    Tensor out(x.shape());
    auto xd = x.data();
    auto o = out.data();
    for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t b = 0; b < inner; ++b) {
            const std::size_t base = a * n * inner + b;
            double mx = -INFINITY;
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(xd[base + j * inner]));
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) z += std::exp(xd[base + j * inner] - mx);
            for (std::size_t j = 0; j < n; ++j)
                o[base + j * inner] = static_cast<float>(std::exp(xd[base + j * inner] - mx) / z);
        }
    }
    record(out, {x}, [x, n, inner, outer](Tensor& o) mutable {
        auto g = o.grad();
        auto y = std::as_const(o).data();
        auto gx = x.grad_accumulator();
        for (std::size_t a = 0; a < outer; ++a) {
            for (std::size_t b = 0; b < inner; ++b) {
                const std::size_t base = a * n * inner + b;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += static_cast<double>(g[base + j * inner]) * y[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t idx = base + j * inner;
                    gx[idx] += static_cast<float>(y[idx] * (g[idx] - dot));
                }
            }
        }
    });
    return out;
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::uint32_t> ids) {
    require_rank2(table, "embedding_lookup");
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (auto id : ids)
        if (id >= v)
            throw IndexError("embedding_lookup: id " + std::to_string(id) + " >= vocab " +
                             std::to_string(v));
    Tensor out({ids.size(), d});
    auto t = table.data();
    auto o = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    o.begin() + static_cast<std::ptrdiff_t>(i * d));
    std::vector<std::uint32_t> idv(ids.begin(), ids.end());
    record(out, {table}, [table, idv = std::move(idv), d](Tensor& o) mutable {
        auto g = o.grad();
        auto gt = table.grad_accumulator();
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
    });
    return out;
}

Tensor sum(const Tensor& x) {
    require_defined(x, "sum");
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    record(out, {x}, [x](Tensor& o) mutable {
        const float g = o.grad()[0];
        for (auto& v : x.grad_accumulator()) v += g;
    });
    return out;
}

Tensor mean(const Tensor& x) {
    require_defined(x, "mean");
    if (x.numel() == 0) throw DimensionError("mean: empty tensor");
    return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor gather_rows(const Tensor& x, std::span<const std::uint32_t> rows) {
    return embedding_lookup(x, rows);
}

Tensor scatter_add_rows(const Tensor& src, std::span<const std::uint32_t> idx,
                        std::size_t out_rows) {
    require_rank2(src, "scatter_add_rows");
    if (idx.size() != src.dim(0)) throw DimensionError("scatter_add_rows: index count mismatch");
    const std::size_t d = src.dim(1);
    for (auto r : idx)
        if (r >= out_rows) throw IndexError("scatter_add_rows: row " + std::to_string(r));
    Tensor out({out_rows, d});
    auto s = src.data();
    auto o = out.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) o[idx[i] * d + j] += s[i * d + j];
    std::vector<std::uint32_t> iv(idx.begin(), idx.end());
    record(out, {src}, [src, iv = std::move(iv), d](Tensor& o) mutable {
        auto g = o.grad();
        auto gs = src.grad_accumulator();
        for (std::size_t i = 0; i < iv.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gs[i * d + j] += g[iv[i] * d + j];
    });
    return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    require_rank2(x, "scale_rows");
    require_defined(s, "scale_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (s.numel() != m) throw DimensionError("scale_rows: one factor per row required");
    Tensor out({m, n});
    auto xd = x.data();
    auto sd = s.data();
    auto o = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) o[i * n + j] = xd[i * n + j] * sd[i];
    record(out, {x, s}, [x, s, m, n](Tensor& o) mutable {
        auto g = o.grad();
        if (x.requires_grad()) {
            auto gx = x.grad_accumulator();
            auto sd = s.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * sd[i];
        }
        if (s.requires_grad()) {
            auto gs = s.grad_accumulator();
            auto xd = x.data();
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    acc += static_cast<double>(g[i * n + j]) * xd[i * n + j];
                gs[i] += static_cast<float>(acc);
            }
        }
    });
    return out;
}

}  // namespace speclab
