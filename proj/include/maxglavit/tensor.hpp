#pragma once

// Dense CPU tensor with real32/real64 storage.
//
// A Tensor is a shared handle: copies alias the same storage. Operations in
// ops.hpp produce fresh tensors; mutation is reserved for gradient
// accumulation and optimizer steps, which need exclusive access. Reductions
// and kernels run in a fixed row-major order so results are bit-reproducible
// run to run on the same platform.

#include <atomic>
#include <cstring>
#include <memory>

#include "common.hpp"

namespace maxglavit {

struct TensorData {
    Shape shape;
    Dtype dtype = Dtype::real32;
    std::vector<float> f32;
    std::vector<double> f64;
    bool requires_grad = false;
    std::vector<float> grad_f32;  // lazily allocated, same length as data
    std::vector<double> grad_f64;
    bool grad_allocated = false;
    uint64_t id = 0;

    int64_t numel() const { return shape_numel(shape); }
};

inline uint64_t next_tensor_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
}

template <class T>
std::vector<T>& storage_of(TensorData& d);
template <>
inline std::vector<float>& storage_of<float>(TensorData& d) { return d.f32; }
template <>
inline std::vector<double>& storage_of<double>(TensorData& d) { return d.f64; }

template <class T>
std::vector<T>& grad_storage_of(TensorData& d);
template <>
inline std::vector<float>& grad_storage_of<float>(TensorData& d) { return d.grad_f32; }
template <>
inline std::vector<double>& grad_storage_of<double>(TensorData& d) { return d.grad_f64; }

template <class T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::real32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::real64; }

// Calls f with a value of the active scalar type; use decltype on the
// argument to pick the kernel instantiation.
template <class F>
decltype(auto) dispatch_dtype(Dtype dt, F&& f) {
    if (dt == Dtype::real32) return f(float{});
    return f(double{});
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, Dtype dt = Dtype::real32) {
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        t.d_->shape = std::move(shape);
        t.d_->dtype = dt;
        t.d_->id = next_tensor_id();
        int64_t n = t.d_->numel();
        check(n >= 0, "tensor shape has negative extent: " + shape_str(t.d_->shape));
        if (dt == Dtype::real32)
            t.d_->f32.assign(size_t(n), 0.0f);
        else
            t.d_->f64.assign(size_t(n), 0.0);
        return t;
    }

    static Tensor full(Shape shape, double value, Dtype dt = Dtype::real32) {
        Tensor t = zeros(std::move(shape), dt);
        dispatch_dtype(dt, [&](auto tag) {
            using T = decltype(tag);
            for (T& v : storage_of<T>(*t.d_)) v = T(value);
        });
        return t;
    }

    static Tensor from_values(Shape shape, const std::vector<double>& values,
                              Dtype dt = Dtype::real32) {
        Tensor t = zeros(std::move(shape), dt);
        check(int64_t(values.size()) == t.numel(),
              "from_values: " + std::to_string(values.size()) + " values for shape " +
                  shape_str(t.shape()));
        dispatch_dtype(dt, [&](auto tag) {
            using T = decltype(tag);
            auto& s = storage_of<T>(*t.d_);
            for (size_t i = 0; i < values.size(); ++i) s[i] = T(values[i]);
        });
        return t;
    }

    static Tensor scalar(double value, Dtype dt = Dtype::real32) {
        return full(Shape{}, value, dt);
    }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    Dtype dtype() const { return d_->dtype; }
    int64_t numel() const { return d_->numel(); }
    int64_t dim(size_t i) const { return d_->shape.at(i); }
    size_t rank() const { return d_->shape.size(); }
    uint64_t id() const { return d_->id; }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        d_->requires_grad = v;
        return *this;
    }

    template <class T>
    T* data() {
        check(dtype_of<T>() == d_->dtype, "tensor dtype access mismatch");
        return storage_of<T>(*d_).data();
    }
    template <class T>
    const T* data() const {
        check(dtype_of<T>() == d_->dtype, "tensor dtype access mismatch");
        return storage_of<T>(*d_).data();
    }

    double value_at(int64_t flat) const {
        check(flat >= 0 && flat < numel(), "value_at: index out of range");
        if (d_->dtype == Dtype::real32) return double(d_->f32[size_t(flat)]);
        return d_->f64[size_t(flat)];
    }

    void set_value_at(int64_t flat, double v) {
        check(flat >= 0 && flat < numel(), "set_value_at: index out of range");
        if (d_->dtype == Dtype::real32)
            d_->f32[size_t(flat)] = float(v);
        else
            d_->f64[size_t(flat)] = v;
    }

    std::vector<double> to_vector() const {
        std::vector<double> out(static_cast<size_t>(numel()), 0.0);
        for (int64_t i = 0; i < numel(); ++i) out[size_t(i)] = value_at(i);
        return out;
    }

    Tensor to(Dtype dt) const {
        if (dt == d_->dtype) return clone();
        Tensor t = zeros(d_->shape, dt);
        for (int64_t i = 0; i < numel(); ++i) t.set_value_at(i, value_at(i));
        return t;
    }

    Tensor clone() const {
        Tensor t = zeros(d_->shape, d_->dtype);
        t.d_->f32 = d_->f32;
        t.d_->f64 = d_->f64;
        return t;
    }

    // Gradient of this tensor after backward(); zeros if none was accumulated.
    Tensor grad() const {
        Tensor g = zeros(d_->shape, d_->dtype);
        if (d_->grad_allocated) {
            g.d_->f32 = d_->grad_f32;
            g.d_->f64 = d_->grad_f64;
        }
        return g;
    }

    bool has_grad() const { return d_->grad_allocated; }

    void zero_grad() {
        d_->grad_allocated = false;
        d_->grad_f32.clear();
        d_->grad_f64.clear();
    }

    // Accumulation buffer, zero-filled on first use.
    template <class T>
    T* grad_data() {
        check(dtype_of<T>() == d_->dtype, "tensor grad dtype access mismatch");
        auto& g = grad_storage_of<T>(*d_);
        if (!d_->grad_allocated) {
            g.assign(size_t(numel()), T(0));
            d_->grad_allocated = true;
        }
        return g.data();
    }

    std::shared_ptr<TensorData> impl() const { return d_; }

    static Tensor wrap(std::shared_ptr<TensorData> d) {
        Tensor t;
        t.d_ = std::move(d);
        return t;
    }

private:
    std::shared_ptr<TensorData> d_;
};

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

inline void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
    check(a.dtype() == b.dtype(), std::string(op) + ": dtype mismatch " +
                                      dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()));
}

}  // namespace maxglavit
