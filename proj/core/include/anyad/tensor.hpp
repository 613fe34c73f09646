#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "anyad/error.hpp"
#include "anyad/rng.hpp"

namespace anyad {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& dims) {
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

inline std::string shape_str(const Shape& dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << 'x';
        os << dims[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor. float for training, double for verification mode.
// The grad buffer is populated by Graph::backward on requires_grad tensors.
template <typename T>
struct TensorT {
    Shape dims;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // empty, or same numel as data

    TensorT() = default;
    explicit TensorT(Shape d) : dims(std::move(d)), data(static_cast<std::size_t>(shape_numel(dims)), T(0)) {
        check_dims();
    }
    TensorT(Shape d, std::vector<T> v) : dims(std::move(d)), data(std::move(v)) {
        check_dims();
        if (static_cast<std::int64_t>(data.size()) != shape_numel(dims))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(dims));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return dims[i]; }
    std::size_t rank() const { return dims.size(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    void zero_grad() {
        if (!requires_grad) return;
        grad.assign(data.size(), T(0));
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    void check_dims() const {
        for (auto d : dims)
            if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(dims));
    }
};

template <typename T>
TensorT<T> full(Shape dims, T value) {
    TensorT<T> t(std::move(dims));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
}

template <typename T>
TensorT<T> zeros(Shape dims) {
    return TensorT<T>(std::move(dims));
}

template <typename T>
TensorT<T> gaussian(Shape dims, Rng& rng, double stddev = 0.02, double mean = 0.0) {
    TensorT<T> t(std::move(dims));
    for (auto& v : t.data) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
}

template <typename To, typename From>
TensorT<To> cast_tensor(const TensorT<From>& src) {
    TensorT<To> out;
    out.dims = src.dims;
    out.data.resize(src.data.size());
    for (std::size_t i = 0; i < src.data.size(); ++i) out.data[i] = static_cast<To>(src.data[i]);
    out.requires_grad = src.requires_grad;
    return out;
}

template <typename T>
bool same_shape(const TensorT<T>& a, const TensorT<T>& b) {
    return a.dims == b.dims;
}

}  // namespace anyad
