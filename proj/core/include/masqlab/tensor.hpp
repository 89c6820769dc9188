#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

namespace masqlab {

// All in-memory math is double precision; container files store f32.
using real = double;

// Dense row-major tensor. Deliberately minimal: shape + contiguous
// storage; kernels work on raw pointers with explicit dims.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<real> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        assert(static_cast<std::int64_t>(data_.size()) == count(shape_));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, real v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(real v) { return Tensor({1}, {v}); }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    std::vector<real>& vec() { return data_; }
    const std::vector<real>& vec() const { return data_; }

    real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    real& at(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
    real at(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

private:
    std::vector<int> shape_;
    std::vector<real> data_;
};

// numerical helpers shared across modules
real dot(const Tensor& a, const Tensor& b);
real norm2(const Tensor& a);
bool all_finite(const Tensor& a);

}  // namespace masqlab
