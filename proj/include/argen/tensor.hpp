#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "argen/error.hpp"
#include "argen/rng.hpp"

namespace argen {

// Dense row-major float32 tensor. Value semantics; all layout is contiguous.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, float v);
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f);
    static Tensor from(std::vector<int> shape, std::vector<float> values);

    int64_t numel() const { return int64_t(data_.size()); }
    int ndim() const { return int(shape_.size()); }
    int size(int axis) const;
    const std::vector<int>& shape() const { return shape_; }
    bool shape_is(const std::vector<int>& s) const { return shape_ == s; }
    std::string shape_str() const;

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](int64_t i) { return data_[size_t(i)]; }
    float operator[](int64_t i) const { return data_[size_t(i)]; }

    // Bounds-checked element access for 2D/3D/4D tensors.
    float& at(int i, int j);
    float& at(int i, int j, int k);
    float& at(int i, int j, int k, int l);
    float at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }
    float at(int i, int j, int k) const { return const_cast<Tensor*>(this)->at(i, j, k); }
    float at(int i, int j, int k, int l) const { return const_cast<Tensor*>(this)->at(i, j, k, l); }

    Tensor reshaped(std::vector<int> new_shape) const;
    void fill(float v);
    void check_finite(const std::string& what) const;
    uint64_t content_hash() const { return fnv1a64(data_.data(), data_.size() * sizeof(float)); }

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

}  // namespace argen
