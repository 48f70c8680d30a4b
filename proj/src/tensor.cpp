#include "argen/tensor.hpp"

#include <cmath>
#include <sstream>

namespace argen {

static int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        ARGEN_CHECK(d >= 0, ShapeError, "negative dimension in tensor shape");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(size_t(shape_numel(shape_)), 0.0f);
}

Tensor Tensor::full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(rng.normal(0.0, stddev));
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values) {
    Tensor t(std::move(shape));
    ARGEN_CHECK(int64_t(values.size()) == t.numel(), ShapeError, "value count does not match shape");
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = values[size_t(i)];
    return t;
}

int Tensor::size(int axis) const {
    if (axis < 0) axis += ndim();
    ARGEN_CHECK(axis >= 0 && axis < ndim(), IndexError, "tensor axis out of range");
    return shape_[size_t(axis)];
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
}

float& Tensor::at(int i, int j) {
    ARGEN_CHECK(ndim() == 2, ShapeError, "at(i,j) needs a 2D tensor, got " + shape_str());
    ARGEN_CHECK(i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1], IndexError, "2D index out of range");
    return data_[size_t(i) * shape_[1] + j];
}

float& Tensor::at(int i, int j, int k) {
    ARGEN_CHECK(ndim() == 3, ShapeError, "at(i,j,k) needs a 3D tensor, got " + shape_str());
    ARGEN_CHECK(i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1] && k >= 0 && k < shape_[2],
                IndexError, "3D index out of range");
    return data_[(size_t(i) * shape_[1] + j) * shape_[2] + k];
}

float& Tensor::at(int i, int j, int k, int l) {
    ARGEN_CHECK(ndim() == 4, ShapeError, "at(i,j,k,l) needs a 4D tensor, got " + shape_str());
    ARGEN_CHECK(i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1] && k >= 0 && k < shape_[2] &&
                    l >= 0 && l < shape_[3],
                IndexError, "4D index out of range");
    return data_[((size_t(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
    ARGEN_CHECK(shape_numel(new_shape) == numel(), ShapeError,
                "reshape " + shape_str() + " to incompatible element count");
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    return t;
}

void Tensor::fill(float v) {
    for (auto& x : data_) x = v;
}

void Tensor::check_finite(const std::string& what) const {
    for (int64_t i = 0; i < numel(); ++i) {
        if (!std::isfinite(data_[size_t(i)]))
            throw NumericError("non-finite value in " + what + " at flat index " + std::to_string(i));
    }
}

}  // namespace argen
