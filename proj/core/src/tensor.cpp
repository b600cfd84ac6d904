#include "focalcomm/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace focalcomm {

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

namespace {

void validate_shape(const std::vector<int>& shape) {
    if (shape.empty()) {
        throw std::invalid_argument("Tensor: empty shape is not allowed");
    }
    for (int e : shape) {
        if (e <= 0) {
            throw std::invalid_argument("Tensor: non-positive extent in shape " + shape_to_string(shape));
        }
    }
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
        throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

int Tensor::extent(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) {
        throw std::invalid_argument("Tensor::extent: axis out of range for shape " + shape_str());
    }
    return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::offset_of(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
        throw std::invalid_argument("Tensor::at: index rank " + std::to_string(idx.size()) +
                                    " does not match tensor shape " + shape_str());
    }
    std::int64_t off = 0;
    int axis = 0;
    for (int i : idx) {
        const int e = shape_[static_cast<std::size_t>(axis)];
        if (i < 0 || i >= e) {
            throw std::out_of_range("Tensor::at: index " + std::to_string(i) + " out of range on axis " +
                                    std::to_string(axis) + " of " + shape_str());
        }
        off = off * e + i;
        ++axis;
    }
    return off;
}

double& Tensor::at(std::initializer_list<int> idx) { return data_[static_cast<std::size_t>(offset_of(idx))]; }

double Tensor::at(std::initializer_list<int> idx) const {
    return data_[static_cast<std::size_t>(offset_of(idx))];
}

double Tensor::item() const {
    if (size() != 1) {
        throw std::invalid_argument("Tensor::item: tensor of shape " + shape_str() + " is not a scalar");
    }
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill(double value) { data_.assign(data_.size(), value); }

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace focalcomm
