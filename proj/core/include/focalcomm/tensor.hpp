#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace focalcomm {

/// Dense row-major tensor of doubles. Value semantics: copies are deep.
///
/// A scalar is represented with shape {1}. Rank-0 tensors do not exist.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor scalar(double value);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const;
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool defined() const { return !shape_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    /// Row-major multi-index access.
    double& at(std::initializer_list<int> idx);
    double at(std::initializer_list<int> idx) const;

    /// Value of a single-element tensor.
    double item() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    void fill(double value);

    std::string shape_str() const;

private:
    std::int64_t offset_of(std::initializer_list<int> idx) const;

    std::vector<int> shape_;
    std::vector<double> data_;

    // Autodiff bookkeeping: identifies the grad slot on the tape that produced
    // this tensor. Valid only while that tape's epoch matches.
    std::uint64_t tape_epoch_ = 0;
    int tape_node_ = -1;
    friend class Tape;
};

std::string shape_to_string(const std::vector<int>& shape);
std::int64_t shape_numel(const std::vector<int>& shape);

}  // namespace focalcomm
