#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace metamat {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& s);

// Dense row-major double tensor. Value semantics; moves are cheap.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v);
    static Tensor scalar(double v) { return full({1}, v); }
    static Tensor from(Shape shape, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::initializer_list<std::size_t> idx);
    double at(std::initializer_list<std::size_t> idx) const;

    // Same data, new shape; element count must match.
    Tensor reshaped(Shape shape) const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v);
    bool all_finite() const;

    double min() const;
    double max() const;
    double sum() const;
    double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }

private:
    Shape shape_;
    std::vector<double> data_;
};

// Row-major strides (in elements).
std::vector<std::size_t> strides_for(const Shape& shape);

std::size_t shape_numel(const Shape& shape);

// NumPy-style broadcast of two shapes; throws on incompatibility.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Strides of `from` viewed as `to` (0 on broadcast axes), aligned to the right.
std::vector<std::size_t> broadcast_strides(const Shape& from, const Shape& to);

}  // namespace metamat
