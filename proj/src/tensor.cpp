#include "metamat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace metamat {

std::string shape_to_string(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
        throw std::invalid_argument("Tensor::from: shape " + shape_to_string(shape) +
                                    " does not match " + std::to_string(values.size()) + " values");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
}

namespace {
std::size_t flat_offset(const Shape& shape, std::initializer_list<std::size_t> idx) {
    if (idx.size() != shape.size())
        throw std::invalid_argument("Tensor::at: index rank mismatch");
    std::size_t off = 0, axis = 0;
    auto strides = strides_for(shape);
    for (std::size_t i : idx) {
        if (i >= shape[axis]) throw std::out_of_range("Tensor::at: index out of range");
        off += i * strides[axis];
        ++axis;
    }
    return off;
}
}  // namespace

double& Tensor::at(std::initializer_list<std::size_t> idx) {
    return data_[flat_offset(shape_, idx)];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    return data_[flat_offset(shape_, idx)];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
        throw std::invalid_argument("Tensor::reshaped: element count mismatch " +
                                    shape_to_string(shape_) + " -> " + shape_to_string(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::min() const {
    if (empty()) throw std::runtime_error("Tensor::min on empty tensor");
    return *std::min_element(data_.begin(), data_.end());
}

double Tensor::max() const {
    if (empty()) throw std::runtime_error("Tensor::max on empty tensor");
    return *std::max_element(data_.begin(), data_.end());
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

std::vector<std::size_t> strides_for(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast_shapes: incompatible " + shape_to_string(a) +
                                        " vs " + shape_to_string(b));
        out[i] = std::max(da, db);
    }
    return out;
}

std::vector<std::size_t> broadcast_strides(const Shape& from, const Shape& to) {
    const std::size_t r = to.size();
    auto base = strides_for(from);
    std::vector<std::size_t> s(r, 0);
    for (std::size_t i = 0; i < from.size(); ++i) {
        const std::size_t axis = r - from.size() + i;
        s[axis] = (from[i] == 1 && to[axis] != 1) ? 0 : base[i];
    }
    return s;
}

}  // namespace metamat
