#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "motionid/error.hpp"
#include "motionid/rng.hpp"

namespace motionid::num {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Storage is shared and treated as immutable once a
// tensor has been handed to anyone else; raw() is for filling freshly
// constructed buffers.
template <typename T>
class Tensor {
public:
    Tensor() : shape_{0}, data_(std::make_shared<std::vector<T>>()) {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(static_cast<std::size_t>(numel(shape_)), T(0))) {}

    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
        if (static_cast<std::int64_t>(data_->size()) != numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.raw(), t.raw() + t.size(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (std::int64_t i = 0; i < t.size(); ++i) t.raw()[i] = static_cast<T>(rng.normal() * stddev);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_->size()); }
    std::int64_t dim(std::int64_t i) const { return shape_[static_cast<std::size_t>(i)]; }

    const T* data() const { return data_->data(); }
    T* raw() { return data_->data(); }
    const std::vector<T>& vec() const { return *data_; }

    T operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    // Shares storage; only the shape changes.
    Tensor reshaped(Shape shape) const {
        if (numel(shape) != size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        t.requires_grad = requires_grad;
        return t;
    }

    Tensor clone() const { return Tensor(shape_, *data_); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_->size());
        for (std::size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<U>((*data_)[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool requires_grad = false;

private:
    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
};

}  // namespace motionid::num
