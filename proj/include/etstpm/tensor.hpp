#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "etstpm/errors.hpp"

namespace etstpm {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ')';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor owning its storage.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(std::initializer_list<std::size_t> shape, T fill = T{0})
        : Tensor(Shape(shape), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // 4-D (N, C, H, W) accessors.
    T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    void reshape(Shape s) {
        if (shape_numel(s) != data_.size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        shape_ = std::move(s);
    }

    /// Contiguous slice along the leading dimension.
    Tensor slice(std::size_t begin, std::size_t end) const {
        if (rank() == 0 || begin > end || end > shape_[0])
            throw ShapeError("bad slice of " + shape_str(shape_));
        const std::size_t inner = shape_[0] ? data_.size() / shape_[0] : 0;
        Shape s = shape_;
        s[0] = end - begin;
        return Tensor(s, std::vector<T>(data_.begin() + begin * inner, data_.begin() + end * inner));
    }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

template <class T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
    if (t.shape() != expected)
        throw ShapeError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                         shape_str(t.shape()));
}

} // namespace etstpm
