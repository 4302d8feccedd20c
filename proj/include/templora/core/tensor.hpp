#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/memory.hpp"

namespace templora {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

template <class T>
using Buffer = std::vector<T, TrackedAllocator<T>>;

/// Dense row-major tensor with value semantics.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)), values_(values.begin(), values.end()) {
        detail::require_shape(values_.size() == shape_numel(shape_),
                              "tensor: " + std::to_string(values_.size()) + " values for shape " + shape_str(shape_));
    }
    Tensor(Shape shape, std::initializer_list<T> values)
        : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

    static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) { return Tensor({rows, cols}, fill); }

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] std::size_t rank() const { return shape_.size(); }
    [[nodiscard]] std::size_t size() const { return values_.size(); }
    [[nodiscard]] bool empty() const { return values_.empty(); }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }

    /// Leading dimensions flattened; last dimension kept. A rank-1 tensor is one row.
    [[nodiscard]] std::size_t rows() const { return shape_.empty() ? 0 : size() / shape_.back(); }
    [[nodiscard]] std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

    [[nodiscard]] T* data() { return values_.data(); }
    [[nodiscard]] const T* data() const { return values_.data(); }
    [[nodiscard]] std::span<T> values() { return {values_.data(), values_.size()}; }
    [[nodiscard]] std::span<const T> values() const { return {values_.data(), values_.size()}; }
    [[nodiscard]] std::span<T> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }
    [[nodiscard]] std::span<const T> row(std::size_t r) const { return {values_.data() + r * cols(), cols()}; }

    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }
    T& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

    void fill(T v) { std::fill(values_.begin(), values_.end(), v); }
    void reshape(Shape shape) {
        detail::require_shape(shape_numel(shape) == size(), "reshape " + shape_str(shape_) + " -> " + shape_str(shape));
        shape_ = std::move(shape);
    }

    /// Converting copy (e.g. float weights into a 64-bit verification model).
    template <class U>
    [[nodiscard]] Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::transform(values_.begin(), values_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    [[nodiscard]] std::size_t bytes() const { return values_.size() * sizeof(T); }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && std::equal(a.values_.begin(), a.values_.end(), b.values_.begin());
    }

private:
    Shape shape_;
    Buffer<T> values_;
};

/// A named trainable (or frozen) tensor plus its accumulated gradient.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool trainable = true)
        : name(std::move(n)), value(std::move(v)), requires_grad(trainable) {}

    void zero_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        else grad.fill(T{0});
    }
};

}  // namespace templora
