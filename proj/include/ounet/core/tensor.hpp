#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ounet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// Dense row-major tensor with a dynamic shape. The last dimension is
/// contiguous. All heavy kernels work on raw pointers; this class only
/// owns storage and does bounds-checked indexing in debug builds.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{})
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {
        for (auto d : shape_)
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{}); }

    static Tensor from_values(Shape shape, std::vector<T> values) {
        Tensor t;
        if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
            throw std::invalid_argument("Tensor::from_values: size mismatch");
        t.shape_ = std::move(shape);
        t.data_ = std::move(values);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    template <typename... Ix>
    T& at(Ix... ix) { return data_[static_cast<std::size_t>(offset(ix...))]; }
    template <typename... Ix>
    const T& at(Ix... ix) const { return data_[static_cast<std::size_t>(offset(ix...))]; }

    template <typename... Ix>
    std::int64_t offset(Ix... ix) const {
        static_assert(sizeof...(Ix) >= 1);
        assert(sizeof...(Ix) == shape_.size());
        const std::int64_t idx[] = {static_cast<std::int64_t>(ix)...};
        std::int64_t off = 0;
        for (std::size_t d = 0; d < sizeof...(Ix); ++d) {
            assert(idx[d] >= 0 && idx[d] < shape_[d]);
            off = off * shape_[d] + idx[d];
        }
        return off;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void set_zero() { fill(T{}); }

    /// Same storage, new shape (numel must match).
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw std::invalid_argument("Tensor::reshaped: numel mismatch " + shape_str(shape_) +
                                        " -> " + shape_str(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    T sum() const { return std::accumulate(data_.begin(), data_.end(), T{}); }
    T min() const { return data_.empty() ? T{} : *std::min_element(data_.begin(), data_.end()); }
    T max() const { return data_.empty() ? T{} : *std::max_element(data_.begin(), data_.end()); }
    double mean() const { return data_.empty() ? 0.0 : static_cast<double>(sum()) / static_cast<double>(numel()); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) t[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
        return t;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

}  // namespace ounet
