// Dense NCHW tensor and the error types shared by the whole library.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsc {

/// Raised for shape or configuration mistakes detected before any arithmetic.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN/Inf shows up in a forward or backward pass.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by file readers and writers.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  [[nodiscard]] constexpr std::size_t numel() const { return n * c * h * w; }
  [[nodiscard]] constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    os << '(' << n << ", " << c << ", " << h << ", " << w << ')';
    return os.str();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_.str());
    }
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] std::span<T> data() { return data_; }
  [[nodiscard]] std::span<const T> data() const { return data_; }
  [[nodiscard]] std::vector<T>& storage() { return data_; }
  [[nodiscard]] const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[index(n, c, y, x)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(n, c, y, x)];
  }
  [[nodiscard]] std::size_t index(std::size_t n, std::size_t c, std::size_t y,
                                  std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  /// Pointer to the start of channel plane (n, c).
  T* plane(std::size_t n, std::size_t c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(std::size_t n, std::size_t c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

/// Throws NumericFault naming `where` if any element is NaN or infinite.
template <typename T>
void require_finite(const Tensor<T>& t, const std::string& where) {
  if (!t.all_finite()) throw NumericFault("non-finite value in " + where);
}

inline void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  if (a != b) throw ConfigError(what + ": shape mismatch " + a.str() + " vs " + b.str());
}

}  // namespace dsc
