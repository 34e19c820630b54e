#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace dain {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::string_view dtype_name(DType dt);
DType parse_dtype(std::string_view s);

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Raised on incompatible extents, ranks or dtypes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN/Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::f64;
};

/// Calls f with a value-initialized float or double depending on dt.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::f32) return f(float{});
  return f(double{});
}

/// Dense row-major n-d array. Every extent is >= 1; a scalar has shape {1}.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype);

  static Tensor zeros(Shape shape, DType dtype = DType::f64) { return Tensor(std::move(shape), dtype); }
  static Tensor full(Shape shape, double value, DType dtype = DType::f64);
  static Tensor from(Shape shape, const std::vector<double>& values, DType dtype = DType::f64);
  static Tensor scalar(double v, DType dtype = DType::f64) { return full({1}, v, dtype); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return numel_; }
  DType dtype() const { return dtype_; }
  bool empty() const { return numel_ == 0; }

  template <class T>
  std::span<T> data() {
    check_type<T>();
    return std::span<T>(std::get<std::vector<T>>(data_));
  }
  template <class T>
  std::span<const T> data() const {
    check_type<T>();
    return std::span<const T>(std::get<std::vector<T>>(data_));
  }

  double at(std::size_t flat) const;
  void set(std::size_t flat, double v);
  double item() const;

  std::vector<double> to_vector() const;
  Tensor astype(DType dt) const;
  /// Same storage, new shape; element count must match.
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  /// this += other (same shape and dtype).
  void add_(const Tensor& other);
  void scale_(double s);

  bool all_finite() const;
  bool bit_equal(const Tensor& other) const;

 private:
  template <class T>
  void check_type() const {
    if (dtype_ != dtype_of<T>::value) throw ShapeError("tensor dtype mismatch: stored " + std::string(dtype_name(dtype_)));
  }

  Shape shape_;
  std::size_t numel_ = 0;
  DType dtype_ = DType::f64;
  std::variant<std::vector<float>, std::vector<double>> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dain
