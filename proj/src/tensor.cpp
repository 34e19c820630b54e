#include "dain/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace dain {

std::string_view dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw std::invalid_argument("unknown dtype '" + std::string(s) + "'");
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  if (shape_.empty()) throw ShapeError("tensor rank must be >= 1");
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape_));
  numel_ = shape_numel(shape_);
  if (dtype == DType::f32)
    data_ = std::vector<float>(numel_, 0.0f);
  else
    data_ = std::vector<double>(numel_, 0.0);
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (values.size() != t.numel())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(t.shape()));
  for (std::size_t i = 0; i < values.size(); ++i) t.set(i, values[i]);
  return t;
}

double Tensor::at(std::size_t flat) const {
  return dispatch(dtype_, [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(std::get<std::vector<T>>(data_).at(flat));
  });
}

void Tensor::set(std::size_t flat, double v) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    std::get<std::vector<T>>(data_).at(flat) = static_cast<T>(v);
  });
}

double Tensor::item() const {
  if (numel_ != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(numel_);
  for (std::size_t i = 0; i < numel_; ++i) out[i] = at(i);
  return out;
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype_) return *this;
  Tensor out(shape_, dt);
  for (std::size_t i = 0; i < numel_; ++i) out.set(i, at(i));
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel_)
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor extents must be >= 1");
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void Tensor::fill(double v) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto& d = std::get<std::vector<T>>(data_);
    std::fill(d.begin(), d.end(), static_cast<T>(v));
  });
}

void Tensor::add_(const Tensor& other) {
  if (other.shape_ != shape_ || other.dtype_ != dtype_)
    throw ShapeError("add_: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto& d = std::get<std::vector<T>>(data_);
    const auto& o = std::get<std::vector<T>>(other.data_);
    for (std::size_t i = 0; i < numel_; ++i) d[i] += o[i];
  });
}

void Tensor::scale_(double s) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : std::get<std::vector<T>>(data_)) v *= static_cast<T>(s);
  });
}

bool Tensor::all_finite() const {
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    for (auto v : std::get<std::vector<T>>(data_))
      if (!std::isfinite(v)) return false;
    return true;
  });
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    const auto& a = std::get<std::vector<T>>(data_);
    const auto& b = std::get<std::vector<T>>(other.data_);
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace dain
