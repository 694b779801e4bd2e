#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace textless {

using Shape = std::vector<std::size_t>;

/// Thrown for operand shapes an operation cannot accept.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. Rank 0 is a scalar.
///
/// Most of the library treats tensors as matrices: rank-2 tensors are
/// rows x cols, rank-1 tensors are a single row, and higher ranks collapse
/// everything but the last axis into rows.
class Tensor {
 public:
  Tensor() : values_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_numel(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims();
    if (values_.size() != shape_numel(shape_)) {
      throw ShapeError("Tensor: " + std::to_string(values_.size()) +
                       " values do not fill shape " + to_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor(Shape{rows, cols}, fill);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }
  static Tensor vector(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept {
    const auto c = cols();
    return c == 0 ? 0 : values_.size() / c;
  }

  std::span<double> data() noexcept { return values_; }
  std::span<const double> data() const noexcept { return values_; }
  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return std::span<double>(values_).subspan(r * cols(), cols()); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }

  double item() const {
    if (values_.size() != 1) throw ShapeError("Tensor::item on shape " + to_string(shape_));
    return values_[0];
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Same values under a new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    Tensor out(std::move(shape), values_);
    out.requires_grad_ = requires_grad_;
    return out;
  }

  Tensor rows_slice(std::size_t begin, std::size_t count) const {
    if (begin + count > rows()) {
      throw ShapeError("rows_slice: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                       ") out of " + to_string(shape_));
    }
    const auto c = cols();
    std::vector<double> v(values_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          values_.begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
    return Tensor::matrix(count, c, std::move(v));
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && values_ == other.values_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0 && shape_.size() != 2) throw ShapeError("Tensor: zero extent in shape " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
};

/// Contiguous row ranges of a packed batch: sequence i occupies rows
/// [offset[i], offset[i] + length[i]).
struct Segments {
  std::vector<std::size_t> offset;
  std::vector<std::size_t> length;

  static Segments single(std::size_t len) { return Segments{{0}, {len}}; }

  static Segments from_lengths(std::span<const std::size_t> lengths) {
    Segments s;
    std::size_t at = 0;
    for (auto l : lengths) {
      s.offset.push_back(at);
      s.length.push_back(l);
      at += l;
    }
    return s;
  }

  std::size_t count() const noexcept { return length.size(); }
  std::size_t total() const noexcept { return std::accumulate(length.begin(), length.end(), std::size_t{0}); }
};

}  // namespace textless
