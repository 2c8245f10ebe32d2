#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "exuseg/error.hpp"

namespace exuseg {

#if defined(EXUSEG_FLOAT32)
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major N-d array. Rank 0 holds one element.
class Tensor {
public:
  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, real fill = 0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), real{0}); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), real{1}); }
  static Tensor full(Shape s, real v) { return Tensor(std::move(s), v); }
  static Tensor from(std::initializer_list<real> values) {
    return Tensor(Shape{values.size()}, std::vector<real>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<real> data() noexcept { return data_; }
  std::span<const real> data() const noexcept { return data_; }
  real* ptr() noexcept { return data_.data(); }
  const real* ptr() const noexcept { return data_.data(); }
  const std::vector<real>& values() const noexcept { return data_; }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  // Multi-index access; bounds are checked per axis.
  template <typename... Idx>
  real& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  real at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size())
      throw ShapeError("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                       std::to_string(shape_.size()));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis])
        throw ShapeError("index " + std::to_string(i) + " out of range on axis " +
                         std::to_string(axis) + " of " + shape_str(shape_));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  void fill(real v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](real v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  Shape shape_;
  std::vector<real> data_;
};

inline void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NonFiniteError(std::string("non-finite value produced by ") + where);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(where) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline Tensor reshape(const Tensor& t, Shape new_shape) {
  if (shape_numel(new_shape) != t.size())
    throw ShapeError("cannot reshape " + shape_str(t.shape()) + " into " + shape_str(new_shape));
  return Tensor(std::move(new_shape), t.values());
}

enum class BinaryOp { add, sub, mul, div };

inline Tensor elementwise(const Tensor& a, const Tensor& b, BinaryOp op) {
  require_same_shape(a, b, "elementwise");
  Tensor out(a.shape());
  const real* pa = a.ptr();
  const real* pb = b.ptr();
  real* po = out.ptr();
  const std::size_t n = a.size();
  switch (op) {
    case BinaryOp::add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
    case BinaryOp::sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
    case BinaryOp::mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    case BinaryOp::div: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
  }
  require_finite(out, "elementwise");
  return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryOp::add); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryOp::sub); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryOp::mul); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryOp::div); }

// Repeats t over leading axes so its shape becomes `target`; t's shape must
// equal the trailing axes of `target`.
inline Tensor broadcast_to(const Tensor& t, const Shape& target) {
  const Shape& s = t.shape();
  if (s.size() > target.size() || !std::equal(s.rbegin(), s.rend(), target.rbegin()))
    throw ShapeError("cannot broadcast " + shape_str(s) + " to " + shape_str(target));
  Tensor out(target);
  const std::size_t block = t.size();
  if (block == 0) return out;
  for (std::size_t off = 0; off < out.size(); off += block)
    std::copy(t.values().begin(), t.values().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
  return out;
}

inline Tensor scale(const Tensor& t, real factor) {
  Tensor out = t;
  for (real& v : out.data()) v *= factor;
  require_finite(out, "scale");
  return out;
}

inline real sum(const Tensor& t) {
  real s = 0;
  for (real v : t.data()) s += v;
  return s;
}

inline real max_abs(const Tensor& t) {
  real m = 0;
  for (real v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace exuseg
