#pragma once

#include <Eigen/Core>

#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace cgr {

using Index = Eigen::Index;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible dimensions, bad axis, or a violated operator precondition.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf was produced while checked mode is on.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Rank-4 NCHW extent. Lower-rank quantities use trailing unit axes, e.g. a
/// (M x K) matrix is stored as (1, M, K, 1).
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  constexpr Index size() const { return n * c * h * w; }
  constexpr Index operator[](int axis) const {
    return axis == 0 ? n : axis == 1 ? c : axis == 2 ? h : w;
  }
  constexpr Index& operator[](int axis) {
    return axis == 0 ? n : axis == 1 ? c : axis == 2 ? h : w;
  }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

namespace detail {
inline std::atomic<bool>& checked_flag() {
  static std::atomic<bool> flag{true};
  return flag;
}
}  // namespace detail

/// Checked mode makes every op verify its output is finite.
inline bool checked_mode() { return detail::checked_flag().load(std::memory_order_relaxed); }
inline void set_checked_mode(bool on) { detail::checked_flag().store(on, std::memory_order_relaxed); }

/// Dense NCHW tensor, row-major (w fastest), with an optional gradient slot of
/// identical extent.
template <typename Scalar_>
class BasicTensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape) : shape_(validated(shape)), data_(Vector::Zero(shape.size())) {}
  BasicTensor(Shape shape, Vector data) : shape_(validated(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + shape_.str());
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(shape); }
  static BasicTensor constant(Shape shape, Scalar value) {
    return BasicTensor(shape, Vector::Constant(shape.size(), value));
  }
  static BasicTensor ones(Shape shape) { return constant(shape, Scalar(1)); }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Pointer to the (h, w) plane of sample n, channel c.
  Scalar* plane(Index n, Index c) { return data_.data() + offset(n, c, 0, 0); }
  const Scalar* plane(Index n, Index c) const { return data_.data() + offset(n, c, 0, 0); }

  bool has_grad() const { return grad_.has_value(); }
  Vector& grad() {
    if (!grad_) grad_ = Vector::Zero(data_.size());
    return *grad_;
  }
  const Vector& grad() const {
    if (!grad_) throw Error("tensor has no gradient");
    return *grad_;
  }
  void set_grad(Vector g) {
    if (g.size() != data_.size()) throw ShapeError("gradient length does not match tensor");
    grad_ = std::move(g);
  }
  void clear_grad() { grad_.reset(); }

  /// Same data under new dims of equal element count; drops the gradient.
  BasicTensor reshaped(Shape shape) const {
    if (shape.size() != shape_.size()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return BasicTensor(shape, data_);
  }

  template <typename To>
  BasicTensor<To> cast() const {
    return BasicTensor<To>(shape_, data_.template cast<To>());
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  static Shape validated(Shape shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ShapeError("negative tensor dims " + shape.str());
    }
    return shape;
  }

  Shape shape_{};
  Vector data_{};
  std::optional<Vector> grad_{};
};

using Tensor = BasicTensor<double>;

/// Throws NumericError naming `op` if checked mode is on and `t` holds a
/// non-finite value.
template <typename Scalar>
void check_finite(const BasicTensor<Scalar>& t, std::string_view op) {
  if (checked_mode() && !t.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

}  // namespace cgr
