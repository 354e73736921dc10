#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace earm {

/// Flat accumulator over model parameters, indexed exactly like the
/// parameter vector. Accumulation is additive; merging per-worker sinks is
/// a plain elementwise sum.
class GradVector {
public:
  GradVector() = default;
  explicit GradVector(std::size_t n) : v_(n, 0.0) {}

  std::size_t size() const { return v_.size(); }
  void zero() { std::fill(v_.begin(), v_.end(), 0.0); }

  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  std::span<double> values() { return v_; }
  std::span<const double> values() const { return v_; }

  GradVector& operator+=(const GradVector& o) {
    check_size(o);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    return *this;
  }
  GradVector& operator-=(const GradVector& o) {
    check_size(o);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] -= o.v_[i];
    return *this;
  }

  /// this += a * o
  void axpy(double a, const GradVector& o) {
    check_size(o);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += a * o.v_[i];
  }
  void scale(double a) {
    for (double& x : v_) x *= a;
  }

  double l2_norm() const {
    double s = 0.0;
    for (double x : v_) s += x * x;
    return std::sqrt(s);
  }
  double max_abs() const {
    double m = 0.0;
    for (double x : v_) m = std::max(m, std::abs(x));
    return m;
  }
  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

private:
  void check_size(const GradVector& o) const {
    if (o.v_.size() != v_.size()) throw std::invalid_argument("GradVector: size mismatch");
  }
  std::vector<double> v_;
};

}  // namespace earm
