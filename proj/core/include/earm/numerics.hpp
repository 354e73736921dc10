#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace earm {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(sum_i exp(v_i)) with max shift; -inf for an empty span.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return kNegInf;
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;  // all -inf, or a +-inf/NaN input propagates
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

/// log( (1/n) sum_i exp(v_i) ).
inline double log_mean_exp(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("log_mean_exp: empty input");
  return log_sum_exp(v) - std::log(static_cast<double>(v.size()));
}

/// Max-shifted softmax, in place.
inline void softmax_inplace(std::span<double> v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double& x : v) {
    x = std::exp(x - m);
    s += x;
  }
  for (double& x : v) x /= s;
}

inline std::vector<double> softmax(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// base^exp as size_t, rejecting results above `bound`. Used as the
/// enumeration guard for exhaustive sequence spaces.
inline std::size_t checked_pow(std::size_t base, int exp, std::size_t bound) {
  std::size_t r = 1;
  for (int i = 0; i < exp; ++i) {
    if (base != 0 && r > bound / base)
      throw std::invalid_argument("enumeration guard exceeded: " + std::to_string(base) + "^" +
                                  std::to_string(exp) + " > " + std::to_string(bound));
    r *= base;
  }
  if (r > bound)
    throw std::invalid_argument("enumeration guard exceeded: " + std::to_string(base) + "^" +
                                std::to_string(exp) + " > " + std::to_string(bound));
  return r;
}

/// Default cap on exhaustively enumerated sequence spaces.
inline constexpr std::size_t kEnumerationBound = 1000000;

}  // namespace earm
