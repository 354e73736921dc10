#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "earm/vocab.hpp"

namespace earm {

/// Enumeration-backed probability table over every length-k sequence of a
/// V-symbol alphabet, in lexicographic order (first token most
/// significant). Masses are kept in log domain; construction checks the
/// table sums to 1 within 1e-12.
class ExactDist {
public:
  ExactDist(int vocab_size, int length, std::vector<double> log_mass);

  int vocab_size() const { return vocab_size_; }
  int length() const { return length_; }
  std::size_t support_size() const { return log_mass_.size(); }

  double log_mass_at(std::size_t index) const { return log_mass_[index]; }
  double mass_at(std::size_t index) const;
  double log_mass(std::span<const std::int32_t> seq) const;
  double mass(std::span<const std::int32_t> seq) const;

  std::size_t index_of(std::span<const std::int32_t> seq) const;
  TokenSeq sequence_at(std::size_t index) const;

  /// Linear-domain sum over the support (should be 1 up to rounding).
  double total_mass() const;

  /// V^k with the standard enumeration guard; throws when above the bound.
  static std::size_t checked_support(int vocab_size, int length);

private:
  int vocab_size_ = 0;
  int length_ = 0;
  std::vector<double> log_mass_;
};

}  // namespace earm
