#include "earm/dist.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "earm/numerics.hpp"

namespace earm {

ExactDist::ExactDist(int vocab_size, int length, std::vector<double> log_mass)
    : vocab_size_(vocab_size), length_(length), log_mass_(std::move(log_mass)) {
  if (vocab_size_ < 1) throw std::invalid_argument("ExactDist: vocab size must be positive");
  if (length_ < 0) throw std::invalid_argument("ExactDist: negative length");
  const std::size_t want = checked_support(vocab_size_, length_);
  if (log_mass_.size() != want)
    throw std::invalid_argument("ExactDist: table has " + std::to_string(log_mass_.size()) +
                                " entries, expected " + std::to_string(want));
  const double total = total_mass();
  if (std::abs(total - 1.0) > 1e-12)
    throw std::invalid_argument("ExactDist: masses sum to " + std::to_string(total) +
                                ", expected 1 within 1e-12");
}

double ExactDist::mass_at(std::size_t index) const { return std::exp(log_mass_[index]); }

double ExactDist::log_mass(std::span<const std::int32_t> seq) const {
  return log_mass_[index_of(seq)];
}

double ExactDist::mass(std::span<const std::int32_t> seq) const {
  return std::exp(log_mass(seq));
}

std::size_t ExactDist::index_of(std::span<const std::int32_t> seq) const {
  if (static_cast<int>(seq.size()) != length_)
    throw std::invalid_argument("ExactDist: sequence length " + std::to_string(seq.size()) +
                                " does not match table length " + std::to_string(length_));
  check_token_ids(seq, vocab_size_);
  std::size_t idx = 0;
  for (std::int32_t t : seq) idx = idx * static_cast<std::size_t>(vocab_size_) + static_cast<std::size_t>(t);
  return idx;
}

TokenSeq ExactDist::sequence_at(std::size_t index) const {
  TokenSeq seq(static_cast<std::size_t>(length_), 0);
  for (int pos = length_ - 1; pos >= 0; --pos) {
    seq[static_cast<std::size_t>(pos)] = static_cast<std::int32_t>(index % static_cast<std::size_t>(vocab_size_));
    index /= static_cast<std::size_t>(vocab_size_);
  }
  return seq;
}

double ExactDist::total_mass() const {
  // Summed via log_sum_exp so tiny masses do not vanish before the check.
  return std::exp(log_sum_exp(log_mass_));
}

std::size_t ExactDist::checked_support(int vocab_size, int length) {
  return checked_pow(static_cast<std::size_t>(vocab_size), length, kEnumerationBound);
}

}  // namespace earm
