#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "earm/model.hpp"
#include "earm/rng.hpp"
#include "earm/vocab.hpp"

namespace earm {

enum class DecodeMode { greedy, beam, ancestral };
enum class ResampleMode { off, rerank, softmax_sample };

const char* decode_mode_name(DecodeMode m);
DecodeMode decode_mode_from_name(const std::string& s);
const char* resample_mode_name(ResampleMode m);
ResampleMode resample_mode_from_name(const std::string& s);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::greedy;
  int beam_width = 5;
  int max_length = 0;
  ResampleMode resample = ResampleMode::off;
  int candidates = 1;
  void validate() const;
};

/// Argmax of the conditional at each position; ties go to the lowest token
/// id, so the decode is deterministic.
TokenSeq decode_greedy(const ArModel& model, int max_length);

struct Hypothesis {
  TokenSeq seq;
  double log_prob = 0.0;
};

/// Length-complete beam over cumulative log q (no length normalization).
/// Returns min(width, V^max_length) hypotheses sorted by descending score;
/// equal scores order lexicographically.
std::vector<Hypothesis> decode_beam(const ArModel& model, int width, int max_length);

/// Selects among candidate sequences by their full-sequence energy
/// (the energy at the final step). rerank returns the argmin (first on
/// ties);
/// softmax_sample draws proportionally to e^{-energy}.
TokenSeq energy_resample(const ArModel& model, std::span<const TokenSeq> candidates,
                         ResampleMode mode, CounterRng rng);

struct PerplexityResult {
  double value = 0.0;
  double mean_nll = 0.0;
  std::size_t token_count = 0;
  /// A token with zero model probability was hit; value is +inf.
  bool zero_prob = false;
};

/// exp(total NLL / total tokens), natural log base.
PerplexityResult perplexity(const ArModel& model, std::span<const TokenSeq> seqs);

/// Fraction of (sequence, position) pairs where model a gives the gold
/// token strictly higher conditional probability than model b (ties do not
/// count).
double exposure_bias_ratio(const ArModel& a, const ArModel& b, std::span<const TokenSeq> seqs);

struct LengthBucket {
  int lo = 0;
  std::optional<int> hi;  // open-ended final bucket when absent
  std::size_t count = 0;
  std::size_t tokens = 0;
  std::optional<double> ppl;  // absent for empty buckets
};

/// Partitions sequences by length into [0,b0), [b0,b1), ..., [b_last, inf)
/// and reports per-bucket perplexity. Boundaries must be strictly
/// increasing.
std::vector<LengthBucket> bucketed_eval(const ArModel& model, std::span<const TokenSeq> seqs,
                                        std::span<const int> boundaries);

struct EvalReport {
  PerplexityResult ppl;
  std::vector<LengthBucket> buckets;
  std::optional<double> exposure_ratio;
  std::string to_json_string(int indent = -1) const;
};

}  // namespace earm
