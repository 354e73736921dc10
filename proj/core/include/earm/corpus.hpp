#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "earm/dist.hpp"
#include "earm/rng.hpp"
#include "earm/vocab.hpp"

namespace earm {

enum class SourceKind { markov, copy, uniform };

const char* source_kind_name(SourceKind k);
SourceKind source_kind_from_name(const std::string& name);

/// Synthetic ground-truth distribution over fixed-length sequences, used in
/// place of real corpora so that the data law is exactly enumerable.
///
/// markov:  order-n chain; the first n tokens are drawn jointly from the
///          stationary law of the context chain (power iteration from the
///          uniform law), later tokens follow the transition table.
/// uniform: every token i.i.d. uniform over the alphabet.
/// copy:    the first ceil(K/2) tokens are i.i.d. uniform and the rest
///          repeat them (token t equals token t - ceil(K/2)).
struct SyntheticSource {
  SourceKind kind = SourceKind::uniform;
  int order = 1;
  int vocab_size = 0;
  int seq_length = 0;
  std::uint64_t seed = 0;
  std::vector<double> transitions;  // row-major, V^order rows by V columns; empty for copy

  static SyntheticSource uniform(int vocab_size, int seq_length, std::uint64_t seed);
  static SyntheticSource markov(int vocab_size, int seq_length, int order,
                                std::vector<double> transitions, std::uint64_t seed);
  /// Seeded random chain: rows are normalized Gamma(concentration) draws.
  /// Smaller concentration gives peakier rows.
  static SyntheticSource random_markov(int vocab_size, int seq_length, int order,
                                       double concentration, std::uint64_t seed);
  static SyntheticSource copy_task(int vocab_size, int seq_length, std::uint64_t seed);

  /// Throws std::invalid_argument when a transition row does not sum to 1
  /// within 1e-12, dimensions are inconsistent, or fields are out of range.
  void validate() const;

  std::size_t context_count() const;  // V^order
  /// Stationary law over V^order contexts (power iteration, documented
  /// fallback: last iterate after 20000 sweeps).
  std::vector<double> stationary_context_law() const;

  std::string to_json_string(int indent = -1) const;
  static SyntheticSource from_json_string(const std::string& text);
};

enum class Split : std::uint8_t { train = 0, valid = 1, test = 2 };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct SplitFractions {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
};

struct Corpus {
  Vocabulary vocab;
  std::vector<TokenSeq> sequences;
  std::vector<Split> splits;

  std::size_t size() const { return sequences.size(); }
  std::vector<std::size_t> indices(Split s) const;
  std::size_t count(Split s) const;
  std::size_t total_tokens() const;
  std::size_t max_length() const;
  /// All ids in range, one split tag per sequence.
  void validate() const;
  std::vector<TokenSeq> split_sequences(Split s) const;
};

/// Deterministic in (source, n_sequences, source.seed): reruns are
/// byte-identical. Sequence i uses the stream seed/corpus/i, split tags the
/// stream seed/split/i, so the draw is independent of batching.
Corpus generate_corpus(const SyntheticSource& source, std::size_t n_sequences,
                       const Vocabulary& vocab, SplitFractions fractions = {});

/// Exact data law P_d over length-k prefixes of the source
/// (enumeration-guarded).
ExactDist exact_data_dist(const SyntheticSource& source, int k);

/// Character-level ingestion: UTF-8 text, one sequence per LF-terminated
/// line, bytes as symbols. Lines longer than max_len are truncated, empty
/// lines skipped; all sequences are tagged train (use assign_splits to
/// re-partition). Vocabulary is built over observed bytes in byte order.
Corpus load_text_corpus(const std::string& path, std::size_t max_len);

/// One line per sequence, symbols concatenated (single-byte symbols only).
void save_text_corpus(const Corpus& corpus, const std::string& path);

/// JSON container round-trip for corpora with splits and arbitrary symbols.
void save_corpus_json(const Corpus& corpus, const std::string& path);
Corpus load_corpus_json(const std::string& path);

/// Deterministic re-partition of split tags (stream seed/split/i).
void assign_splits(Corpus& corpus, SplitFractions fractions, std::uint64_t seed);

/// Streams one epoch at a time: shuffles sequence indices with the stream
/// seed/batch_order/epoch and greedily packs batches so each batch holds at
/// most max_tokens tokens. Every pooled sequence appears exactly once per
/// epoch. Throws at construction if a pooled sequence alone exceeds
/// max_tokens (naming its index).
class BatchIter {
public:
  BatchIter(const Corpus& corpus, std::optional<Split> split, std::size_t max_tokens,
            std::uint64_t seed);

  void begin_epoch(std::uint64_t epoch);
  /// Next batch of sequence indices, or nullopt at end of epoch.
  std::optional<std::vector<std::size_t>> next();

private:
  const Corpus* corpus_;
  std::vector<std::size_t> pool_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t max_tokens_;
  std::uint64_t seed_;
};

}  // namespace earm
