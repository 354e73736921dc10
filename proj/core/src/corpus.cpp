#include "earm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "earm/numerics.hpp"
#include "json.hpp"

namespace earm {

namespace {

double sample_normal(CounterRng& rng) {
  double u1 = rng.next_unit();
  while (u1 <= 0.0) u1 = rng.next_unit();
  const double u2 = rng.next_unit();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238462643 * u2);
}

// Marsaglia-Tsang, with the alpha<1 boost.
double sample_gamma(CounterRng& rng, double alpha) {
  if (alpha < 1.0) {
    double u = rng.next_unit();
    while (u == 0.0) u = rng.next_unit();
    return sample_gamma(rng, alpha + 1.0) * std::pow(u, 1.0 / alpha);
  }
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / (3.0 * std::sqrt(d));
  while (true) {
    double x = 0.0, v = 0.0;
    do {
      x = sample_normal(rng);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.next_unit();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

// Context index: digits over base V, first token most significant.
// Appending a symbol drops the oldest digit.
std::size_t shift_context(std::size_t ctx, std::int32_t symbol, std::size_t n_contexts, int v) {
  return (ctx * static_cast<std::size_t>(v) + static_cast<std::size_t>(symbol)) % n_contexts;
}

TokenSeq context_digits(std::size_t ctx, int order, int v) {
  TokenSeq digits(static_cast<std::size_t>(order), 0);
  for (int i = order - 1; i >= 0; --i) {
    digits[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(ctx % static_cast<std::size_t>(v));
    ctx /= static_cast<std::size_t>(v);
  }
  return digits;
}

int copy_half(int seq_length) { return (seq_length + 1) / 2; }

}  // namespace

const char* source_kind_name(SourceKind k) {
  switch (k) {
    case SourceKind::markov: return "markov";
    case SourceKind::copy: return "copy";
    case SourceKind::uniform: return "uniform";
  }
  return "?";
}

SourceKind source_kind_from_name(const std::string& name) {
  if (name == "markov") return SourceKind::markov;
  if (name == "copy") return SourceKind::copy;
  if (name == "uniform") return SourceKind::uniform;
  throw std::invalid_argument("unknown source kind: " + name);
}

SyntheticSource SyntheticSource::uniform(int vocab_size, int seq_length, std::uint64_t seed) {
  SyntheticSource s;
  s.kind = SourceKind::uniform;
  s.order = 1;
  s.vocab_size = vocab_size;
  s.seq_length = seq_length;
  s.seed = seed;
  s.transitions.assign(static_cast<std::size_t>(vocab_size) * static_cast<std::size_t>(vocab_size),
                       1.0 / static_cast<double>(vocab_size));
  s.validate();
  return s;
}

SyntheticSource SyntheticSource::markov(int vocab_size, int seq_length, int order,
                                        std::vector<double> transitions, std::uint64_t seed) {
  SyntheticSource s;
  s.kind = SourceKind::markov;
  s.order = order;
  s.vocab_size = vocab_size;
  s.seq_length = seq_length;
  s.seed = seed;
  s.transitions = std::move(transitions);
  s.validate();
  return s;
}

SyntheticSource SyntheticSource::random_markov(int vocab_size, int seq_length, int order,
                                               double concentration, std::uint64_t seed) {
  if (concentration <= 0.0) throw std::invalid_argument("random_markov: concentration must be positive");
  SyntheticSource s;
  s.kind = SourceKind::markov;
  s.order = order;
  s.vocab_size = vocab_size;
  s.seq_length = seq_length;
  s.seed = seed;
  const std::size_t rows = checked_pow(static_cast<std::size_t>(vocab_size), order, kEnumerationBound);
  s.transitions.resize(rows * static_cast<std::size_t>(vocab_size));
  CounterRng rng = CounterRng(seed).derive(stream_tag::corpus).derive(0x7ab1e5);
  for (std::size_t r = 0; r < rows; ++r) {
    CounterRng row_rng = rng.derive(r);
    double total = 0.0;
    for (int j = 0; j < vocab_size; ++j) {
      const double g = sample_gamma(row_rng, concentration);
      s.transitions[r * static_cast<std::size_t>(vocab_size) + static_cast<std::size_t>(j)] = g;
      total += g;
    }
    for (int j = 0; j < vocab_size; ++j)
      s.transitions[r * static_cast<std::size_t>(vocab_size) + static_cast<std::size_t>(j)] /= total;
  }
  s.validate();
  return s;
}

SyntheticSource SyntheticSource::copy_task(int vocab_size, int seq_length, std::uint64_t seed) {
  SyntheticSource s;
  s.kind = SourceKind::copy;
  s.order = 1;
  s.vocab_size = vocab_size;
  s.seq_length = seq_length;
  s.seed = seed;
  s.validate();
  return s;
}

void SyntheticSource::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("synthetic source: V must be at least 2");
  if (seq_length < 1) throw std::invalid_argument("synthetic source: K must be at least 1");
  if (order < 1) throw std::invalid_argument("synthetic source: order must be at least 1");
  if (kind == SourceKind::copy) {
    if (!transitions.empty())
      throw std::invalid_argument("synthetic source: copy kind takes no transition table");
    return;
  }
  const std::size_t rows = context_count();
  const std::size_t v = static_cast<std::size_t>(vocab_size);
  if (transitions.size() != rows * v)
    throw std::invalid_argument("synthetic source: transition table has " +
                                std::to_string(transitions.size()) + " entries, expected " +
                                std::to_string(rows * v));
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double p = transitions[r * v + j];
      if (!(p >= 0.0) || !std::isfinite(p))
        throw std::invalid_argument("synthetic source: negative or non-finite transition in row " +
                                    std::to_string(r));
      if (kind == SourceKind::uniform && std::abs(p - 1.0 / static_cast<double>(vocab_size)) > 1e-12)
        throw std::invalid_argument("synthetic source: uniform kind requires all rows equal 1/V");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw std::invalid_argument("synthetic source: transition row " + std::to_string(r) +
                                  " sums to " + std::to_string(sum) + ", expected 1 within 1e-12");
  }
}

std::size_t SyntheticSource::context_count() const {
  return checked_pow(static_cast<std::size_t>(vocab_size), order, kEnumerationBound);
}

std::vector<double> SyntheticSource::stationary_context_law() const {
  const std::size_t n = context_count();
  std::vector<double> pi(n, 1.0 / static_cast<double>(n));
  if (kind == SourceKind::copy || kind == SourceKind::uniform) return pi;
  const std::size_t v = static_cast<std::size_t>(vocab_size);
  std::vector<double> next(n, 0.0);
  for (int iter = 0; iter < 20000; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t c = 0; c < n; ++c) {
      if (pi[c] == 0.0) continue;
      for (std::size_t j = 0; j < v; ++j)
        next[shift_context(c, static_cast<std::int32_t>(j), n, vocab_size)] += pi[c] * transitions[c * v + j];
    }
    double diff = 0.0;
    for (std::size_t c = 0; c < n; ++c) diff += std::abs(next[c] - pi[c]);
    pi.swap(next);
    if (diff < 1e-13) break;
  }
  return pi;
}

std::string SyntheticSource::to_json_string(int indent) const {
  nlohmann::json j;
  j["kind"] = source_kind_name(kind);
  j["order"] = order;
  j["V"] = vocab_size;
  j["K"] = seq_length;
  j["seed"] = seed;
  j["transitions"] = transitions;
  return j.dump(indent);
}

SyntheticSource SyntheticSource::from_json_string(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  SyntheticSource s;
  s.kind = source_kind_from_name(j.at("kind").get<std::string>());
  s.order = j.value("order", 1);
  s.vocab_size = j.at("V").get<int>();
  s.seq_length = j.at("K").get<int>();
  s.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("transitions")) s.transitions = j["transitions"].get<std::vector<double>>();
  if (s.kind == SourceKind::uniform && s.transitions.empty()) {
    s.transitions.assign(static_cast<std::size_t>(s.vocab_size) * static_cast<std::size_t>(s.vocab_size),
                         1.0 / static_cast<double>(s.vocab_size));
  }
  s.validate();
  return s;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "valid") return Split::valid;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split: " + name);
}

std::vector<std::size_t> Corpus::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < sequences.size(); ++i)
    if (splits[i] == s) out.push_back(i);
  return out;
}

std::size_t Corpus::count(Split s) const {
  std::size_t n = 0;
  for (Split t : splits) n += (t == s);
  return n;
}

std::size_t Corpus::total_tokens() const {
  std::size_t n = 0;
  for (const auto& seq : sequences) n += seq.size();
  return n;
}

std::size_t Corpus::max_length() const {
  std::size_t m = 0;
  for (const auto& seq : sequences) m = std::max(m, seq.size());
  return m;
}

void Corpus::validate() const {
  if (splits.size() != sequences.size())
    throw std::invalid_argument("corpus: split tags do not cover all sequences");
  for (const auto& seq : sequences) check_token_ids(seq, vocab.size());
}

std::vector<TokenSeq> Corpus::split_sequences(Split s) const {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < sequences.size(); ++i)
    if (splits[i] == s) out.push_back(sequences[i]);
  return out;
}

namespace {

Split draw_split(CounterRng rng, SplitFractions f) {
  const double u = rng.next_unit();
  if (u < f.train) return Split::train;
  if (u < f.train + f.valid) return Split::valid;
  return Split::test;
}

TokenSeq generate_sequence(const SyntheticSource& src, const std::vector<double>& initial_law,
                           CounterRng rng) {
  const int k = src.seq_length;
  TokenSeq seq;
  seq.reserve(static_cast<std::size_t>(k));
  if (src.kind == SourceKind::copy) {
    const int h = copy_half(k);
    for (int t = 0; t < h; ++t)
      seq.push_back(static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(src.vocab_size))));
    for (int t = h; t < k; ++t) seq.push_back(seq[static_cast<std::size_t>(t - h)]);
    return seq;
  }
  const std::size_t n_ctx = src.context_count();
  const std::size_t v = static_cast<std::size_t>(src.vocab_size);
  std::size_t ctx = static_cast<std::size_t>(rng.sample_categorical(initial_law));
  TokenSeq head = context_digits(ctx, src.order, src.vocab_size);
  for (int t = 0; t < std::min(k, src.order); ++t) seq.push_back(head[static_cast<std::size_t>(t)]);
  for (int t = src.order; t < k; ++t) {
    std::span<const double> row(src.transitions.data() + ctx * v, v);
    const std::int32_t s = static_cast<std::int32_t>(rng.sample_categorical(row));
    seq.push_back(s);
    ctx = shift_context(ctx, s, n_ctx, src.vocab_size);
  }
  return seq;
}

}  // namespace

Corpus generate_corpus(const SyntheticSource& source, std::size_t n_sequences,
                       const Vocabulary& vocab, SplitFractions fractions) {
  source.validate();
  if (n_sequences < 1) throw std::invalid_argument("generate_corpus: need at least one sequence");
  if (vocab.size() != source.vocab_size)
    throw std::invalid_argument("generate_corpus: vocabulary size " + std::to_string(vocab.size()) +
                                " does not match source V " + std::to_string(source.vocab_size));
  const std::vector<double> initial_law = source.stationary_context_law();
  Corpus c;
  c.vocab = vocab;
  c.sequences.reserve(n_sequences);
  c.splits.reserve(n_sequences);
  const CounterRng base(source.seed);
  const CounterRng gen = base.derive(stream_tag::corpus);
  const CounterRng split = base.derive(stream_tag::split);
  for (std::size_t i = 0; i < n_sequences; ++i) {
    c.sequences.push_back(generate_sequence(source, initial_law, gen.derive(i)));
    c.splits.push_back(draw_split(split.derive(i), fractions));
  }
  return c;
}

ExactDist exact_data_dist(const SyntheticSource& source, int k) {
  source.validate();
  if (k < 1 || k > source.seq_length)
    throw std::invalid_argument("exact_data_dist: k must be in 1..K");
  const std::size_t support = ExactDist::checked_support(source.vocab_size, k);
  std::vector<double> log_mass(support, kNegInf);
  const int v = source.vocab_size;

  if (source.kind == SourceKind::uniform) {
    const double lm = -static_cast<double>(k) * std::log(static_cast<double>(v));
    std::fill(log_mass.begin(), log_mass.end(), lm);
    return ExactDist(v, k, std::move(log_mass));
  }

  if (source.kind == SourceKind::copy) {
    const int h = copy_half(source.seq_length);
    const double lm = -static_cast<double>(std::min(k, h)) * std::log(static_cast<double>(v));
    ExactDist skeleton(v, k, std::vector<double>(support, -std::log(static_cast<double>(support))));
    for (std::size_t idx = 0; idx < support; ++idx) {
      const TokenSeq seq = skeleton.sequence_at(idx);
      bool ok = true;
      for (int t = h; t < k && ok; ++t) ok = seq[static_cast<std::size_t>(t)] == seq[static_cast<std::size_t>(t - h)];
      log_mass[idx] = ok ? lm : kNegInf;
    }
    return ExactDist(v, k, std::move(log_mass));
  }

  // markov
  const std::vector<double> pi = source.stationary_context_law();
  const std::size_t n_ctx = source.context_count();
  const std::size_t vv = static_cast<std::size_t>(v);
  const int n = source.order;
  if (k <= n) {
    // marginal of the initial context law over its first k coordinates
    std::vector<double> mass(support, 0.0);
    const std::size_t tail = checked_pow(vv, n - k, kEnumerationBound);
    for (std::size_t c = 0; c < n_ctx; ++c) mass[c / tail] += pi[c];
    for (std::size_t i = 0; i < support; ++i)
      log_mass[i] = mass[i] > 0.0 ? std::log(mass[i]) : kNegInf;
    return ExactDist(v, k, std::move(log_mass));
  }
  ExactDist skeleton(v, k, std::vector<double>(support, -std::log(static_cast<double>(support))));
  for (std::size_t idx = 0; idx < support; ++idx) {
    const TokenSeq seq = skeleton.sequence_at(idx);
    std::size_t ctx = 0;
    for (int t = 0; t < n; ++t) ctx = ctx * vv + static_cast<std::size_t>(seq[static_cast<std::size_t>(t)]);
    double lp = pi[ctx] > 0.0 ? std::log(pi[ctx]) : kNegInf;
    for (int t = n; t < k && lp != kNegInf; ++t) {
      const double p = source.transitions[ctx * vv + static_cast<std::size_t>(seq[static_cast<std::size_t>(t)])];
      lp = p > 0.0 ? lp + std::log(p) : kNegInf;
      ctx = shift_context(ctx, seq[static_cast<std::size_t>(t)], n_ctx, v);
    }
    log_mass[idx] = lp;
  }
  return ExactDist(v, k, std::move(log_mass));
}

Corpus load_text_corpus(const std::string& path, std::size_t max_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.size() > max_len) line.resize(max_len);
    lines.push_back(line);
  }
  if (lines.empty()) throw std::runtime_error("empty corpus: " + path);

  bool seen[256] = {false};
  for (const auto& l : lines)
    for (unsigned char ch : l) seen[ch] = true;
  std::vector<std::string> symbols;
  for (int b = 0; b < 256; ++b)
    if (seen[b]) symbols.push_back(std::string(1, static_cast<char>(b)));

  Corpus c;
  c.vocab = Vocabulary::build(symbols);
  c.sequences.reserve(lines.size());
  for (const auto& l : lines) {
    TokenSeq seq;
    seq.reserve(l.size());
    for (unsigned char ch : l) seq.push_back(c.vocab.id_of(std::string(1, static_cast<char>(ch))));
    c.sequences.push_back(std::move(seq));
  }
  c.splits.assign(c.sequences.size(), Split::train);
  return c;
}

void save_text_corpus(const Corpus& corpus, const std::string& path) {
  for (const auto& s : corpus.vocab.symbols())
    if (s.size() != 1)
      throw std::invalid_argument("text corpus format requires single-byte symbols, got: " + s);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path);
  for (const auto& seq : corpus.sequences) {
    for (std::int32_t t : seq) out << corpus.vocab.symbol(t);
    out << '\n';
  }
}

void save_corpus_json(const Corpus& corpus, const std::string& path) {
  corpus.validate();
  nlohmann::json j;
  j["vocab"] = corpus.vocab.symbols();
  j["sequences"] = corpus.sequences;
  std::vector<std::string> tags;
  tags.reserve(corpus.splits.size());
  for (Split s : corpus.splits) tags.emplace_back(split_name(s));
  j["splits"] = tags;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path);
  out << j.dump() << '\n';
}

Corpus load_corpus_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  nlohmann::json j;
  in >> j;
  Corpus c;
  c.vocab = Vocabulary::build(j.at("vocab").get<std::vector<std::string>>());
  c.sequences = j.at("sequences").get<std::vector<TokenSeq>>();
  for (const auto& tag : j.at("splits").get<std::vector<std::string>>())
    c.splits.push_back(split_from_name(tag));
  c.validate();
  return c;
}

void assign_splits(Corpus& corpus, SplitFractions fractions, std::uint64_t seed) {
  const CounterRng split = CounterRng(seed).derive(stream_tag::split);
  corpus.splits.resize(corpus.sequences.size());
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i)
    corpus.splits[i] = draw_split(split.derive(i), fractions);
}

BatchIter::BatchIter(const Corpus& corpus, std::optional<Split> split, std::size_t max_tokens,
                     std::uint64_t seed)
    : corpus_(&corpus), max_tokens_(max_tokens), seed_(seed) {
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
    if (split && corpus.splits[i] != *split) continue;
    if (corpus.sequences[i].size() > max_tokens)
      throw std::invalid_argument("batch_iter: sequence " + std::to_string(i) + " has " +
                                  std::to_string(corpus.sequences[i].size()) +
                                  " tokens, above the batch budget of " + std::to_string(max_tokens));
    pool_.push_back(i);
  }
  begin_epoch(0);
}

void BatchIter::begin_epoch(std::uint64_t epoch) {
  order_ = pool_;
  CounterRng rng = CounterRng(seed_).derive(stream_tag::batch_order).derive(epoch);
  for (std::size_t i = order_.size(); i > 1; --i)
    std::swap(order_[i - 1], order_[rng.next_below(i)]);
  cursor_ = 0;
}

std::optional<std::vector<std::size_t>> BatchIter::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  std::vector<std::size_t> batch;
  std::size_t tokens = 0;
  while (cursor_ < order_.size()) {
    const std::size_t idx = order_[cursor_];
    const std::size_t len = corpus_->sequences[idx].size();
    if (!batch.empty() && tokens + len > max_tokens_) break;
    batch.push_back(idx);
    tokens += len;
    ++cursor_;
  }
  return batch;
}

}  // namespace earm
