#include "earm/decode.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "earm/energy.hpp"
#include "earm/numerics.hpp"
#include "json.hpp"

namespace earm {

const char* decode_mode_name(DecodeMode m) {
  switch (m) {
    case DecodeMode::greedy: return "greedy";
    case DecodeMode::beam: return "beam";
    case DecodeMode::ancestral: return "ancestral";
  }
  return "?";
}

DecodeMode decode_mode_from_name(const std::string& s) {
  if (s == "greedy") return DecodeMode::greedy;
  if (s == "beam") return DecodeMode::beam;
  if (s == "ancestral") return DecodeMode::ancestral;
  throw std::invalid_argument("unknown decode mode: " + s);
}

const char* resample_mode_name(ResampleMode m) {
  switch (m) {
    case ResampleMode::off: return "off";
    case ResampleMode::rerank: return "rerank";
    case ResampleMode::softmax_sample: return "softmax_sample";
  }
  return "?";
}

ResampleMode resample_mode_from_name(const std::string& s) {
  if (s == "off") return ResampleMode::off;
  if (s == "rerank") return ResampleMode::rerank;
  if (s == "softmax_sample") return ResampleMode::softmax_sample;
  throw std::invalid_argument("unknown resample mode: " + s);
}

void DecodeConfig::validate() const {
  if (beam_width < 1) throw std::invalid_argument("decode config: beam width must be at least 1");
  if (max_length < 1) throw std::invalid_argument("decode config: max length must be at least 1");
  if (candidates < 1) throw std::invalid_argument("decode config: candidate count must be at least 1");
}

TokenSeq decode_greedy(const ArModel& model, int max_length) {
  if (max_length < 1) throw std::invalid_argument("decode_greedy: max length must be at least 1");
  if (max_length > model.max_seq_length())
    throw std::invalid_argument("decode_greedy: max length exceeds the model's max length");
  TokenSeq seq;
  seq.reserve(static_cast<std::size_t>(max_length));
  auto state = model.initial_state();
  std::vector<double> row(static_cast<std::size_t>(model.vocab_size()));
  for (int pos = 0; pos < max_length; ++pos) {
    model.state_logits(*state, row);
    int best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
      if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    seq.push_back(best);
    if (pos + 1 < max_length) model.advance_state(*state, best);
  }
  return seq;
}

std::vector<Hypothesis> decode_beam(const ArModel& model, int width, int max_length) {
  if (width < 1) throw std::invalid_argument("decode_beam: width must be at least 1");
  if (max_length < 1) throw std::invalid_argument("decode_beam: max length must be at least 1");
  if (max_length > model.max_seq_length())
    throw std::invalid_argument("decode_beam: max length exceeds the model's max length");

  struct Beam {
    TokenSeq seq;
    double log_prob = 0.0;
    std::unique_ptr<DecodeState> state;
  };
  const auto better = [](const Beam& a, const Beam& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.seq < b.seq;  // deterministic tie-break: lexicographically first
  };

  std::vector<Beam> beams;
  beams.push_back({TokenSeq{}, 0.0, model.initial_state()});
  const std::size_t v = static_cast<std::size_t>(model.vocab_size());
  std::vector<double> row(v);

  for (int pos = 0; pos < max_length; ++pos) {
    std::vector<Beam> expanded;
    expanded.reserve(beams.size() * v);
    for (auto& beam : beams) {
      model.state_logits(*beam.state, row);
      const double lse = log_sum_exp(row);
      for (std::size_t j = 0; j < v; ++j) {
        Beam child;
        child.seq = beam.seq;
        child.seq.push_back(static_cast<std::int32_t>(j));
        child.log_prob = beam.log_prob + row[j] - lse;
        expanded.push_back(std::move(child));
      }
    }
    std::sort(expanded.begin(), expanded.end(), better);
    if (static_cast<int>(expanded.size()) > width) expanded.resize(static_cast<std::size_t>(width));
    if (pos + 1 < max_length) {
      for (auto& beam : expanded) {
        beam.state = model.initial_state();
        for (std::int32_t t : beam.seq) model.advance_state(*beam.state, t);
      }
    }
    beams = std::move(expanded);
  }

  std::vector<Hypothesis> out;
  out.reserve(beams.size());
  for (auto& b : beams) out.push_back({std::move(b.seq), b.log_prob});
  return out;
}

TokenSeq energy_resample(const ArModel& model, std::span<const TokenSeq> candidates,
                         ResampleMode mode, CounterRng rng) {
  if (candidates.empty()) throw std::invalid_argument("energy_resample: no candidates");
  if (mode == ResampleMode::off || candidates.size() == 1) return candidates[0];
  std::vector<double> energy(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].empty()) throw std::invalid_argument("energy_resample: empty candidate");
    energy[i] = sequence_energy(model, candidates[i], static_cast<int>(candidates[i].size()));
  }
  if (mode == ResampleMode::rerank) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < energy.size(); ++i)
      if (energy[i] < energy[best]) best = i;
    return candidates[best];
  }
  std::vector<double> probs(energy.size());
  for (std::size_t i = 0; i < energy.size(); ++i) probs[i] = -energy[i];
  softmax_inplace(probs);
  return candidates[static_cast<std::size_t>(rng.sample_categorical(probs))];
}

PerplexityResult perplexity(const ArModel& model, std::span<const TokenSeq> seqs) {
  if (seqs.empty()) throw std::invalid_argument("perplexity: empty split");
  PerplexityResult r;
  double total_nll = 0.0;
  for (const auto& seq : seqs) {
    const double lp = prefix_log_prob(model, seq, static_cast<int>(seq.size()));
    r.token_count += seq.size();
    if (!std::isfinite(lp)) {
      r.zero_prob = true;
      continue;
    }
    total_nll -= lp;
  }
  if (r.token_count == 0) throw std::invalid_argument("perplexity: no tokens");
  if (r.zero_prob) {
    r.mean_nll = std::numeric_limits<double>::infinity();
    r.value = std::numeric_limits<double>::infinity();
    return r;
  }
  r.mean_nll = total_nll / static_cast<double>(r.token_count);
  r.value = std::exp(r.mean_nll);
  return r;
}

double exposure_bias_ratio(const ArModel& a, const ArModel& b, std::span<const TokenSeq> seqs) {
  if (a.vocab_size() != b.vocab_size())
    throw std::invalid_argument("exposure_bias_ratio: vocabulary sizes differ");
  if (seqs.empty()) throw std::invalid_argument("exposure_bias_ratio: empty split");
  const std::size_t v = static_cast<std::size_t>(a.vocab_size());
  std::size_t greater = 0, total = 0;
  std::vector<double> rows_a, rows_b;
  for (const auto& seq : seqs) {
    const int len = static_cast<int>(seq.size());
    if (len == 0) continue;
    rows_a.resize(static_cast<std::size_t>(len) * v);
    rows_b.resize(static_cast<std::size_t>(len) * v);
    a.logits_all(seq, len, rows_a.data());
    b.logits_all(seq, len, rows_b.data());
    for (int t = 0; t < len; ++t) {
      std::span<const double> ra(rows_a.data() + static_cast<std::size_t>(t) * v, v);
      std::span<const double> rb(rows_b.data() + static_cast<std::size_t>(t) * v, v);
      const std::size_t gold = static_cast<std::size_t>(seq[static_cast<std::size_t>(t)]);
      const double la = ra[gold] - log_sum_exp(ra);
      const double lb = rb[gold] - log_sum_exp(rb);
      greater += la > lb;  // strict; ties count as not greater
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("exposure_bias_ratio: no tokens");
  return static_cast<double>(greater) / static_cast<double>(total);
}

std::vector<LengthBucket> bucketed_eval(const ArModel& model, std::span<const TokenSeq> seqs,
                                        std::span<const int> boundaries) {
  for (std::size_t i = 0; i < boundaries.size(); ++i) {
    if (boundaries[i] < 1 || (i > 0 && boundaries[i] <= boundaries[i - 1]))
      throw std::invalid_argument("bucketed_eval: boundaries must be strictly increasing");
  }
  std::vector<LengthBucket> buckets;
  int lo = 0;
  for (int b : boundaries) {
    buckets.push_back({lo, b, 0, 0, std::nullopt});
    lo = b;
  }
  buckets.push_back({lo, std::nullopt, 0, 0, std::nullopt});

  std::vector<double> nll(buckets.size(), 0.0);
  std::vector<bool> flagged(buckets.size(), false);
  for (const auto& seq : seqs) {
    const int len = static_cast<int>(seq.size());
    std::size_t bi = 0;
    while (buckets[bi].hi && len >= *buckets[bi].hi) ++bi;
    buckets[bi].count += 1;
    buckets[bi].tokens += seq.size();
    const double lp = prefix_log_prob(model, seq, len);
    if (!std::isfinite(lp))
      flagged[bi] = true;
    else
      nll[bi] -= lp;
  }
  for (std::size_t bi = 0; bi < buckets.size(); ++bi) {
    if (buckets[bi].count == 0) continue;  // metric stays absent, not zero
    if (flagged[bi] || buckets[bi].tokens == 0)
      buckets[bi].ppl = std::numeric_limits<double>::infinity();
    else
      buckets[bi].ppl = std::exp(nll[bi] / static_cast<double>(buckets[bi].tokens));
  }
  return buckets;
}

std::string EvalReport::to_json_string(int indent) const {
  nlohmann::json j;
  j["perplexity"] = ppl.zero_prob ? nlohmann::json("inf") : nlohmann::json(ppl.value);
  j["mean_nll"] = ppl.zero_prob ? nlohmann::json("inf") : nlohmann::json(ppl.mean_nll);
  j["token_count"] = ppl.token_count;
  j["zero_prob_flag"] = ppl.zero_prob;
  if (exposure_ratio) j["exposure_bias_ratio"] = *exposure_ratio;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : buckets) {
    nlohmann::json e;
    e["lo"] = b.lo;
    if (b.hi)
      e["hi"] = *b.hi;
    else
      e["hi"] = nullptr;
    e["count"] = b.count;
    e["tokens"] = b.tokens;
    if (b.ppl)
      e["ppl"] = std::isfinite(*b.ppl) ? nlohmann::json(*b.ppl) : nlohmann::json("inf");
    else
      e["ppl"] = nullptr;
    arr.push_back(e);
  }
  j["buckets"] = arr;
  return j.dump(indent);
}

}  // namespace earm
