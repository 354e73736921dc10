#include "earm/energy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "earm/numerics.hpp"
#include "earm/parallel.hpp"

namespace earm {

void EarmConfig::validate() const {
  if (!lambda.empty()) {
    double total = 0.0;
    for (double l : lambda) {
      if (l < 0.0 || !std::isfinite(l))
        throw std::invalid_argument("earm config: lambda weights must be finite and nonnegative");
      total += l;
    }
    if (total <= 0.0) throw std::invalid_argument("earm config: lambda weights must not all be zero");
  }
  if (detach_horizon < 1) throw std::invalid_argument("earm config: detach horizon must be at least 1");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0))
    throw std::invalid_argument("earm config: ema decay must lie in [0, 1)");
  if (weight_clip && !(*weight_clip >= 0.0))
    throw std::invalid_argument("earm config: weight clip must be nonnegative");
  if (start_epoch < 0) throw std::invalid_argument("earm config: start epoch must be nonnegative");
}

double EarmConfig::lambda_at(int k) const {
  if (lambda.empty()) return 1.0;
  if (k < 1 || k > static_cast<int>(lambda.size()))
    throw std::invalid_argument("earm config: lambda not defined for step " + std::to_string(k));
  return lambda[static_cast<std::size_t>(k - 1)];
}

EmaState::EmaState(int max_k) {
  if (max_k < 1) throw std::invalid_argument("ema state: need at least one position");
  log_value_.assign(static_cast<std::size_t>(max_k), 0.0);
  init_.assign(static_cast<std::size_t>(max_k), 0);
}

std::size_t EmaState::index(int k) const {
  if (k < 1 || k > max_k())
    throw std::invalid_argument("ema state: position " + std::to_string(k) + " out of range 1.." +
                                std::to_string(max_k()));
  return static_cast<std::size_t>(k - 1);
}

bool EmaState::initialized(int k) const { return init_[index(k)] != 0; }

double EmaState::log_value(int k) const {
  const std::size_t i = index(k);
  if (!init_[i]) throw std::logic_error("ema state: position " + std::to_string(k) + " not initialized");
  return log_value_[i];
}

void EmaState::set_log_value(int k, double log_v) {
  const std::size_t i = index(k);
  log_value_[i] = log_v;
  init_[i] = 1;
}

void EmaState::update(int k, std::span<const double> log_scores, double alpha) {
  if (log_scores.empty()) throw std::invalid_argument("ema update: empty batch");
  const double batch_term = log_mean_exp(log_scores);
  const std::size_t i = index(k);
  if (!init_[i] || alpha == 0.0) {
    log_value_[i] = batch_term;
    init_[i] = 1;
    return;
  }
  log_value_[i] = log_add_exp(std::log(alpha) + log_value_[i], std::log1p(-alpha) + batch_term);
}

void EmaState::restore(std::vector<double> log_values, std::vector<std::uint8_t> init_flags) {
  if (log_values.size() != log_value_.size() || init_flags.size() != init_.size())
    throw std::invalid_argument("ema state: restore size mismatch");
  log_value_ = std::move(log_values);
  init_ = std::move(init_flags);
}

void PhaseGrad::finalize() {
  combined = positive;
  combined -= negative;
}

double PhaseGrad::mean_weight() const {
  if (per_k.empty()) return 0.0;
  double s = 0.0;
  for (const auto& d : per_k) s += d.mean_weight;
  return s / static_cast<double>(per_k.size());
}

double phi(const ArModel& model, std::span<const std::int32_t> context, int token) {
  if (token < 0 || token >= model.vocab_size())
    throw std::invalid_argument("phi: token out of range");
  return -logits_of(model, context)[static_cast<std::size_t>(token)];
}

double context_score(const ArModel& model, std::span<const std::int32_t> context) {
  std::vector<double> row = logits_of(model, context);
  return log_sum_exp(row);
}

double sequence_energy(const ArModel& model, std::span<const std::int32_t> seq, int k) {
  if (k < 1 || k > static_cast<int>(seq.size()))
    throw std::invalid_argument("sequence_energy: k out of range");
  const auto context = seq.subspan(0, static_cast<std::size_t>(k - 1));
  return phi(model, context, seq[static_cast<std::size_t>(k - 1)]) -
         prefix_log_prob(model, seq, k - 1);
}

std::vector<double> batch_context_scores(const ArModel& model, std::span<const TokenSeq> batch,
                                         int k) {
  std::vector<double> scores(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    scores[i] = context_score(model, std::span<const std::int32_t>(batch[i]).subspan(
                                         0, static_cast<std::size_t>(k - 1)));
  return scores;
}

double log_denominator(std::span<const double> scores, int k, const EmaState& ema,
                       const EarmConfig& config) {
  if (config.ema_decay == 0.0 || !ema.initialized(k)) {
    if (scores.empty())
      throw std::invalid_argument("importance weights: no EMA value and an empty batch");
    return log_mean_exp(scores);
  }
  return ema.log_value(k);
}

std::vector<double> importance_weights(std::span<const double> scores, int k, const EmaState& ema,
                                       const EarmConfig& config) {
  const double denom = log_denominator(scores, k, ema, config);
  std::vector<double> w(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double wi = std::exp(scores[i] - denom);
    if (config.weight_clip) wi = std::clamp(wi, 0.0, *config.weight_clip);
    w[i] = wi;
  }
  return w;
}

std::vector<double> importance_weights(const ArModel& model, std::span<const TokenSeq> batch,
                                       int k, const EmaState& ema, const EarmConfig& config) {
  const std::vector<double> scores = batch_context_scores(model, batch, k);
  return importance_weights(scores, k, ema, config);
}

namespace {

// 0-based factor positions receiving gradient in log q~ at step k:
// [max(0, k-1-m), k-1).
std::pair<int, int> detach_range(int k, int horizon) {
  return {std::max(0, k - 1 - horizon), k - 1};
}

// Adds the dlogits coefficients of scale * [grad phi - grad log q~] for one
// sequence at step k. Rows are the trace's logits rows.
void add_step_coefficients(const ForwardTrace& trace, std::span<const std::int32_t> seq, int k,
                           int horizon, double scale, int vocab, double* dlogits,
                           std::vector<double>& probs_buf) {
  const std::size_t v = static_cast<std::size_t>(vocab);
  // phi term: phi = -logit[x_k], so d phi maps to -1 at (row k-1, x_k)
  dlogits[static_cast<std::size_t>(k - 1) * v + static_cast<std::size_t>(seq[static_cast<std::size_t>(k - 1)])] -=
      scale;
  // -log q~ term over the detach window
  const auto [begin, end] = detach_range(k, horizon);
  for (int i = begin; i < end; ++i) {
    std::span<const double> row = trace.logits_row(i);
    probs_buf.assign(row.begin(), row.end());
    softmax_inplace(probs_buf);
    double* drow = dlogits + static_cast<std::size_t>(i) * v;
    for (std::size_t j = 0; j < v; ++j) drow[j] += scale * probs_buf[j];
    drow[static_cast<std::size_t>(seq[static_cast<std::size_t>(i)])] -= scale;
  }
}

}  // namespace

void positive_phase(const ArModel& model, std::span<const TokenSeq> data, int k,
                    const EarmConfig& config, PhaseGrad& sink, double scale, int threads) {
  config.validate();
  if (k < 1) throw std::invalid_argument("positive_phase: k must be at least 1");
  for (const auto& seq : data)
    if (static_cast<int>(seq.size()) < k)
      throw std::invalid_argument("positive_phase: sequence shorter than step k");
  if (data.empty()) return;
  const int v = model.vocab_size();
  const double per_seq = scale / static_cast<double>(data.size());
  parallel_grad_accumulate(
      data.size(), threads, sink.positive,
      [&](int, std::size_t b, std::size_t e, GradVector& out) {
        std::vector<double> dlogits;
        std::vector<double> probs;
        for (std::size_t i = b; i < e; ++i) {
          const auto& seq = data[i];
          auto trace = model.forward_trace(seq, k);
          dlogits.assign(static_cast<std::size_t>(k) * static_cast<std::size_t>(v), 0.0);
          add_step_coefficients(*trace, seq, k, config.detach_horizon, per_seq, v, dlogits.data(),
                                probs);
          model.backward_from_trace(*trace, seq, dlogits.data(), out);
        }
      });
}

void negative_phase(const ArModel& model, std::span<const TokenSeq> generated, int k,
                    const EmaState& ema, const EarmConfig& config, PhaseGrad& sink, double scale,
                    int threads, std::vector<double>* scores_out,
                    std::vector<double>* weights_out) {
  config.validate();
  if (k < 1) throw std::invalid_argument("negative_phase: k must be at least 1");
  for (const auto& seq : generated)
    if (static_cast<int>(seq.size()) < k)
      throw std::invalid_argument("negative_phase: generated sequence shorter than step k");
  if (generated.empty()) return;
  const std::vector<double> scores = batch_context_scores(model, generated, k);
  const std::vector<double> weights = importance_weights(scores, k, ema, config);
  const int v = model.vocab_size();
  const double inv_b = 1.0 / static_cast<double>(generated.size());
  parallel_grad_accumulate(
      generated.size(), threads, sink.negative,
      [&](int, std::size_t b, std::size_t e, GradVector& out) {
        std::vector<double> dlogits;
        std::vector<double> probs;
        for (std::size_t i = b; i < e; ++i) {
          const double coeff = scale * weights[i] * inv_b;
          if (coeff == 0.0) continue;
          const auto& seq = generated[i];
          auto trace = model.forward_trace(seq, k);
          dlogits.assign(static_cast<std::size_t>(k) * static_cast<std::size_t>(v), 0.0);
          add_step_coefficients(*trace, seq, k, config.detach_horizon, coeff, v, dlogits.data(),
                                probs);
          model.backward_from_trace(*trace, seq, dlogits.data(), out);
        }
      });
  if (scores_out) *scores_out = scores;
  if (weights_out) *weights_out = weights;
}

std::vector<TokenSeq> sample_negative_batch(const ArModel& model, std::size_t count, int length,
                                            CounterRng rng) {
  std::vector<TokenSeq> batch;
  batch.reserve(count);
  try {
    for (std::size_t i = 0; i < count; ++i)
      batch.push_back(sample_ancestral(model, length, rng.derive(i)));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string(e.what()) + "; parameter norm " +
                             std::to_string(l2_norm(model.params())));
  }
  return batch;
}

namespace {

PhaseDiag weight_diag(int k, std::span<const double> scores, std::span<const double> weights) {
  PhaseDiag d;
  d.k = k;
  double mw = 0.0, ms = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    mw += weights[i];
    ms += scores[i];
  }
  const double n = static_cast<double>(weights.size());
  d.mean_weight = mw / n;
  d.mean_score = ms / n;
  double var = 0.0;
  for (double w : weights) var += (w - d.mean_weight) * (w - d.mean_weight);
  d.weight_var = var / n;
  return d;
}

}  // namespace

PhaseGrad earm_step_gradient(const ArModel& model, std::span<const TokenSeq> data_batch,
                             EmaState& ema, const EarmConfig& config, CounterRng rng,
                             const StepOptions& options) {
  config.validate();
  if (data_batch.empty()) throw std::invalid_argument("earm step: empty data batch");
  int data_len = 0;
  for (const auto& seq : data_batch) data_len = std::max(data_len, static_cast<int>(seq.size()));
  const int gen_len = config.gen_length > 0 ? config.gen_length : data_len;
  const int kmax = std::min(data_len, gen_len);
  if (kmax < 1) throw std::invalid_argument("earm step: nothing to train on");
  if (ema.max_k() < kmax) throw std::invalid_argument("earm step: EMA state smaller than kmax");

  const std::vector<TokenSeq> negatives =
      sample_negative_batch(model, data_batch.size(), gen_len, rng.derive(stream_tag::negative));

  PhaseGrad pg(model.param_count());
  pg.per_k.reserve(static_cast<std::size_t>(kmax));

  if (options.per_k_norms) {
    for (int k = 1; k <= kmax; ++k) {
      const double lk = config.lambda_at(k);
      std::vector<TokenSeq> data_at_k;
      for (const auto& seq : data_batch)
        if (static_cast<int>(seq.size()) >= k) data_at_k.push_back(seq);

      PhaseGrad step(model.param_count());
      positive_phase(model, data_at_k, k, config, step, lk, options.threads);
      std::vector<double> scores, weights;
      negative_phase(model, negatives, k, ema, config, step, lk, options.threads, &scores,
                     &weights);
      PhaseDiag d = weight_diag(k, scores, weights);
      d.pos_norm = step.positive.l2_norm();
      d.neg_norm = step.negative.l2_norm();
      pg.per_k.push_back(d);
      pg.positive += step.positive;
      pg.negative += step.negative;
      ema.update(k, scores, config.ema_decay);
    }
    pg.finalize();
    return pg;
  }

  // Fused path: coefficients of every step are gathered per sequence, then
  // one backward pass per sequence and phase. EMA cells are per-k, so the
  // weights match the per-k path exactly.
  const int v = model.vocab_size();
  const std::size_t vv = static_cast<std::size_t>(v);
  const std::size_t b = data_batch.size();

  std::vector<std::unique_ptr<ForwardTrace>> pos_traces(b), neg_traces(b);
  std::vector<int> pos_rows(b);
  parallel_chunks(b, options.threads, [&](int, std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      pos_rows[i] = std::min<int>(static_cast<int>(data_batch[i].size()), kmax);
      pos_traces[i] = model.forward_trace(data_batch[i], pos_rows[i]);
      neg_traces[i] = model.forward_trace(negatives[i], kmax);
    }
  });

  std::vector<std::vector<double>> pos_dl(b), neg_dl(b);
  for (std::size_t i = 0; i < b; ++i) {
    pos_dl[i].assign(static_cast<std::size_t>(pos_rows[i]) * vv, 0.0);
    neg_dl[i].assign(static_cast<std::size_t>(kmax) * vv, 0.0);
  }

  std::vector<double> scores(b);
  std::vector<double> probs;
  for (int k = 1; k <= kmax; ++k) {
    const double lk = config.lambda_at(k);
    for (std::size_t i = 0; i < b; ++i)
      scores[i] = log_sum_exp(neg_traces[i]->logits_row(k - 1));
    const std::vector<double> weights = importance_weights(scores, k, ema, config);
    pg.per_k.push_back(weight_diag(k, scores, weights));

    if (lk != 0.0) {
      std::size_t avail = 0;
      for (std::size_t i = 0; i < b; ++i) avail += static_cast<int>(data_batch[i].size()) >= k;
      const double pos_coeff = avail > 0 ? lk / static_cast<double>(avail) : 0.0;
      const double inv_b = 1.0 / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) {
        if (static_cast<int>(data_batch[i].size()) >= k && pos_coeff != 0.0)
          add_step_coefficients(*pos_traces[i], data_batch[i], k, config.detach_horizon, pos_coeff,
                                v, pos_dl[i].data(), probs);
        const double neg_coeff = lk * weights[i] * inv_b;
        if (neg_coeff != 0.0)
          add_step_coefficients(*neg_traces[i], negatives[i], k, config.detach_horizon, neg_coeff,
                                v, neg_dl[i].data(), probs);
      }
    }
    ema.update(k, scores, config.ema_decay);
  }

  parallel_grad_accumulate(b, options.threads, pg.positive,
                           [&](int, std::size_t lo, std::size_t hi, GradVector& out) {
                             for (std::size_t i = lo; i < hi; ++i)
                               model.backward_from_trace(*pos_traces[i], data_batch[i],
                                                         pos_dl[i].data(), out);
                           });
  parallel_grad_accumulate(b, options.threads, pg.negative,
                           [&](int, std::size_t lo, std::size_t hi, GradVector& out) {
                             for (std::size_t i = lo; i < hi; ++i)
                               model.backward_from_trace(*neg_traces[i], negatives[i],
                                                         neg_dl[i].data(), out);
                           });
  pg.finalize();
  return pg;
}

}  // namespace earm
