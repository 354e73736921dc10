#pragma once

#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "earm/grad.hpp"
#include "earm/model.hpp"
#include "earm/rng.hpp"
#include "earm/vocab.hpp"

namespace earm {

/// Knobs of the energy-based training objective.
struct EarmConfig {
  /// Per-time-step objective weights (1-based step k maps to lambda[k-1]);
  /// empty means all ones.
  std::vector<double> lambda;
  /// Number of most recent prefix positions whose conditionals receive
  /// gradient in the balanced objective; earlier factors are treated as
  /// fixed copies.
  int detach_horizon = 2;
  /// Decay of the per-position moving-average normalizer estimate. Zero
  /// means "use the current batch mean", i.e. self-normalized weights.
  double ema_decay = 0.99;
  /// Importance weights are clamped to [0, weight_clip] when set. Disable
  /// for identity checks.
  std::optional<double> weight_clip = 10.0;
  /// First epoch at which the energy objective is added to training.
  int start_epoch = 15;
  /// Length of generated negative sequences; values <= 0 mean "match the
  /// data length".
  int gen_length = 0;

  void validate() const;
  double lambda_at(int k) const;  // 1-based
};

/// Per-position log-domain running estimate of E_Q[sum_x e^{-phi}], one
/// cell per time step k because the prefix distribution (and hence the
/// normalizer) depends on k. Uninitialized cells take the first batch term
/// verbatim.
class EmaState {
public:
  explicit EmaState(int max_k);

  int max_k() const { return static_cast<int>(log_value_.size()); }
  bool initialized(int k) const;
  double log_value(int k) const;

  /// Prime a cell directly (used when an exact normalizer is available).
  void set_log_value(int k, double log_v);

  /// log_ema <- log(alpha * e^{log_ema} + (1-alpha) * mean_i e^{scores_i}),
  /// computed in log domain. First call (or alpha = 0) adopts the batch
  /// term directly.
  void update(int k, std::span<const double> log_scores, double alpha);

  std::span<const double> raw_log_values() const { return log_value_; }
  std::span<const std::uint8_t> raw_init_flags() const { return init_; }
  void restore(std::vector<double> log_values, std::vector<std::uint8_t> init_flags);

private:
  std::size_t index(int k) const;
  std::vector<double> log_value_;
  std::vector<std::uint8_t> init_;
};

/// Per-step diagnostics gathered while assembling a phase gradient.
struct PhaseDiag {
  int k = 0;
  double mean_weight = 0.0;
  double weight_var = 0.0;
  double mean_score = 0.0;
  double pos_norm = std::numeric_limits<double>::quiet_NaN();
  double neg_norm = std::numeric_limits<double>::quiet_NaN();
};

/// The two phases of one update and their difference.
struct PhaseGrad {
  GradVector positive;
  GradVector negative;
  GradVector combined;
  std::vector<PhaseDiag> per_k;

  explicit PhaseGrad(std::size_t n) : positive(n), negative(n), combined(n) {}
  /// combined = positive - negative.
  void finalize();
  double mean_weight() const;
};

/// Energy of token under context: the negated output logit.
double phi(const ArModel& model, std::span<const std::int32_t> context, int token);

/// log sum_x e^{-phi(x, context)} = log-sum-exp of the logits row; this is
/// also the softmax log-normalizer of the same row.
double context_score(const ArModel& model, std::span<const std::int32_t> context);

/// phi(x_k, x_{<k}) - log q(x_{<k}) for 1-based k; at k = length this
/// scores the whole sequence (the quantity used by energy reranking).
double sequence_energy(const ArModel& model, std::span<const std::int32_t> seq, int k);

/// Scores of the length-(k-1) prefixes of a batch.
std::vector<double> batch_context_scores(const ArModel& model, std::span<const TokenSeq> batch,
                                         int k);

/// The log denominator the weights will divide by: the pre-update EMA cell
/// when available, otherwise (first batch, or ema_decay = 0) the current
/// batch mean.
double log_denominator(std::span<const double> scores, int k, const EmaState& ema,
                       const EarmConfig& config);

/// w_i = exp(score_i - log denominator), clamped to [0, weight_clip].
std::vector<double> importance_weights(std::span<const double> scores, int k, const EmaState& ema,
                                       const EarmConfig& config);
std::vector<double> importance_weights(const ArModel& model, std::span<const TokenSeq> batch,
                                       int k, const EmaState& ema, const EarmConfig& config);

/// sink.positive += scale * mean_i [ grad phi(x_k, x_{<k}) - grad log q~(x_{<k}) ]
/// over the data sequences with length >= k; gradient flows only through
/// the conditionals at the last detach_horizon prefix positions.
void positive_phase(const ArModel& model, std::span<const TokenSeq> data, int k,
                    const EarmConfig& config, PhaseGrad& sink, double scale = 1.0,
                    int threads = 1);

/// sink.negative += scale * mean_i w_i [ grad phi - grad log q~ ] over a
/// batch generated by the model itself. Weights use the pre-update EMA (the
/// caller updates the EMA afterwards with the scores this returns via
/// scores_out).
void negative_phase(const ArModel& model, std::span<const TokenSeq> generated, int k,
                    const EmaState& ema, const EarmConfig& config, PhaseGrad& sink,
                    double scale = 1.0, int threads = 1, std::vector<double>* scores_out = nullptr,
                    std::vector<double>* weights_out = nullptr);

/// Ancestral negative batch; rethrows generation failures with the model's
/// parameter norm attached.
std::vector<TokenSeq> sample_negative_batch(const ArModel& model, std::size_t count, int length,
                                            CounterRng rng);

struct StepOptions {
  /// Assemble each step's phases into their own sinks so per-k gradient
  /// norms can be reported. Costs one extra backward pass per (sequence,
  /// step); the default fuses all steps into one backward per sequence.
  bool per_k_norms = false;
  int threads = 1;
};

/// One combined update: draws a shared negative batch (same size as the
/// data batch), then for k = 1..min(K, gen length) accumulates
/// lambda_k * (positive_k - negative_k), updating the EMA cell of each k
/// after its weights are computed. Returns the phases with diagnostics.
PhaseGrad earm_step_gradient(const ArModel& model, std::span<const TokenSeq> data_batch,
                             EmaState& ema, const EarmConfig& config, CounterRng rng,
                             const StepOptions& options = {});

}  // namespace earm
