#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "earm/corpus.hpp"
#include "earm/energy.hpp"
#include "earm/grad.hpp"
#include "earm/model.hpp"

namespace earm {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ScheduledSamplingConfig {
  enum class Kind { off, linear } kind = Kind::off;
  double p_start = 0.0;
  double p_end = 0.25;
  /// Replacement probability at `epoch` of a run with `epochs` total.
  double p_at(int epoch, int epochs) const;
};

struct TrainConfig {
  int epochs = 40;
  double learning_rate = 5e-4;
  OptimizerConfig optimizer;
  double label_smoothing = 0.0;
  ScheduledSamplingConfig scheduled_sampling;
  EarmConfig earm;
  /// When set, epochs past the start epoch descend the energy objective
  /// alone instead of adding it to the cross-entropy gradient.
  bool earm_only_after_start = false;
  std::size_t max_tokens = 4096;
  int patience = 20;
  std::uint64_t seed = 0;
  int threads = 1;
  /// Emit one diagnostics CSV row per (step, k); forces per-step phase
  /// sinks, which is slower.
  bool emit_step_diagnostics = false;

  void validate() const;
  std::string to_json_string(int indent = -1) const;
  static TrainConfig from_json_string(const std::string& text);
};

struct EpochRecord {
  int epoch = 0;
  double train_ce = 0.0;
  double valid_ce = 0.0;
  double valid_ppl = 0.0;
  bool earm_active = false;
  double mean_w = 0.0;
  double pos_norm = 0.0;
  double neg_norm = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  /// Negative batches generated over the run; stays zero while the energy
  /// objective is gated off.
  std::size_t negative_batches = 0;
  int best_epoch = -1;
  double best_valid_ce = std::numeric_limits<double>::infinity();

  /// Fixed header epoch,train_ce,valid_ce,valid_ppl,earm_active,mean_w,
  /// pos_norm,neg_norm,seconds. The seconds column is wall time and is the
  /// one column that is not reproducible across runs; pass false to drop it
  /// when comparing logs.
  std::string to_csv(bool include_seconds = true) const;
};

/// Everything beyond the parameters needed to continue a run bit-exactly.
struct TrainCheckpointData {
  int next_epoch = 0;
  std::int64_t adam_t = 0;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  std::vector<double> ema_log;
  std::vector<std::uint8_t> ema_init;
  double best_valid_ce = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int epochs_since_best = 0;
  std::vector<double> best_params;
  double initial_valid_ce = std::numeric_limits<double>::quiet_NaN();
};

struct StepDiagRow {
  std::size_t step;
  PhaseDiag diag;
};

struct TrainHooks {
  /// Called after every epoch with the record and the resumable state
  /// (model currently holds the *last* parameters, not the best).
  std::function<void(const EpochRecord&, const TrainCheckpointData&, const ArModel&)> on_epoch;
  /// Receives one row per (step, k) when emit_step_diagnostics is set.
  std::function<void(const StepDiagRow&)> on_step_diag;
};

struct CeResult {
  double loss = 0.0;
  GradVector grad;
};

/// Label-smoothed token-mean cross entropy and its parameter gradient.
/// Contexts come from `inputs`, targets from `targets` (same shapes);
/// the single-span overload uses the batch for both.
CeResult ce_step(const ArModel& model, std::span<const TokenSeq> inputs,
                 std::span<const TokenSeq> targets, double smoothing, int threads = 1);
CeResult ce_step(const ArModel& model, std::span<const TokenSeq> batch, double smoothing,
                 int threads = 1);

/// Two-pass scheduled sampling: first pass takes greedy predictions on the
/// gold prefixes, the second independently replaces each input position
/// after the first with its first-pass prediction with probability
/// p_replace. Targets stay gold.
std::vector<TokenSeq> scheduled_sampling_batch(const ArModel& model,
                                               std::span<const TokenSeq> batch, double p_replace,
                                               CounterRng rng);

/// Token-mean negative log likelihood.
double mean_nll(const ArModel& model, std::span<const TokenSeq> seqs, int threads = 1);

/// Raised when validation CE exceeds 10x its initial value; carries the log
/// up to the failing epoch.
class TrainDivergenceError : public std::runtime_error {
public:
  TrainDivergenceError(const std::string& what, TrainLog log)
      : std::runtime_error(what), log(std::move(log)) {}
  TrainLog log;
};

/// Full training loop: cross-entropy warm-up, energy objective added from
/// earm.start_epoch on, early stopping on validation CE. The model is left
/// at the best-validation parameters. Deterministic in (config, corpus,
/// seed) for a fixed thread count. When `state` is supplied with
/// next_epoch > 0 the run resumes from it; the struct is kept in sync
/// either way.
TrainLog train(ArModel& model, const Corpus& corpus, const TrainConfig& config,
               TrainHooks* hooks = nullptr, TrainCheckpointData* state = nullptr);

}  // namespace earm
