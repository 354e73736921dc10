#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "earm/corpus.hpp"
#include "earm/dist.hpp"
#include "earm/energy.hpp"
#include "earm/grad.hpp"
#include "earm/model.hpp"

namespace earm::oracle {

/// All V^k sequences in lexicographic order (enumeration-guarded).
std::vector<TokenSeq> enumerate_sequences(int vocab_size, int k);

/// log Z at step k: log E_{q(x_{<k})}[ sum_x e^{-phi(x, x_{<k})} ], summed
/// exhaustively over every length-(k-1) prefix in log domain.
double exact_partition(const ArModel& model, int k);

/// Joint model law p(x_k, x_{<k}) = q(x_{<k}) e^{-phi} / Z as an exact
/// table over length-k sequences.
ExactDist exact_model_joint(const ArModel& model, int k);

/// E over `data` (a law on length-k sequences) of
/// grad[phi(x_k, x_{<k}) - log q(x_{<k})], undetached.
GradVector exact_positive_phase(const ArModel& model, const ExactDist& data, int k);

/// E over the model joint of grad[phi - log q], evaluated directly from the
/// enumerated p(x_k, x_{<k}).
GradVector exact_negative_phase_direct(const ArModel& model, int k);

/// The same expectation rewritten over q with importance weights
/// w = e^{score - log Z}: E_q(x_k,x_{<k})[w grad phi] - E_q(x_{<k})[w grad log q].
/// Must match the direct form to 1e-10 per parameter.
GradVector exact_negative_phase_reweighted(const ArModel& model, int k);

struct MuWeights {
  std::vector<double> mu;               // p(x_{<k}) / q(x_{<k}) per prefix, lexicographic
  std::vector<double> w;                // mu / E_q[mu]
  std::vector<std::size_t> excluded;    // prefixes with q = 0, left out and reported
};

/// Prefix density ratios from enumerated marginals; w must equal the
/// score-ratio weights with the exact denominator.
MuWeights exact_mu_weights(const ArModel& model, int k);

/// sum_x p(x) log(p(x)/q(x)); throws (naming the sequence) when q is zero
/// somewhere p is positive.
double exact_kl(const ExactDist& p, const ExactDist& q);

/// sum_k lambda_k KL(P_data,k || P_model,k) for k = 1..kmax.
double summed_kl(const ArModel& model, const SyntheticSource& source, const EarmConfig& config,
                 int kmax);

/// Exact-expectation objective gradient sum_k lambda_k (positive_k -
/// negative_k) with plain (undetached) log q; descending it with a small
/// step strictly decreases summed_kl away from stationary points.
GradVector exact_objective_gradient(const ArModel& model, const SyntheticSource& source,
                                    const EarmConfig& config, int kmax);

enum class McEstimator { neg_phase, weight_mean };

struct OracleReport {
  std::string quantity;
  double tolerance = 0.0;
  std::vector<std::size_t> sample_sizes;
  std::vector<double> deviations;  // median relative deviation per size
  bool monotone = false;           // medians non-increasing in the sample size
  bool pass = false;
  std::string to_json_string(int indent = -1) const;
};

/// Runs the sampled estimators of the energy module against the exact
/// values at each sample size (median over `reps` repetitions).
/// neg_phase uses the exact denominator, no clipping, and an undetached
/// horizon; deviation is relative L2 against the enumerated gradient.
/// weight_mean measures |mean w - 1| under self-normalization.
OracleReport mc_convergence_report(const ArModel& model, int k, McEstimator which,
                                   std::vector<std::size_t> sample_sizes, CounterRng rng,
                                   int reps = 10, double tolerance = 0.05);

}  // namespace earm::oracle
