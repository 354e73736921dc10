#include "earm/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "earm/numerics.hpp"
#include "json.hpp"

namespace earm::oracle {

namespace {

std::string seq_string(std::span<const std::int32_t> seq) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) os << ',';
    os << seq[i];
  }
  os << ']';
  return os.str();
}

}  // namespace

std::vector<TokenSeq> enumerate_sequences(int vocab_size, int k) {
  const std::size_t support = ExactDist::checked_support(vocab_size, k);
  std::vector<TokenSeq> out;
  out.reserve(support);
  TokenSeq seq(static_cast<std::size_t>(k), 0);
  for (std::size_t idx = 0; idx < support; ++idx) {
    std::size_t rem = idx;
    for (int pos = k - 1; pos >= 0; --pos) {
      seq[static_cast<std::size_t>(pos)] = static_cast<std::int32_t>(rem % static_cast<std::size_t>(vocab_size));
      rem /= static_cast<std::size_t>(vocab_size);
    }
    out.push_back(seq);
  }
  return out;
}

double exact_partition(const ArModel& model, int k) {
  if (k < 1 || k > model.max_seq_length())
    throw std::invalid_argument("exact_partition: k out of range");
  const std::vector<TokenSeq> prefixes = enumerate_sequences(model.vocab_size(), k - 1);
  std::vector<double> terms;
  terms.reserve(prefixes.size());
  for (const auto& prefix : prefixes)
    terms.push_back(prefix_log_prob(model, prefix, k - 1) + context_score(model, prefix));
  return log_sum_exp(terms);
}

ExactDist exact_model_joint(const ArModel& model, int k) {
  const double log_z = exact_partition(model, k);
  const std::vector<TokenSeq> seqs = enumerate_sequences(model.vocab_size(), k);
  std::vector<double> log_mass;
  log_mass.reserve(seqs.size());
  for (const auto& seq : seqs) {
    const auto ctx = std::span<const std::int32_t>(seq).subspan(0, static_cast<std::size_t>(k - 1));
    // e^{-phi} is e^{logit}, so the joint is q(prefix) * e^{logit[x_k]} / Z
    const double lp = prefix_log_prob(model, seq, k - 1) +
                      logits_of(model, ctx)[static_cast<std::size_t>(seq[static_cast<std::size_t>(k - 1)])] -
                      log_z;
    log_mass.push_back(lp);
  }
  return ExactDist(model.vocab_size(), k, std::move(log_mass));
}

GradVector exact_positive_phase(const ArModel& model, const ExactDist& data, int k) {
  if (data.length() != k || data.vocab_size() != model.vocab_size())
    throw std::invalid_argument("exact_positive_phase: distribution shape mismatch");
  GradVector g(model.param_count());
  const std::vector<TokenSeq> seqs = enumerate_sequences(model.vocab_size(), k);
  std::vector<double> neg_weights(static_cast<std::size_t>(k - 1));
  for (std::size_t idx = 0; idx < seqs.size(); ++idx) {
    const double p = data.mass_at(idx);
    if (p == 0.0) continue;
    const auto& seq = seqs[idx];
    const auto ctx = std::span<const std::int32_t>(seq).subspan(0, static_cast<std::size_t>(k - 1));
    accumulate_weighted_logit_grad(model, ctx, seq[static_cast<std::size_t>(k - 1)], p, g);
    std::fill(neg_weights.begin(), neg_weights.end(), -p);
    accumulate_weighted_logprob_grad(model, seq, 0, k - 1, neg_weights, g);
  }
  return g;
}

GradVector exact_negative_phase_direct(const ArModel& model, int k) {
  const ExactDist joint = exact_model_joint(model, k);
  return exact_positive_phase(model, joint, k);
}

GradVector exact_negative_phase_reweighted(const ArModel& model, int k) {
  const double log_z = exact_partition(model, k);
  GradVector g(model.param_count());

  // E_{q(x_k, x_{<k})}[ w(x_{<k}) grad phi ]
  const std::vector<TokenSeq> seqs = enumerate_sequences(model.vocab_size(), k);
  for (const auto& seq : seqs) {
    const auto ctx = std::span<const std::int32_t>(seq).subspan(0, static_cast<std::size_t>(k - 1));
    const double log_q_joint = prefix_log_prob(model, seq, k);
    const double w = std::exp(context_score(model, ctx) - log_z);
    const double coeff = std::exp(log_q_joint) * w;
    if (coeff == 0.0) continue;
    accumulate_weighted_logit_grad(model, ctx, seq[static_cast<std::size_t>(k - 1)], coeff, g);
  }

  // - E_{q(x_{<k})}[ w(x_{<k}) grad log q(x_{<k}) ]
  const std::vector<TokenSeq> prefixes = enumerate_sequences(model.vocab_size(), k - 1);
  std::vector<double> neg_weights(static_cast<std::size_t>(k - 1));
  for (const auto& prefix : prefixes) {
    const double log_q = prefix_log_prob(model, prefix, k - 1);
    const double w = std::exp(context_score(model, prefix) - log_z);
    const double coeff = std::exp(log_q) * w;
    if (coeff == 0.0) continue;
    std::fill(neg_weights.begin(), neg_weights.end(), -coeff);
    accumulate_weighted_logprob_grad(model, prefix, 0, k - 1, neg_weights, g);
  }
  return g;
}

MuWeights exact_mu_weights(const ArModel& model, int k) {
  const ExactDist joint = exact_model_joint(model, k);
  const std::vector<TokenSeq> prefixes = enumerate_sequences(model.vocab_size(), k - 1);
  const int v = model.vocab_size();

  MuWeights out;
  out.mu.assign(prefixes.size(), 0.0);
  std::vector<double> log_marginal(prefixes.size(), kNegInf);
  std::vector<double> log_q(prefixes.size(), kNegInf);

  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    // marginalize the joint over the last token
    std::vector<double> terms(static_cast<std::size_t>(v));
    TokenSeq seq = prefixes[i];
    seq.push_back(0);
    for (int j = 0; j < v; ++j) {
      seq.back() = j;
      terms[static_cast<std::size_t>(j)] = joint.log_mass(seq);
    }
    log_marginal[i] = log_sum_exp(terms);
    log_q[i] = prefix_log_prob(model, prefixes[i], k - 1);
    if (log_q[i] == kNegInf) {
      out.excluded.push_back(i);
      continue;
    }
    out.mu[i] = std::exp(log_marginal[i] - log_q[i]);
  }

  // E_q[mu] accumulated in log domain over the included prefixes
  std::vector<double> terms;
  terms.reserve(prefixes.size());
  for (std::size_t i = 0; i < prefixes.size(); ++i)
    if (log_q[i] != kNegInf) terms.push_back(log_marginal[i]);
  const double mean_mu = std::exp(log_sum_exp(terms));

  out.w.assign(prefixes.size(), 0.0);
  for (std::size_t i = 0; i < prefixes.size(); ++i)
    if (log_q[i] != kNegInf) out.w[i] = out.mu[i] / mean_mu;
  return out;
}

double exact_kl(const ExactDist& p, const ExactDist& q) {
  if (p.vocab_size() != q.vocab_size() || p.length() != q.length())
    throw std::invalid_argument("exact_kl: distributions live on different spaces");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.support_size(); ++i) {
    const double lp = p.log_mass_at(i);
    if (lp == kNegInf) continue;
    const double lq = q.log_mass_at(i);
    if (lq == kNegInf)
      throw std::invalid_argument("exact_kl: q has zero mass where p is positive at sequence " +
                                  seq_string(p.sequence_at(i)));
    kl += std::exp(lp) * (lp - lq);
  }
  return kl;
}

double summed_kl(const ArModel& model, const SyntheticSource& source, const EarmConfig& config,
                 int kmax) {
  double total = 0.0;
  for (int k = 1; k <= kmax; ++k)
    total += config.lambda_at(k) * exact_kl(exact_data_dist(source, k), exact_model_joint(model, k));
  return total;
}

GradVector exact_objective_gradient(const ArModel& model, const SyntheticSource& source,
                                    const EarmConfig& config, int kmax) {
  GradVector g(model.param_count());
  for (int k = 1; k <= kmax; ++k) {
    const double lk = config.lambda_at(k);
    if (lk == 0.0) continue;
    g.axpy(lk, exact_positive_phase(model, exact_data_dist(source, k), k));
    g.axpy(-lk, exact_negative_phase_direct(model, k));
  }
  return g;
}

std::string OracleReport::to_json_string(int indent) const {
  nlohmann::json j;
  j["quantity"] = quantity;
  j["tolerance"] = tolerance;
  j["sample_sizes"] = sample_sizes;
  j["deviations"] = deviations;
  j["monotone"] = monotone;
  j["pass"] = pass;
  return j.dump(indent);
}

OracleReport mc_convergence_report(const ArModel& model, int k, McEstimator which,
                                   std::vector<std::size_t> sample_sizes, CounterRng rng,
                                   int reps, double tolerance) {
  if (sample_sizes.empty()) throw std::invalid_argument("mc_convergence_report: no sample sizes");
  OracleReport report;
  report.tolerance = tolerance;
  report.sample_sizes = sample_sizes;

  EarmConfig cfg;
  cfg.weight_clip.reset();
  cfg.detach_horizon = std::max(1, k);  // horizon covers every prefix position: undetached
  cfg.ema_decay = 0.5;                  // any nonzero decay; the cell below is primed and never updated

  if (which == McEstimator::neg_phase) {
    report.quantity = "negative_phase_mc";
    const GradVector exact = exact_negative_phase_direct(model, k);
    const double exact_norm = std::max(exact.l2_norm(), 1e-300);
    EmaState ema(k);
    ema.set_log_value(k, exact_partition(model, k));
    for (std::size_t s = 0; s < sample_sizes.size(); ++s) {
      std::vector<double> devs;
      for (int r = 0; r < reps; ++r) {
        CounterRng stream = rng.derive(s).derive(static_cast<std::uint64_t>(r));
        std::vector<TokenSeq> batch;
        batch.reserve(sample_sizes[s]);
        for (std::size_t i = 0; i < sample_sizes[s]; ++i)
          batch.push_back(sample_ancestral(model, k, stream.derive(i)));
        PhaseGrad pg(model.param_count());
        negative_phase(model, batch, k, ema, cfg, pg);
        pg.negative -= exact;
        devs.push_back(pg.negative.l2_norm() / exact_norm);
      }
      std::sort(devs.begin(), devs.end());
      report.deviations.push_back(devs[devs.size() / 2]);
    }
  } else {
    report.quantity = "weight_mean_mc";
    cfg.ema_decay = 0.0;  // self-normalized weights
    EmaState ema(std::max(1, k));
    for (std::size_t s = 0; s < sample_sizes.size(); ++s) {
      std::vector<double> devs;
      for (int r = 0; r < reps; ++r) {
        CounterRng stream = rng.derive(s).derive(static_cast<std::uint64_t>(r));
        std::vector<TokenSeq> batch;
        batch.reserve(sample_sizes[s]);
        for (std::size_t i = 0; i < sample_sizes[s]; ++i) {
          if (k > 1)
            batch.push_back(sample_ancestral(model, k - 1, stream.derive(i)));
          else
            batch.emplace_back();
        }
        const std::vector<double> w = importance_weights(model, batch, k, ema, cfg);
        double mean = 0.0;
        for (double x : w) mean += x;
        mean /= static_cast<double>(w.size());
        devs.push_back(std::abs(mean - 1.0));
      }
      std::sort(devs.begin(), devs.end());
      report.deviations.push_back(devs[devs.size() / 2]);
    }
  }

  // medians must not grow, except below the noise floor where ordering is
  // dominated by rounding
  const double floor = 0.5 * tolerance;
  report.monotone = true;
  for (std::size_t s = 1; s < report.deviations.size(); ++s)
    report.monotone =
        report.monotone && report.deviations[s] <= std::max(report.deviations[s - 1], floor);
  report.pass = report.monotone && report.deviations.back() <= tolerance;
  return report;
}

}  // namespace earm::oracle
