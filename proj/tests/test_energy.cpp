#include <cmath>

#include "doctest.h"
#include "earm/corpus.hpp"
#include "earm/energy.hpp"
#include "earm/numerics.hpp"
#include "earm/oracle.hpp"
#include "test_util.hpp"

using namespace earm;
using testutil::random_tabular;

namespace {

EarmConfig identity_config(int k) {
  EarmConfig cfg;
  cfg.weight_clip.reset();
  cfg.detach_horizon = std::max(1, k);  // covers every prefix position
  cfg.ema_decay = 0.5;
  return cfg;
}

}  // namespace

TEST_CASE("phi: negated logit component") {
  TabularModel m(2, 3, 1);
  const std::size_t row = m.row_index(TokenSeq{});
  m.entry(row, 0) = 0.5;
  m.entry(row, 1) = -1.0;
  CHECK(phi(m, TokenSeq{}, 1) == 1.0);
  CHECK(phi(m, TokenSeq{}, 0) == -0.5);

  const TabularModel zero(3, 3);
  CHECK(phi(zero, TokenSeq{1}, 2) == 0.0);

  // uniform logit shift by C moves phi by exactly -C
  TabularModel shifted = m;
  for (double& p : shifted.params()) p += 3.25;
  for (int t = 0; t < 2; ++t)
    CHECK(phi(shifted, TokenSeq{}, t) - phi(m, TokenSeq{}, t) == doctest::Approx(-3.25).epsilon(1e-12));
}

TEST_CASE("context_score: log-sum-exp of the logits row") {
  const TabularModel zero(4, 3);
  CHECK(context_score(zero, TokenSeq{}) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  TabularModel big(2, 3, 1);
  big.entry(big.row_index(TokenSeq{}), 0) = 1000.0;
  const double s = context_score(big, TokenSeq{});
  CHECK(std::isfinite(s));
  CHECK(s == doctest::Approx(1000.0).epsilon(1e-12));

  // against direct summation for moderate logits
  CounterRng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    TabularModel m(5, 2, 1);
    auto params = m.params();
    for (double& p : params) p = rng.next_in(-20.0, 20.0);
    double direct = 0.0;
    const auto row = logits_of(m, TokenSeq{});
    for (double z : row) direct += std::exp(z);
    CHECK(context_score(m, TokenSeq{}) == doctest::Approx(std::log(direct)).epsilon(1e-12));
  }
}

TEST_CASE("sequence_energy") {
  const TabularModel uniform(4, 4);
  const TokenSeq seq = {1, 2, 3};
  CHECK(sequence_energy(uniform, seq, 3) == doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-12));
  CHECK(sequence_energy(uniform, seq, 1) == doctest::Approx(phi(uniform, TokenSeq{}, 1)));

  // Eq.-4 identity: exp(-E - log Z) recovers the joint mass
  const TabularModel m = random_tabular(3, 3, 2, 55);
  const int k = 3;
  const double log_z = oracle::exact_partition(m, k);
  const ExactDist joint = oracle::exact_model_joint(m, k);
  for (const auto& s : oracle::enumerate_sequences(3, k)) {
    const double via_energy = std::exp(-sequence_energy(m, s, k) - log_z);
    CHECK(via_energy == doctest::Approx(joint.mass(s)).epsilon(1e-10));
  }
}

TEST_CASE("importance_weights") {
  EarmConfig cfg = identity_config(2);

  // homogeneous scores with a matching EMA give w = 1
  EmaState ema(2);
  ema.set_log_value(2, 1.7);
  const std::vector<double> scores(6, 1.7);
  for (double w : importance_weights(scores, 2, ema, cfg)) CHECK(w == doctest::Approx(1.0).epsilon(1e-15));

  // alpha = 0 self-normalizes every batch
  cfg.ema_decay = 0.0;
  CounterRng rng(8);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> sc(32);
    for (double& s : sc) s = rng.next_in(-4.0, 4.0);
    EmaState fresh(2);
    const auto w = importance_weights(sc, 2, fresh, cfg);
    double mean = 0.0;
    for (double x : w) mean += x;
    mean /= static_cast<double>(w.size());
    CHECK(std::abs(mean - 1.0) <= 1e-12);
  }

  // clipping
  EarmConfig clip = identity_config(1);
  clip.weight_clip = 1.5;
  EmaState e1(1);
  e1.set_log_value(1, 0.0);
  const auto w = importance_weights(std::vector<double>{2.0, -1.0}, 1, e1, clip);
  CHECK(w[0] == 1.5);
  CHECK(w[1] == doctest::Approx(std::exp(-1.0)));
}

TEST_CASE("importance weights with an exact denominator match the density-ratio form") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const TabularModel m = random_tabular(2, 3, 2, seed);
    const int k = 2;
    const auto mu = oracle::exact_mu_weights(m, k);

    EarmConfig cfg = identity_config(k);
    EmaState ema(k);
    ema.set_log_value(k, oracle::exact_partition(m, k));
    const auto prefixes = oracle::enumerate_sequences(2, k - 1);
    const auto w13 = importance_weights(m, prefixes, k, ema, cfg);
    for (std::size_t i = 0; i < prefixes.size(); ++i)
      CHECK(w13[i] == doctest::Approx(mu.w[i]).epsilon(1e-10));
  }
}

TEST_CASE("ema_update") {
  // alpha = 0 adopts the batch mean
  EmaState ema(3);
  const std::vector<double> batch = {0.0, std::log(3.0)};
  ema.update(2, batch, 0.0);
  CHECK(std::exp(ema.log_value(2)) == doctest::Approx(2.0).epsilon(1e-12));

  // constant batches are a fixed point at any decay
  EmaState fix(1);
  const std::vector<double> c = {1.25, 1.25};
  for (int i = 0; i < 50; ++i) fix.update(1, c, 0.9);
  CHECK(fix.log_value(1) == doctest::Approx(1.25).epsilon(1e-12));

  // first call initializes verbatim even with decay
  EmaState first(1);
  first.update(1, c, 0.99);
  CHECK(first.log_value(1) == doctest::Approx(1.25).epsilon(1e-12));
}

TEST_CASE("ema converges to the exact normalizer on a stationary model") {
  const TabularModel m = random_tabular(3, 3, 2, 77);
  const int k = 3;
  const double exact = std::exp(oracle::exact_partition(m, k));
  EmaState ema(k);
  CounterRng rng(1234);
  for (int step = 0; step < 5000; ++step) {
    std::vector<TokenSeq> batch;
    batch.reserve(64);
    CounterRng stream = rng.derive(static_cast<std::uint64_t>(step));
    for (int i = 0; i < 64; ++i)
      batch.push_back(sample_ancestral(m, k - 1, stream.derive(static_cast<std::uint64_t>(i))));
    ema.update(k, batch_context_scores(m, batch, k), 0.99);
  }
  CHECK(std::abs(std::exp(ema.log_value(k)) - exact) / exact <= 0.01);
}

TEST_CASE("positive_phase: k = 1 reduces to the phi term") {
  const TabularModel m = random_tabular(3, 3, 2, 5);
  const std::vector<TokenSeq> data = {{0, 1, 2}, {2, 2, 0}, {1, 0, 1}};
  EarmConfig cfg = identity_config(1);
  PhaseGrad pg(m.param_count());
  positive_phase(m, data, 1, cfg, pg);

  GradVector manual(m.param_count());
  for (const auto& seq : data)
    accumulate_weighted_logit_grad(m, TokenSeq{}, seq[0], 1.0 / 3.0, manual);
  pg.positive -= manual;
  CHECK(pg.positive.max_abs() <= 1e-14);
}

TEST_CASE("positive_phase: a horizon covering the prefix equals the undetached gradient") {
  const TabularModel m = random_tabular(3, 4, 3, 6);
  const std::vector<TokenSeq> data = {{0, 1, 2}, {2, 0, 1}};
  const int k = 3;
  EarmConfig wide = identity_config(k);  // horizon >= k-1
  PhaseGrad pg(m.param_count());
  positive_phase(m, data, k, wide, pg);

  GradVector manual(m.param_count());
  for (const auto& seq : data) {
    const auto ctx = std::span<const std::int32_t>(seq).subspan(0, k - 1);
    accumulate_weighted_logit_grad(m, ctx, seq[k - 1], 0.5, manual);
    accumulate_weighted_logprob_grad(m, seq, 0, k - 1, std::vector<double>{-0.5, -0.5}, manual);
  }
  pg.positive -= manual;
  CHECK(pg.positive.max_abs() <= 1e-14);
}

TEST_CASE("positive_phase detachment: early rows receive no gradient") {
  const TabularModel m = random_tabular(2, 5, 4, 8);
  const std::vector<TokenSeq> data = {{0, 1, 1, 0}, {1, 0, 0, 1}};
  const int k = 4;
  EarmConfig cfg = identity_config(k);
  cfg.detach_horizon = 1;  // only position k-1 in the window
  PhaseGrad pg(m.param_count());
  positive_phase(m, data, k, cfg, pg);
  // rows of context length < k-1-m = 2 must be untouched
  for (const auto& seq : data) {
    for (int c = 0; c < 2; ++c) {
      const std::size_t row =
          m.row_index(std::span<const std::int32_t>(seq).subspan(0, static_cast<std::size_t>(c)));
      for (int j = 0; j < 2; ++j) CHECK(pg.positive[m.param_index(row, j)] == 0.0);
    }
  }
}

TEST_CASE("positive_phase matches the enumeration oracle within MC error") {
  const std::uint64_t seed = 2024;
  const TabularModel m = random_tabular(3, 3, 2, seed);
  const auto source = SyntheticSource::random_markov(3, 3, 1, 1.0, 31);
  const int k = 3;
  const GradVector exact = oracle::exact_positive_phase(m, exact_data_dist(source, k), k);

  const std::size_t n = 20000;
  const Corpus corpus = generate_corpus(source, n, Vocabulary::numeric(3), {1.0, 0.0, 0.0});
  EarmConfig cfg = identity_config(k);

  GradVector sum(m.param_count()), sumsq(m.param_count());
  for (const auto& seq : corpus.sequences) {
    PhaseGrad one(m.param_count());
    positive_phase(m, std::span<const TokenSeq>(&seq, 1), k, cfg, one);
    for (std::size_t p = 0; p < sum.size(); ++p) {
      sum[p] += one.positive[p];
      sumsq[p] += one.positive[p] * one.positive[p];
    }
  }
  const double dn = static_cast<double>(n);
  for (std::size_t p = 0; p < sum.size(); ++p) {
    const double mean = sum[p] / dn;
    const double var = std::max(0.0, sumsq[p] / dn - mean * mean);
    const double se = std::sqrt(var / dn);
    CHECK(std::abs(mean - exact[p]) <= 3.0 * se + 1e-9);
  }
}

TEST_CASE("negative_phase: zero weight clip leaves the sink unchanged") {
  const TabularModel m = random_tabular(3, 3, 2, 10);
  EarmConfig cfg = identity_config(2);
  cfg.weight_clip = 0.0;
  EmaState ema(2);
  const std::vector<TokenSeq> gen = {{0, 1}, {2, 0}};
  PhaseGrad pg(m.param_count());
  negative_phase(m, gen, 2, ema, cfg, pg);
  CHECK(pg.negative.l2_norm() == 0.0);
}

TEST_CASE("negative_phase: context-independent scores collapse to an unweighted mean") {
  // every row identical, so sum_x e^{-phi} is the same for all contexts
  TabularModel m(3, 3, 2);
  for (std::size_t r = 0; r < m.row_count(); ++r) {
    m.entry(r, 0) = 0.3;
    m.entry(r, 1) = -0.2;
    m.entry(r, 2) = 0.8;
  }
  const int k = 2;
  EarmConfig cfg = identity_config(k);
  cfg.ema_decay = 0.0;  // self-normalized: homogeneous scores give w = 1 exactly
  EmaState ema(k);
  const std::vector<TokenSeq> gen = {{0, 1}, {2, 0}, {1, 1}};
  PhaseGrad pg(m.param_count());
  std::vector<double> weights;
  negative_phase(m, gen, k, ema, cfg, pg, 1.0, 1, nullptr, &weights);
  for (double w : weights) CHECK(w == doctest::Approx(1.0).epsilon(1e-15));

  GradVector manual(m.param_count());
  for (const auto& seq : gen) {
    const auto ctx = std::span<const std::int32_t>(seq).subspan(0, k - 1);
    accumulate_weighted_logit_grad(m, ctx, seq[k - 1], 1.0 / 3.0, manual);
    accumulate_weighted_logprob_grad(m, seq, 0, k - 1, std::vector<double>{-1.0 / 3.0}, manual);
  }
  pg.negative -= manual;
  CHECK(pg.negative.max_abs() <= 1e-14);
}

TEST_CASE("negative_phase MC estimate brackets the exact gradient") {
  const TabularModel m = random_tabular(3, 3, 2, 404);
  const int k = 3;
  const GradVector exact = oracle::exact_negative_phase_direct(m, k);

  EarmConfig cfg = identity_config(k);
  EmaState ema(k);
  ema.set_log_value(k, oracle::exact_partition(m, k));

  const std::size_t n = 20000;
  CounterRng rng(909);
  GradVector sum(m.param_count()), sumsq(m.param_count());
  for (std::size_t i = 0; i < n; ++i) {
    const TokenSeq seq = sample_ancestral(m, k, rng.derive(i));
    PhaseGrad one(m.param_count());
    negative_phase(m, std::span<const TokenSeq>(&seq, 1), k, ema, cfg, one);
    for (std::size_t p = 0; p < sum.size(); ++p) {
      sum[p] += one.negative[p];
      sumsq[p] += one.negative[p] * one.negative[p];
    }
  }
  const double dn = static_cast<double>(n);
  for (std::size_t p = 0; p < sum.size(); ++p) {
    const double mean = sum[p] / dn;
    const double var = std::max(0.0, sumsq[p] / dn - mean * mean);
    const double se = std::sqrt(var / dn);
    CHECK(std::abs(mean - exact[p]) <= 3.0 * se + 1e-9);
  }
}

TEST_CASE("earm_step_gradient: all-zero lambda yields a zero combined gradient") {
  const TabularModel m = random_tabular(3, 3, 2, 3);
  EarmConfig cfg = identity_config(3);
  cfg.lambda = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  // zero at some steps is fine as long as one is active
  cfg.lambda = {0.0, 0.0, 1e-300};
  EmaState ema(3);
  const std::vector<TokenSeq> data = {{0, 1, 2}, {1, 1, 0}};
  const PhaseGrad pg = earm_step_gradient(m, data, ema, cfg, CounterRng(1));
  CHECK(pg.combined.max_abs() <= 1e-290);
}

TEST_CASE("earm_step_gradient: one-hot lambda reproduces the single phase difference") {
  const TabularModel m = random_tabular(3, 4, 3, 44);
  EarmConfig cfg = identity_config(3);
  cfg.lambda = {0.0, 1.0, 0.0};
  cfg.gen_length = 3;
  const std::vector<TokenSeq> data = {{0, 1, 2}, {1, 2, 0}, {2, 0, 0}};

  EmaState ema(3);
  const CounterRng rng(7);
  const PhaseGrad pg = earm_step_gradient(m, data, ema, cfg, rng);

  // replicate: same negative batch, phases at k = 2 only
  const auto negatives = sample_negative_batch(m, data.size(), 3, rng.derive(stream_tag::negative));
  EmaState ema2(3);
  PhaseGrad manual(m.param_count());
  positive_phase(m, data, 2, cfg, manual, 1.0);
  negative_phase(m, negatives, 2, ema2, cfg, manual, 1.0);
  manual.finalize();

  GradVector diff = pg.combined;
  diff -= manual.combined;
  CHECK(diff.max_abs() <= 1e-12);
  CHECK(pg.per_k.size() == 3);
}

TEST_CASE("earm_step_gradient: fused and per-k paths agree") {
  const TabularModel m = random_tabular(3, 4, 3, 71);
  EarmConfig cfg;
  cfg.detach_horizon = 2;
  cfg.ema_decay = 0.9;
  cfg.weight_clip = 10.0;
  const std::vector<TokenSeq> data = {{0, 1, 2, 0}, {1, 2, 0, 1}, {2, 2, 1, 0}};

  EmaState ema_a(4), ema_b(4);
  StepOptions fused, detailed;
  detailed.per_k_norms = true;
  const PhaseGrad a = earm_step_gradient(m, data, ema_a, cfg, CounterRng(5), fused);
  const PhaseGrad b = earm_step_gradient(m, data, ema_b, cfg, CounterRng(5), detailed);

  GradVector diff = a.combined;
  diff -= b.combined;
  CHECK(diff.max_abs() <= 1e-11);
  for (int k = 1; k <= 4; ++k) CHECK(ema_a.log_value(k) == doctest::Approx(ema_b.log_value(k)).epsilon(1e-14));
  for (std::size_t i = 0; i < a.per_k.size(); ++i) {
    CHECK(a.per_k[i].mean_weight == doctest::Approx(b.per_k[i].mean_weight).epsilon(1e-12));
    CHECK(std::isnan(a.per_k[i].pos_norm));
    CHECK(!std::isnan(b.per_k[i].pos_norm));
  }
}

TEST_CASE("shift covariance: uniform logit shifts scale scores and keep w") {
  const TabularModel m = random_tabular(3, 3, 2, 12);
  TabularModel shifted = m;
  for (double& p : shifted.params()) p += 2.5;

  const std::vector<TokenSeq> contexts = {{0, 1}, {1, 2}, {2, 0}};
  for (const auto& ctx : contexts) {
    CHECK(context_score(shifted, ctx) - context_score(m, ctx) == doctest::Approx(2.5).epsilon(1e-12));
    const auto pa = conditional_distribution(m, ctx);
    const auto pb = conditional_distribution(shifted, ctx);
    for (std::size_t j = 0; j < pa.size(); ++j) CHECK(pa[j] == doctest::Approx(pb[j]).epsilon(1e-12));
  }

  EarmConfig cfg = identity_config(3);
  cfg.ema_decay = 0.0;
  EmaState ea(3), eb(3);
  const auto wa = importance_weights(m, contexts, 3, ea, cfg);
  const auto wb = importance_weights(shifted, contexts, 3, eb, cfg);
  for (std::size_t i = 0; i < wa.size(); ++i) CHECK(wa[i] == doctest::Approx(wb[i]).epsilon(1e-12));
}

TEST_CASE("earm step aborts on non-finite logits with position and norm") {
  TabularModel bad(2, 3, 1);
  bad.entry(bad.row_index(TokenSeq{}), 0) = std::numeric_limits<double>::infinity();
  EarmConfig cfg = identity_config(2);
  EmaState ema(2);
  const std::vector<TokenSeq> data = {{0, 1}};
  CHECK_THROWS_WITH_AS(earm_step_gradient(bad, data, ema, cfg, CounterRng(0)),
                       doctest::Contains("parameter norm"), std::runtime_error);
}
