#include <cmath>

#include "doctest.h"
#include "earm/corpus.hpp"
#include "earm/energy.hpp"
#include "earm/numerics.hpp"
#include "earm/oracle.hpp"
#include "test_util.hpp"

using namespace earm;
using testutil::random_tabular;

TEST_CASE("enumerate_sequences") {
  const auto seqs = oracle::enumerate_sequences(2, 2);
  REQUIRE(seqs.size() == 4);
  CHECK(seqs[0] == TokenSeq{0, 0});
  CHECK(seqs[1] == TokenSeq{0, 1});
  CHECK(seqs[2] == TokenSeq{1, 0});
  CHECK(seqs[3] == TokenSeq{1, 1});
  CHECK(oracle::enumerate_sequences(3, 1).size() == 3);
  CHECK(oracle::enumerate_sequences(4, 3).size() == 64);
  CHECK_THROWS_WITH_AS(oracle::enumerate_sequences(10, 7), doctest::Contains("enumeration guard"),
                       std::invalid_argument);
}

TEST_CASE("exact_partition") {
  const TabularModel zero(5, 4);
  for (int k = 1; k <= 3; ++k)
    CHECK(oracle::exact_partition(zero, k) == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  const TabularModel m = random_tabular(3, 4, 3, 17);
  CHECK(oracle::exact_partition(m, 1) == doctest::Approx(context_score(m, TokenSeq{})).epsilon(1e-14));

  // independent enumeration order: sum e^{-E} over whole sequences
  for (int k = 2; k <= 3; ++k) {
    std::vector<double> terms;
    for (const auto& seq : oracle::enumerate_sequences(3, k))
      terms.push_back(-sequence_energy(m, seq, k));
    CHECK(oracle::exact_partition(m, k) == doctest::Approx(log_sum_exp(terms)).epsilon(1e-12));
  }
}

TEST_CASE("exact_model_joint: structure cases") {
  const TabularModel zero(3, 3);
  const ExactDist uniform = oracle::exact_model_joint(zero, 3);
  for (std::size_t i = 0; i < uniform.support_size(); ++i)
    CHECK(uniform.mass_at(i) == doctest::Approx(1.0 / 27.0).epsilon(1e-12));

  // spiky prefix conditionals, flat final row: greedy prefix crossed with a
  // uniform last token
  TabularModel m(3, 3, 2);
  m.entry(m.row_index(TokenSeq{}), 1) = 50.0;
  m.entry(m.row_index(TokenSeq{1}), 2) = 50.0;
  // row for context {1,2} stays all-zero
  const ExactDist joint = oracle::exact_model_joint(m, 3);
  for (int t = 0; t < 3; ++t)
    CHECK(joint.mass(TokenSeq{1, 2, t}) == doctest::Approx(1.0 / 3.0).epsilon(1e-9));

  // marginalizing over the last token gives q(prefix) * e^{score} / Z
  const TabularModel r = random_tabular(3, 3, 2, 23);
  const ExactDist rj = oracle::exact_model_joint(r, 3);
  const double log_z = oracle::exact_partition(r, 3);
  for (const auto& prefix : oracle::enumerate_sequences(3, 2)) {
    std::vector<double> terms;
    TokenSeq seq = prefix;
    seq.push_back(0);
    for (int t = 0; t < 3; ++t) {
      seq.back() = t;
      terms.push_back(rj.log_mass(seq));
    }
    const double expect = prefix_log_prob(r, prefix, 2) + context_score(r, prefix) - log_z;
    CHECK(log_sum_exp(terms) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("negative-phase identity: direct and reweighted forms agree") {
  for (int v : {2, 3}) {
    for (int k = 1; k <= 3; ++k) {
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const TabularModel m = random_tabular(v, 4, 3, seed * 13 + static_cast<std::uint64_t>(v));
        GradVector direct = oracle::exact_negative_phase_direct(m, k);
        const GradVector rw = oracle::exact_negative_phase_reweighted(m, k);
        direct -= rw;
        CHECK(direct.max_abs() <= 1e-10);
      }
    }
  }
}

TEST_CASE("exact_mu_weights") {
  const TabularModel zero(3, 3);
  const auto mu = oracle::exact_mu_weights(zero, 2);
  for (double x : mu.mu) CHECK(x == doctest::Approx(1.0).epsilon(1e-12));
  for (double x : mu.w) CHECK(x == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mu.excluded.empty());

  for (std::uint64_t seed : {3ull, 9ull}) {
    const TabularModel m = random_tabular(2, 3, 2, seed);
    const int k = 2;
    const auto mw = oracle::exact_mu_weights(m, k);
    // E_q[w] = 1
    double expect = 0.0;
    const auto prefixes = oracle::enumerate_sequences(2, k - 1);
    for (std::size_t i = 0; i < prefixes.size(); ++i)
      expect += std::exp(prefix_log_prob(m, prefixes[i], k - 1)) * mw.w[i];
    CHECK(expect == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("exact_kl") {
  const auto src = SyntheticSource::uniform(2, 3, 0);
  const ExactDist u = exact_data_dist(src, 2);
  CHECK(oracle::exact_kl(u, u) == doctest::Approx(0.0).epsilon(1e-15));

  // hand-evaluated value on a 4-point space
  std::vector<double> qm = {std::log(0.7), std::log(0.1), std::log(0.1), std::log(0.1)};
  const ExactDist p(4, 1, std::vector<double>(4, std::log(0.25)));
  const ExactDist q(4, 1, std::move(qm));
  double hand = 0.0;
  for (double qi : {0.7, 0.1, 0.1, 0.1}) hand += 0.25 * std::log(0.25 / qi);
  CHECK(oracle::exact_kl(p, q) == doctest::Approx(hand).epsilon(1e-12));

  // nonnegativity over random table pairs
  CounterRng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    auto draw = [&](std::uint64_t tag) {
      std::vector<double> mass(8);
      CounterRng r = rng.derive(tag + static_cast<std::uint64_t>(rep) * 2);
      double total = 0.0;
      for (double& x : mass) {
        x = r.next_unit() + 1e-3;
        total += x;
      }
      for (double& x : mass) x = std::log(x / total);
      return ExactDist(2, 3, std::move(mass));
    };
    CHECK(oracle::exact_kl(draw(0), draw(1)) >= -1e-12);
  }

  // absolute-continuity violation names the sequence
  std::vector<double> holey = {0.0, kNegInf, kNegInf, kNegInf};
  const ExactDist degenerate(2, 2, std::move(holey));
  CHECK_THROWS_WITH_AS(oracle::exact_kl(u, degenerate), doctest::Contains("[0,1]"),
                       std::invalid_argument);
}

TEST_CASE("mc_convergence_report") {
  const TabularModel m = random_tabular(3, 3, 2, 61);

  const auto wm = oracle::mc_convergence_report(m, 2, oracle::McEstimator::weight_mean,
                                                {100, 1000}, CounterRng(1), 5, 1e-12);
  for (double d : wm.deviations) CHECK(d <= 1e-12);
  CHECK(wm.pass);

  const auto np = oracle::mc_convergence_report(m, 3, oracle::McEstimator::neg_phase,
                                                {1000, 10000}, CounterRng(2), 5, 0.1);
  CHECK(np.deviations.size() == 2);
  CHECK(np.monotone);
  CHECK(np.deviations[1] < np.deviations[0]);
  CHECK(np.pass);
  CHECK(np.to_json_string().find("negative_phase_mc") != std::string::npos);
}

TEST_CASE("descending the exact objective gradient lowers the summed KL") {
  const auto source = SyntheticSource::random_markov(3, 3, 1, 1.0, 7);
  EarmConfig cfg;
  cfg.weight_clip.reset();
  cfg.detach_horizon = 3;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    TabularModel m = random_tabular(3, 3, 2, seed, 1.0);
    const double before = oracle::summed_kl(m, source, cfg, 3);
    const GradVector g = oracle::exact_objective_gradient(m, source, cfg, 3);
    auto params = m.params();
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= 1e-3 * g[i];
    const double after = oracle::summed_kl(m, source, cfg, 3);
    CHECK(after < before);
  }
}
