#pragma once

#include <vector>

#include "earm/model.hpp"
#include "earm/rng.hpp"

namespace earm::testutil {

/// Tabular model with entries drawn uniform(-scale, scale) from `seed`.
inline TabularModel random_tabular(int v, int k, int order, std::uint64_t seed,
                                   double scale = 1.5) {
  TabularModel m(v, k, order);
  CounterRng rng = CounterRng(seed).derive(0x7ab);
  for (double& p : m.params()) p = rng.next_in(-scale, scale);
  return m;
}

}  // namespace earm::testutil
