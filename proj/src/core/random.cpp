// SPDX-License-Identifier: Apache-2.0

#include "maskuno/core/random.hpp"

#include <cmath>
#include <numbers>

namespace maskuno::core {

double normal01(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0, 1]
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace maskuno::core
