// SPDX-License-Identifier: Apache-2.0

#include "maskuno/core/types.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "maskuno/core/error.hpp"

namespace maskuno::core {

ClassDistribution::ClassDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.size() < 2) fail(ErrorKind::InvalidArgument, "ClassDistribution: need background + >=1 class");
  double sum = 0.0;
  for (double p : probs_) {
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
      std::ostringstream os;
      os << "ClassDistribution: entry " << p << " outside [0,1]";
      fail(ErrorKind::InvalidArgument, os.str());
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    std::ostringstream os;
    os << "ClassDistribution: entries sum to " << sum;
    fail(ErrorKind::InvalidArgument, os.str());
  }
}

ClassDistribution ClassDistribution::from_logits(std::span<const float> logits) {
  const double hi = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(double(logits[i]) - hi);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return ClassDistribution(std::move(p));
}

int ClassDistribution::argmax() const {
  return static_cast<int>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double MaskLogits::probability(int y, int x) const { return sigmoid(at(y, x)); }

std::vector<double> MaskLogits::probabilities() const {
  std::vector<double> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(), [](float v) { return sigmoid(v); });
  return out;
}

}  // namespace maskuno::core
