#pragma once

#include <cmath>

#include "regnet/random.hpp"
#include "regnet/tensor.hpp"

namespace regnet {

/// Kaiming-uniform (ReLU gain): U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename T>
void kaiming_uniform(BasicTensor<T>& weight, Index fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : weight.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace regnet
