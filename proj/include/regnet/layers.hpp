#pragma once
// Parameterised layers shared by the segmentation and transformation networks.

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "regnet/init.hpp"
#include "regnet/ops.hpp"
#include "regnet/random.hpp"

namespace regnet {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Square-kernel stride-1 convolution; Kaiming-uniform weights, zero bias.
struct ConvLayer {
  Tensor weight;
  Tensor bias;
  Index padding = 0;

  ConvLayer() = default;
  /// A null rng leaves the weights zero for a checkpoint to fill.
  ConvLayer(Index cin, Index cout, Index kernel, Index pad, Rng* rng)
      : weight(Shape{cout, cin, kernel, kernel}, true), bias(Shape{cout}, true), padding(pad) {
    if (rng) kaiming_uniform(weight, cin * kernel * kernel, *rng);
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, 1, padding); }

  void collect(const std::string& name, std::vector<NamedTensor>& out) const {
    out.emplace_back(name + ".weight", weight);
    out.emplace_back(name + ".bias", bias);
  }
};

/// Fully connected layer; Kaiming-uniform weights, zero bias.
struct LinearLayer {
  Tensor weight;
  Tensor bias;

  LinearLayer() = default;
  LinearLayer(Index in, Index out, Rng* rng) : weight(Shape{out, in}, true), bias(Shape{out}, true) {
    if (rng) kaiming_uniform(weight, in, *rng);
  }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void collect(const std::string& name, std::vector<NamedTensor>& out) const {
    out.emplace_back(name + ".weight", weight);
    out.emplace_back(name + ".bias", bias);
  }
};

inline std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

inline Index total_numel(const std::vector<NamedTensor>& named) {
  Index n = 0;
  for (const auto& [name, t] : named) n += t.numel();
  return n;
}

}  // namespace regnet
