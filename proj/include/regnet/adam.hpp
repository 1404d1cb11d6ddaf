#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "regnet/tensor.hpp"

namespace regnet {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment estimates plus the step counter. Persisted in
/// checkpoints so that a resumed run continues bit-identically.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  long step = 0;
};

/// Bias-corrected Adam over a fixed list of parameter tensors.
template <typename T>
class BasicAdam {
 public:
  BasicAdam(std::vector<BasicTensor<T>> params, AdamConfig config)
      : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      state_.m.emplace_back(static_cast<std::size_t>(p.numel()), T{0});
      state_.v.emplace_back(static_cast<std::size_t>(p.numel()), T{0});
    }
  }

  void step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (!params_[k].has_grad()) {
        throw ContractError("adam: parameter " + std::to_string(k) + " has no gradient");
      }
    }
    ++state_.step;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(state_.step));
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto p = params_[k].mutable_data();
      auto g = params_[k].grad();
      auto& m = state_.m[k];
      auto& v = state_.v[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (T{1} - b1) * g[i];
        v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= static_cast<T>(config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  const AdamState<T>& state() const { return state_; }
  void set_state(AdamState<T> state) {
    if (state.m.size() != params_.size() || state.v.size() != params_.size()) {
      throw ContractError("adam: state does not match parameter list");
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (state.m[k].size() != static_cast<std::size_t>(params_[k].numel()) ||
          state.v[k].size() != static_cast<std::size_t>(params_[k].numel())) {
        throw ContractError("adam: state size mismatch for parameter " + std::to_string(k));
      }
    }
    state_ = std::move(state);
  }

 private:
  std::vector<BasicTensor<T>> params_;
  AdamConfig config_;
  AdamState<T> state_;
};

using Adam = BasicAdam<float>;

}  // namespace regnet
