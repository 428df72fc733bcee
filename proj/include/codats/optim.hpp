#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "codats/net.hpp"
#include "codats/tape.hpp"

namespace codats {

// Bias-corrected Adam. Moment tensors are kept parallel to the parameter
// store's registration order.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t timestep = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_params(const ParamStore<T>& params) {
    AdamState state;
    state.m.reserve(params.entries.size());
    state.v.reserve(params.entries.size());
    for (const auto& e : params.entries) {
      state.m.push_back(Tensor<T>::zeros(e.value.shape));
      state.v.push_back(Tensor<T>::zeros(e.value.shape));
    }
    return state;
  }
};

template <typename T>
void adam_step(ParamStore<T>& params, const GradMap<T>& grads, AdamState<T>& state, double lr) {
  if (state.m.size() != params.entries.size()) {
    throw std::invalid_argument("adam: state does not match parameter store");
  }
  state.timestep += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.timestep));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.timestep));
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    auto& entry = params.entries[i];
    const auto it = grads.find(entry.name);
    if (it == grads.end()) {
      throw std::invalid_argument("adam: missing gradient for '" + entry.name + "'");
    }
    const Tensor<T>& g = it->second;
    if (!g.same_shape(entry.value)) {
      throw std::invalid_argument("adam: gradient shape mismatch for '" + entry.name + "'");
    }
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
    for (std::size_t j = 0; j < g.numel(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const double m_hat = static_cast<double>(m[j]) / bc1;
      const double v_hat = static_cast<double>(v[j]) / bc2;
      entry.value[j] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  }
}

// Adversarial-strength schedule: lambda(p) = 2/(1+exp(-gamma*p)) - 1 with
// p = iteration/total. The learning rate itself stays constant.
inline double grl_lambda(std::size_t iteration, std::size_t total_iterations, double gamma = 10.0) {
  if (total_iterations == 0) throw std::invalid_argument("grl_lambda: total iterations is zero");
  if (iteration > total_iterations) {
    throw std::invalid_argument("grl_lambda: iteration beyond total");
  }
  const double p = static_cast<double>(iteration) / static_cast<double>(total_iterations);
  return 2.0 / (1.0 + std::exp(-gamma * p)) - 1.0;
}

}  // namespace codats
