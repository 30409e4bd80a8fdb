#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfair/tensor.hpp"

namespace cfair {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamMoments {
  std::vector<T> m;
  std::vector<T> v;
};

// Moments per named parameter plus the shared step counter.
template <typename T>
struct AdamState {
  std::map<std::string, AdamMoments<T>> moments;
  std::size_t step = 0;
};

// One bias-corrected Adam update of `param` in place. `step` is the 1-based
// index of this update.
template <typename T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, AdamMoments<T>& mom, std::size_t step, double lr,
                 const AdamConfig& cfg) {
  if (param.size() != grad.size())
    throw std::invalid_argument("adam: gradient shape " + shape_str(grad.shape) + " does not match parameter " +
                                shape_str(param.shape));
  if (mom.m.empty()) {
    mom.m.assign(param.size(), T(0));
    mom.v.assign(param.size(), T(0));
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g;
    mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g * g;
    param[i] -= step_size * mom.m[i] / (std::sqrt(mom.v[i]) * inv_sqrt_bc2 + eps);
  }
}

// Updates every parameter that has a gradient entry; advances the step counter.
template <typename T>
void adam_step(std::map<std::string, Tensor<T>>& params, const std::map<std::string, Tensor<T>>& grads,
               AdamState<T>& state, double lr, const AdamConfig& cfg) {
  ++state.step;
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    adam_update(p, it->second, state.moments[name], state.step, lr, cfg);
  }
}

}  // namespace cfair
