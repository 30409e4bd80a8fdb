#pragma once

namespace cfair {

// Numerical constants shared by losses, tests and checks.
struct Tolerances {
  static constexpr double layer_norm_eps = 1e-5;
  static constexpr double cosine_eps = 1e-12;
  static constexpr double softmax_sum = 1e-6;
  static constexpr double grad_check_step = 1e-5;
  static constexpr double grad_check_rel = 1e-4;
};

}  // namespace cfair
