#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ordalign/rng.hpp"
#include "ordalign/tensor.hpp"

namespace ordalign {

// Central-difference verification of reverse-mode gradients, run in double so
// finite-difference noise stays well under the acceptance tolerance.

// One randomized check instance: leaves plus a closure that rebuilds the
// scalar loss from them on every call.
struct GradTrial {
  std::vector<TensorT<double>> leaves;
  std::function<TensorT<double>()> fn;
};

// Compares reverse-mode gradients of fn against central differences around the
// current leaf values. Returns the worst relative error
// |a - n| / max(1e-8, |a| + |n|) over every leaf element. Leaf gradients are
// cleared on exit; leaf values are restored exactly.
double grad_check(const std::function<TensorT<double>()>& fn,
                  const std::vector<TensorT<double>>& leaves, double eps = 3e-5);

struct OpCheckSpec {
  std::string name;
  std::function<GradTrial(Rng&)> make;
};

struct OpCheckResult {
  std::string name;
  int trials = 0;
  double max_rel_err = 0.0;
};

struct GradSuiteReport {
  std::vector<OpCheckResult> ops;
  double max_rel_err = 0.0;
  bool passed(double tol) const { return max_rel_err <= tol; }
};

// Randomized trial makers covering every differentiable op, keyed by op name.
// Inputs are drawn away from kinks (relu, clamp, bilinear cell boundaries) so
// central differences measure the true derivative.
const std::vector<OpCheckSpec>& gradcheck_registry();

// Runs trials_per_op randomized checks for every registered op. Deterministic
// in seed.
GradSuiteReport run_gradcheck_suite(std::uint64_t seed, int trials_per_op, double eps = 3e-5);

// Same, over a caller-provided spec list (e.g. the loss registry).
GradSuiteReport run_gradcheck_suite(const std::vector<OpCheckSpec>& registry,
                                    std::uint64_t seed, int trials_per_op, double eps = 3e-5);

}  // namespace ordalign
