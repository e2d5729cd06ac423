#pragma once

#include "e2ebt/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace e2ebt {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Central-difference gradient of f with respect to every entry of every input.
// Only forward values are used; no graph is recorded.
std::vector<Matrix> numeric_gradient(const ScalarFn& f, const std::vector<Tensor>& inputs, real step = 1e-5);

// ||autodiff - numeric|| / max(||autodiff||, ||numeric||) over all inputs.
// Inputs must be leaves with requires_grad set; their gradients are reset.
real gradient_relative_error(const ScalarFn& f, const std::vector<Tensor>& inputs, real step = 1e-5);

struct GradCheckResult {
  std::string primitive;
  int points = 0;
  real worst_error = 0;
  bool passed = false;
};

// Finite-difference suites for every differentiable primitive, each at
// `points` random inputs.
std::vector<GradCheckResult> run_gradcheck_suites(std::uint64_t seed, int points = 20, real tolerance = 1e-4);

}  // namespace e2ebt
