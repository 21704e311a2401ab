#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "catagg/tensor.hpp"

namespace catagg {

// One instance of a gradient check: leaves to perturb and a closure that
// recomputes the output from them (reading their buffers every call).
struct GradProblem {
  std::vector<std::pair<std::string, Tensor>> targets;
  std::function<Tensor()> forward;
};

struct GradCase {
  std::string name;
  std::function<GradProblem(std::uint64_t seed)> make;
  std::int64_t max_coords = 0;  // per-target budget; 0 uses the option
};

struct GradCheckOptions {
  int seeds = 5;
  double step = 1e-4;
  double tolerance = 1e-4;
  // Coordinates checked per target tensor; larger tensors are subsampled.
  std::int64_t max_coords = 24;
};

struct GradResult {
  std::string name;
  double max_error = 0.0;  // max |analytic - fd| / max(1, |fd|)
  std::string worst;       // "target[index] seed=s"
  std::int64_t checked = 0;
  bool passed = false;
};

// Central differences of sum(out * R) (R uniform, fixed per seed) against
// the reverse-mode gradient, in f64.
GradResult check_gradients(const GradCase& c, const GradCheckOptions& options = {});

// Every differentiable op plus the composite aggregator paths.
const std::vector<GradCase>& gradient_suite();
// Throws ArgumentError for unknown names.
const GradCase& find_gradient_case(const std::string& name);

// f64 tensor with entries drawn uniformly from [lo, hi).
Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = true);

}  // namespace catagg
