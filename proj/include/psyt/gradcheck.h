#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "psyt/autograd.h"

namespace psyt {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = true;
};

// Builds a scalar from the given input leaves on `tape`.
using ScalarFunction = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

// Compares the tape gradient of f at `points` with central differences of
// step h. Per element the error is |analytic - numeric| / max(|analytic|,
// |numeric|, abs_floor); the floor keeps near-zero gradients from turning
// round-off into huge relative errors. Passes iff the max error <= tol.
GradCheckReport finite_diff_check(const ScalarFunction& f, std::vector<Tensor> points, double tol,
                                  double h = 1e-5, double abs_floor = 1e-6);

}  // namespace psyt
