#include "psyt/gradcheck.h"

#include <algorithm>
#include <cmath>

namespace psyt {

namespace {

double evaluate(const ScalarFunction& f, const std::vector<Tensor>& points) {
  Tape tape(false);
  std::vector<Var> inputs;
  inputs.reserve(points.size());
  for (const auto& p : points) inputs.push_back(tape.constant(p));
  return f(tape, inputs).value()[0];
}

}  // namespace

GradCheckReport finite_diff_check(const ScalarFunction& f, std::vector<Tensor> points, double tol, double h,
                                  double abs_floor) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> inputs;
    for (const auto& p : points) inputs.push_back(tape.variable(p));
    Var out = f(tape, inputs);
    tape.backward(out);
    for (const Var& v : inputs) analytic.push_back(tape.grad(v));
  }

  GradCheckReport report;
  for (std::size_t k = 0; k < points.size(); ++k) {
    for (std::size_t i = 0; i < points[k].size(); ++i) {
      const double saved = points[k][i];
      points[k][i] = saved + h;
      const double up = evaluate(f, points);
      points[k][i] = saved - h;
      const double down = evaluate(f, points);
      points[k][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), abs_floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.checked == 0) {
        report.max_rel_error = rel;
        report.worst_input = k;
        report.worst_index = i;
      }
      ++report.checked;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace psyt
