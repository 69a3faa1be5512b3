#pragma once

#include <functional>

#include "clp/autodiff.hpp"

namespace clp::ad {

using ScalarFn = std::function<Var(const Var&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares grad(f(x), x) against central differences with step h, one
// coordinate at a time. Error per coordinate is
// |analytic - numeric| / max(1, |analytic|). f may itself call grad with
// create_graph, so second-order checks compose naturally.
GradCheckResult finite_diff_report(const ScalarFn& f, const Tensor& x, double h = 1e-5);
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace clp::ad
