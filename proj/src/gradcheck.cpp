#include "clp/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "clp/errors.hpp"

namespace clp::ad {

namespace {

double eval_at(const ScalarFn& f, const Tensor& x) {
  Var out = f(Var::leaf(x, true));
  const double v = out.item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: f returned a non-finite value");
  return v;
}

}  // namespace

GradCheckResult finite_diff_report(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  Var xv = Var::leaf(x, true);
  const Tensor analytic = grad(f(xv), xv).value();

  GradCheckResult res;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval_at(f, probe);
    probe[i] = orig - h;
    const double fm = eval_at(f, probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (err > res.max_rel_error || i == 0) {
      res.max_rel_error = std::max(res.max_rel_error, err);
      res.worst_index = i;
      res.analytic = analytic[i];
      res.numeric = numeric;
    }
  }
  return res;
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  return finite_diff_report(f, x, h).max_rel_error;
}

}  // namespace clp::ad
