#pragma once

#include <functional>

#include "tess/tensor.hpp"

namespace tess {

// Central-difference gradient check. f must be a pure scalar function of x's
// current contents (it is re-invoked per perturbed coordinate). Returns the
// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|,
// 1e-8). Meaningful thresholds require the 64-bit build.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                Tensor& x, double h = 1e-5) {
  x.zero_grad();
  Tensor loss = f(x);
  backward(loss);
  if (!x.has_grad())
    throw UsageError("finite_diff_check: x received no gradient");
  std::vector<Real> analytic = x.grad();

  double max_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Real orig = x.data()[i];
    x.data()[i] = orig + Real(h);
    double fp = f(x).item();
    x.data()[i] = orig - Real(h);
    double fm = f(x).item();
    x.data()[i] = orig;
    double numeric = (fp - fm) / (2.0 * h);
    double a = analytic[i];
    double err = std::abs(a - numeric) /
                 std::max({std::abs(a), std::abs(numeric), 1e-8});
    max_err = std::max(max_err, err);
  }
  x.zero_grad();
  return max_err;
}

}  // namespace tess
