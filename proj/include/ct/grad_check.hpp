#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "ct/params.hpp"

namespace ct {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference verification of reverse-mode gradients.
//   loss_value:   forward pass only, returns the scalar loss
//   run_backward: zero grads, forward + backward, leave grads in the store
// Perturbs every element of every parameter, so only run on small configs.
inline GradCheckResult grad_check(ParamStore& store, const std::function<double()>& loss_value,
                                  const std::function<void()>& run_backward, double eps = 1e-4) {
  run_backward();
  GradCheckResult res;
  store.for_each([&](ParamArray& p) {
    for (size_t i = 0; i < p.val.size(); ++i) {
      const double saved = p.val[i];
      p.val[i] = saved + eps;
      const double lp = loss_value();
      p.val[i] = saved - eps;
      const double lm = loss_value();
      p.val[i] = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double ad = p.grad[i];
      const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p.name;
        res.worst_index = i;
        res.analytic = ad;
        res.numeric = fd;
      }
    }
  });
  return res;
}

}  // namespace ct
