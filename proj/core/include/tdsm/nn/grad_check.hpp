#pragma once

#include <functional>
#include <string>

#include "tdsm/nn/param_store.hpp"

namespace tdsm::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  Eigen::Index worst_row = 0;
  Eigen::Index worst_col = 0;
};

// Compares the analytic gradients sitting in the store's gradient buffers
// against central finite differences of a scalar loss. `loss` must rebuild
// its computation from the current store values on every call and must not
// touch the gradient buffers (forward pass only). Relative error is
// |fd - g| / max(1, |fd|, |g|). At most `max_coords_per_param` coordinates
// per parameter are probed (evenly strided) to keep the 2-evaluations-per-
// coordinate cost affordable; values are restored bitwise after probing.
GradCheckResult grad_check(ParamStore& store,
                           const std::function<double()>& loss,
                           double step = 1e-5, int max_coords_per_param = 200);

// Finite-difference gradient of a scalar function of a matrix argument,
// central differences with the given step. Used to cross-check analytic
// input gradients and closed-form score fields.
Mat fd_gradient(const std::function<double(const Mat&)>& f, const Mat& x,
                double step = 1e-5);

}  // namespace tdsm::nn
