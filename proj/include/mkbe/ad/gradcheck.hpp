#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mkbe/ad/tensor.hpp"

namespace mkbe::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;  // index into the parameter list
  std::size_t worst_index = 0;  // flat coordinate inside that parameter
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of a scalar graph against central
/// differences. `loss` must rebuild the graph from the current parameter
/// values on each call. Per coordinate the error is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
/// NonFiniteError from any op propagates with the op name.
GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> params,
                                double eps = 1e-4);

}  // namespace mkbe::ad
