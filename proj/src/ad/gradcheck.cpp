#include "mkbe/ad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mkbe::ad {

GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> params,
                                double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("check_gradients: eps must be positive");
  for (auto& p : params) {
    if (!p.requires_grad()) p.set_requires_grad(true);
    check_finite<double>("check_gradients.point", p.data());
    p.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    const auto value = loss();
    tape.backward(value);
    for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss().item();
      values[i] = saved - eps;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
    params[pi].zero_grad();
  }
  return result;
}

}  // namespace mkbe::ad
