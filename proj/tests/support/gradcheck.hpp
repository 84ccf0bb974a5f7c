#pragma once

// Central finite-difference gradient checking. The forward function is
// re-evaluated from scratch for every probe so the check stays independent
// of the reverse-mode path it validates.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "maskspec/tensor.hpp"

namespace testsupport {

struct GradCheckResult {
  double max_rel_error{0.0};
  long probes{0};
  std::string worst_location;
};

/// Relative error with a unit floor so near-zero derivatives are compared
/// absolutely at the tolerance scale.
inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / denom;
}

/// Checks d loss / d inputs[k] for every element of every input tensor.
/// `forward` must build a fresh graph from the given leaf tensors and return
/// the scalar loss.
inline GradCheckResult grad_check(
    const std::function<maskspec::Tensor<double>(const std::vector<maskspec::Tensor<double>>&)>&
        forward,
    std::vector<maskspec::Tensor<double>> inputs, double h = 1e-5) {
  using maskspec::Tensor;

  // Analytic pass.
  for (auto& t : inputs) t.zero_grad();
  maskspec::backward(forward(inputs));

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    const std::vector<double> analytic = inputs[k].grad();
    for (long j = 0; j < inputs[k].size(); ++j) {
      const double saved = inputs[k].values()[j];
      inputs[k].values_mut()[j] = saved + h;
      const double up = forward(inputs).item();
      inputs[k].values_mut()[j] = saved - h;
      const double down = forward(inputs).item();
      inputs[k].values_mut()[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = rel_error(analytic[j], numeric);
      ++result.probes;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_location =
            "input " + std::to_string(k) + " element " + std::to_string(j);
      }
    }
  }
  return result;
}

}  // namespace testsupport
