#include "crpn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace crpn {

GradCheckResult grad_check(const LossFn& loss, const GradFn& grad, std::vector<Tensor<double>> inputs,
                           double eps, double floor, const KinkPolicy& kinks) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw std::invalid_argument("grad_check eps " + std::to_string(eps) + " outside [1e-7, 1e-4]");
  }
  GradCheckResult result;
  const std::vector<Tensor<double>> analytic = grad(inputs);
  if (analytic.size() != inputs.size()) {
    throw std::invalid_argument("gradient count does not match input count");
  }
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (analytic[t].shape() != inputs[t].shape()) {
      throw ShapeError("gradient " + std::to_string(t) + " has shape " + analytic[t].shape().str() +
                       ", input has " + inputs[t].shape().str());
    }
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double saved = inputs[t][i];
      inputs[t][i] = saved + eps;
      const double up = loss(inputs);
      inputs[t][i] = saved - eps;
      const double down = loss(inputs);
      inputs[t][i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      ++result.checked;
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        result.ok = false;
        result.worst_input = t;
        result.worst_index = i;
        result.failure = "non-finite value at input " + std::to_string(t) + " coordinate " +
                         std::to_string(i);
        result.max_relative_error = INFINITY;
        return result;
      }
      auto rel = [&](double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}); };
      double err = rel(numeric);
      if (kinks.enabled && err > kinks.tolerance) {
        // A ReLU or smooth-L1 breakpoint inside [x - eps, x + eps] makes the
        // one-sided slopes disagree; the analytic value must then match one.
        const double center = loss(inputs);
        const double fwd = (up - center) / eps;
        const double bwd = (center - down) / eps;
        if (rel(fwd) > kinks.tolerance || rel(bwd) > kinks.tolerance) {
          const double side = std::min(rel(fwd), rel(bwd));
          if (side <= kinks.tolerance) {
            ++result.kinks;
            err = side;
          }
        }
      }
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_input = t;
        result.worst_index = i;
      }
    }
  }
  return result;
}

double weighted_sum(const Tensor<double>& out, const Tensor<double>& weights) {
  if (out.size() != weights.size()) {
    throw ShapeError("weighted_sum size mismatch " + out.shape().str() + " vs " + weights.shape().str());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * weights[i];
  return acc;
}

}  // namespace crpn
