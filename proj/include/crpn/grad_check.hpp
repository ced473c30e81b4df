#pragma once
// Central finite-difference verification of analytic gradients, 64-bit only.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "crpn/tensor.hpp"

namespace crpn {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;  // which tensor
  std::size_t worst_index = 0;  // flat coordinate inside it
  std::size_t checked = 0;
  std::size_t kinks = 0;       // coordinates judged by a one-sided slope
  bool ok = true;               // false when a non-finite value appeared
  std::string failure;
};

using LossFn = std::function<double(const std::vector<Tensor<double>>&)>;
using GradFn = std::function<std::vector<Tensor<double>>(const std::vector<Tensor<double>>&)>;

/// Piecewise-linear layers put breakpoints inside some [x - eps, x + eps]
/// windows. When enabled, a coordinate whose central difference misses
/// `tolerance` but whose forward and backward slopes disagree is scored
/// against the closer one-sided slope instead, and counted in `kinks`.
struct KinkPolicy {
  bool enabled = false;
  double tolerance = 1e-4;
};

/// Compares grad(inputs) against (loss(x + eps) - loss(x - eps)) / 2eps for
/// every coordinate of every input. Relative error uses
/// max(|analytic|, |numeric|, floor) as denominator. eps must lie in
/// [1e-7, 1e-4].
GradCheckResult grad_check(const LossFn& loss, const GradFn& grad, std::vector<Tensor<double>> inputs,
                           double eps, double floor = 1e-6, const KinkPolicy& kinks = {});

/// Fixed random projection used as the scalar loss for single-op checks.
double weighted_sum(const Tensor<double>& out, const Tensor<double>& weights);

}  // namespace crpn
