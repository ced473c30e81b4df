#pragma once
// The full finite-difference suite: every tensor op plus the composite
// cascade loss, each over several seeds.

#include <functional>
#include <string>
#include <vector>

namespace crpn {

struct SuiteCase {
  std::string name;
  double tolerance = 0;
  double worst = 0;  // max relative error over seeds
  bool ok = true;    // every check stayed finite
  std::string detail;

  bool passed() const { return ok && worst < tolerance; }
};

/// Runs each case for seeds 1..`seeds`; `progress` sees every finished case.
std::vector<SuiteCase> run_grad_suite(int seeds = 5, const std::function<void(const SuiteCase&)>& progress = {});

}  // namespace crpn
