#pragma once

#include <string>
#include <vector>

#include "tdsm/gmm.hpp"
#include "tdsm/transition.hpp"

namespace tdsm {

struct CheckResult {
  std::string name;
  double worst = 0.0;      // worst observed deviation
  double tolerance = 0.0;  // pass iff worst <= tolerance
  bool pass = false;
  std::string note;  // probe description, or why a check was skipped
};

struct VerifyOptions {
  double grid_lo = -6.0;  // identity-check lattice
  double grid_hi = 6.0;
  int grid_n = 20;
  std::vector<double> times = {0.1, 1.0, 3.0, 10.0};
  std::vector<double> guidance_times = {0.1, 1.0, 3.0};
  double plateau_lo = -2.0;  // large-t weight plateau lattice
  double plateau_hi = 2.0;
  int plateau_n = 21;
  int hard_label_samples = 256;
  unsigned long long seed = 2026;
};

// Canonical list of registered analytic checks, in execution order. Adding
// a check without extending this list makes the completeness entry fail.
const std::vector<std::string>& verification_manifest();

// Runs every closed-form identity the oracles and the guidance combinators
// promise, on the given mixture/schedule/reverse-matrix triple. Checks whose
// preconditions the configuration cannot meet (symmetric-point and
// plateau/hard-label regimes need a separated two-class mixture) pass with
// an explanatory note. The final entry compares the executed names against
// verification_manifest().
std::vector<CheckResult> run_verification(const GaussianMixture& gmm,
                                          const VESchedule& sched,
                                          const TransitionMatrix& S,
                                          const VerifyOptions& opts = {});

bool all_passed(const std::vector<CheckResult>& results);

// One fixed-format line per check: PASS/FAIL, name, worst error, tolerance.
std::string verification_report(const std::vector<CheckResult>& results);

}  // namespace tdsm
