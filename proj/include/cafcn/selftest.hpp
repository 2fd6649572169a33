#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace cafcn::selftest {

struct CheckResult {
    std::string name;
    bool passed = false;
    double worst = 0.0;      // worst observed error (or the measured quantity)
    double tolerance = 0.0;
    std::string detail;
};

struct Options {
    std::uint64_t seed = 2024;
    /// Test hook: corrupt one analytic gradient entry so the checks must fail.
    bool inject_gradient_fault = false;
};

// Each check compares an implementation against an independent oracle
// (central finite differences, brute-force counting, exact-lattice
// integration) on random instances.

CheckResult primitive_gradients(const Options& o, double tolerance = 1e-6);
CheckResult coattention_gradients(const Options& o, double tolerance = 1e-5);
CheckResult network_gradients(const Options& o, double tolerance = 1e-4);
CheckResult attention_slices(const Options& o, double tolerance = 1e-9);
CheckResult attention_identity_at_zero_gain(const Options& o);
CheckResult attention_swap_symmetry(const Options& o);
CheckResult deconv_adjointness(const Options& o, int instances = 50, double tolerance = 1e-12);
CheckResult curve_counting_oracle(const Options& o, int instances = 100);
CheckResult scalar_metric_formulas(const Options& o, int instances = 100, double tolerance = 1e-12);
CheckResult area_integration_oracle(const Options& o, int instances = 100, double tolerance = 1e-9);
CheckResult loss_closed_form(double tolerance = 1e-5);
CheckResult loss_gradient(const Options& o, double tolerance = 1e-7);

/// Rectangle-sum integration over the confusion-count lattice, independent of
/// the trapezoid implementation. Exposed for tests.
double roc_area_oracle(const std::vector<std::uint64_t>& tp, const std::vector<std::uint64_t>& fp,
                       std::uint64_t positives, std::uint64_t negatives);
double pr_area_oracle(const std::vector<std::uint64_t>& tp, const std::vector<std::uint64_t>& fp,
                      std::uint64_t positives);

std::vector<CheckResult> run_all(const Options& o);

/// One "PASS|FAIL name worst tol" line per check; returns true when all pass.
bool report(std::ostream& os, const std::vector<CheckResult>& results);

}  // namespace cafcn::selftest
