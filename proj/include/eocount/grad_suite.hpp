#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "eocount/ops.hpp"

namespace eoc {

struct GradSuiteRow {
  std::string op;
  int seeds = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::size_t skipped_small = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradSuiteOptions {
  int seeds = 20;
  double eps = 1e-6;
  double tolerance = 1e-5;
  std::uint64_t base_seed = 0;
  /// Negative control: corrupt a gradient while the suite runs.
  GradFault fault = GradFault::none;
};

/// Names of the rows run_grad_suite produces, in order: every differentiable
/// op once, then "full_model".
std::vector<std::string> grad_suite_ops();

/// Finite-difference check of every differentiable op on randomized small
/// shapes, plus the composite training loss of a small model on 16x16 inputs.
std::vector<GradSuiteRow> run_grad_suite(const GradSuiteOptions& options = {});

bool all_passed(const std::vector<GradSuiteRow>& rows);
void print_grad_table(std::ostream& os, const std::vector<GradSuiteRow>& rows, double tolerance);

}  // namespace eoc
