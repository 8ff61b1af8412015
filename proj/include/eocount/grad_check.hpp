#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "eocount/tensor.hpp"

namespace eoc {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckOptions {
  double eps = 1e-6;
  /// Coordinates checked per input; 0 checks every element. When sampling,
  /// coordinates are drawn with `sample_seed`.
  std::size_t max_coords_per_input = 0;
  std::uint64_t sample_seed = 0;
  /// Coordinates with a relu/pooling/argmax decision change anywhere within
  /// +/- kink_radius * eps are skipped.
  double kink_radius = 10.0;
  /// Coordinates where both gradients are below this magnitude are skipped.
  /// A central difference of f carries an absolute error of roughly
  /// ulp(f) / eps, so tiny gradients cannot be resolved to a small relative
  /// error. 0 checks everything.
  double min_magnitude = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates near a kink: a probe at +/- eps or +/- kink_radius * eps
  /// changed a relu mask, pooling winner or argmax decision.
  std::size_t skipped_kinks = 0;
  /// Coordinates skipped by min_magnitude.
  std::size_t skipped_small = 0;
};

/// Compares backward() gradients of `fn` with central differences
/// (f(x+eps) - f(x-eps)) / 2eps. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8). Inputs must require grad.
GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor> inputs,
                           const GradCheckOptions& options = {});

}  // namespace eoc
