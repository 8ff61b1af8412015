#include "eocount/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "eocount/ops.hpp"
#include "eocount/rng.hpp"

namespace eoc {

namespace {

struct Probe {
  double value;
  std::uint64_t signature;
};

Probe evaluate(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  NoGradGuard no_grad;
  kink_probe::begin();
  const double v = fn(inputs).item();
  return {v, kink_probe::end()};
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor> inputs,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (auto& t : inputs) {
    if (!t.requires_grad()) throw std::invalid_argument("grad_check: inputs must require grad");
    t.zero_grad();
  }

  Tape::current().clear();
  Tensor loss = fn(inputs);
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    const auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  const std::uint64_t base_signature = evaluate(fn, inputs).signature;

  GradCheckResult result;
  Rng rng(options.sample_seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].data();
    std::vector<std::size_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input != 0 && coords.size() > options.max_coords_per_input) {
      rng.shuffle(coords);
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const double original = data[idx];
      data[idx] = original + options.eps;
      const Probe plus = evaluate(fn, inputs);
      data[idx] = original - options.eps;
      const Probe minus = evaluate(fn, inputs);
      bool kink = plus.signature != base_signature || minus.signature != base_signature;
      if (!kink && options.kink_radius > 1.0) {
        data[idx] = original + options.kink_radius * options.eps;
        kink = evaluate(fn, inputs).signature != base_signature;
        if (!kink) {
          data[idx] = original - options.kink_radius * options.eps;
          kink = evaluate(fn, inputs).signature != base_signature;
        }
      }
      data[idx] = original;
      if (kink) {
        ++result.skipped_kinks;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * options.eps);
      const double a = analytic[k][idx];
      if (std::abs(a) < options.min_magnitude && std::abs(numeric) < options.min_magnitude) {
        ++result.skipped_small;
        continue;
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace eoc
