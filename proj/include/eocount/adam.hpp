#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "eocount/tensor.hpp"

namespace eoc {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One bias-corrected Adam update using each parameter's stored gradient.
/// Weight decay is classic L2: the gradient becomes g + weight_decay * param.
/// Moments are allocated on the first step and must keep matching shapes.
void adam_step(std::span<Tensor> params, AdamState& state, double lr, double weight_decay);

}  // namespace eoc
