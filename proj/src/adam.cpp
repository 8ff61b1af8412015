#include "eocount/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace eoc {

void adam_step(std::span<Tensor> params, AdamState& state, double lr, double weight_decay) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw DimensionError("adam_step: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.first_moment[i].size() != params[i].numel())
      throw DimensionError("adam_step: moment shape does not match parameter " + std::to_string(i));

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.requires_grad()) continue;
    auto data = p.data();
    const auto grad = std::as_const(p).grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j] + weight_decay * data[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace eoc
