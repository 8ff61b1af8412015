#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "eocount/tensor.hpp"

namespace eoc {

// Differentiable operations. Image-like tensors are [C, H, W]; vectors are [D].

/// 2-D cross-correlation with zero padding. weight is [C_out, C_in, kH, kW].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1,
              int padding = 0);

Tensor relu(const Tensor& x);

/// Logistic function; the result is kept strictly inside (0, 1).
Tensor sigmoid(const Tensor& x);

/// Non-overlapping k x k max pooling. The gradient goes to the first maximal
/// element of each window in row-major order.
Tensor maxpool2d(const Tensor& x, int k);

/// [C, H, W] -> [C] per-channel mean.
Tensor global_avgpool(const Tensor& x);

/// [C, H, W]: subtracts each channel's spatial mean.
Tensor center_channels(const Tensor& x);

/// W x + b for x [D], W [K, D], b [K].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// -log softmax(logits)[target] via the log-sum-exp shift.
Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target);

inline constexpr double kBceClamp = 1e-12;

/// Mean binary cross-entropy over all elements; q is clamped to
/// [kBceClamp, 1 - kBceClamp].
Tensor bce_loss(const Tensor& q, const Tensor& target);

/// scale * sum((pred - target)^2). Not averaged over elements.
Tensor mse_loss(const Tensor& pred, const Tensor& target, double scale);

/// Channel stacking. An undefined operand acts as an empty tensor.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Channels [begin, end) of a [C, H, W] tensor.
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);

/// a * x + b elementwise.
Tensor affine(const Tensor& x, double a, double b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor sum(const Tensor& x);

/// Index of the largest value, lowest index on exact ties. Not differentiable.
std::size_t argmax(std::span<const double> values);

/// Records the discrete decisions (relu masks, pooling winners, argmax picks)
/// taken while active, so finite-difference probes can detect kink crossings.
namespace kink_probe {
void begin();
std::uint64_t end();
bool active();
void note(std::uint64_t value);
}  // namespace kink_probe

/// Deliberate gradient corruption for negative-control checks of the
/// gradient verifier. Never enabled outside those checks.
enum class GradFault { none, conv2d_weight };
void set_grad_fault(GradFault fault);
GradFault grad_fault();

}  // namespace eoc
