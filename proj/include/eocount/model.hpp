#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eocount/tensor.hpp"

namespace eoc {

/// Which parts of the class-agnostic mask branch exist.
enum class MaskArch {
  none,         // plain backbone + regressor
  no_feedback,  // mask prediction fused directly, no convs after the mask
  full,         // mask prediction, inversion, feedback convs, fusion
};

struct ArchConfig {
  /// Backbone conv widths; maxpool(2) follows the first two blocks.
  std::vector<std::size_t> backbone{16, 32, 64, 64};
  std::size_t trunk = 64;     // two 3x3 convs before the head
  std::size_t mask = 32;      // two 3x3 convs before the 1x1 mask output
  std::size_t feedback = 32;  // two 3x3 convs over the inverted mask
  MaskArch mask_arch = MaskArch::full;

  /// Narrow widths for single-core desk runs.
  static ArchConfig desk();
  bool operator==(const ArchConfig&) const = default;
};

inline constexpr std::size_t kOutputStride = 4;

struct ConvLayer {
  Tensor weight;  // [C_out, C_in, k, k]
  Tensor bias;    // [C_out]
  int padding = 0;
};

/// All learnable parameters of the counting network at stage t.
struct ModelState {
  ArchConfig arch;
  int stage = 1;  // counting classes learned so far; outputs have stage+1 entries

  std::vector<ConvLayer> backbone;
  std::vector<ConvLayer> trunk;
  std::vector<ConvLayer> mask_convs;
  ConvLayer mask_out;
  std::vector<ConvLayer> feedback;
  ConvLayer head;
  Tensor classifier_weight;  // [t+1, F_backbone]
  Tensor classifier_bias;    // [t+1]

  std::size_t num_outputs() const { return static_cast<std::size_t>(stage) + 1; }
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  /// Deep copy; the copy shares no storage with the original.
  ModelState clone() const;
  /// Marks every parameter as trainable or frozen.
  void set_trainable(bool flag);
};

struct ForwardOutput {
  Tensor density;      // [t+1, H/4, W/4], non-negative
  Tensor logits;       // [t+1]
  Tensor mask_prob;    // [1, H/4, W/4] in (0, 1); undefined for MaskArch::none
  Tensor feature_vec;  // [trunk] pooled regressor-trunk features
};

/// Stage-1 model: head and classifier have two outputs (background, class 1).
/// Weights are Xavier-uniform, biases zero.
ModelState build_initial(const ArchConfig& arch, std::uint64_t seed);

ForwardOutput forward(const ModelState& model, const Tensor& image);

/// Adds one head channel and one classifier row, freshly initialized; every
/// existing parameter is copied bitwise.
ModelState expand(const ModelState& model, std::uint64_t seed);

struct Selection {
  std::size_t class_id = 0;
  Tensor density;  // [1, H/4, W/4]
};

/// Channel picked by the classifier's argmax (lowest index on ties).
Selection select_density(const ForwardOutput& out);

struct CountPrediction {
  std::size_t class_id = 0;
  double count = 0.0;
};

CountPrediction predict_count(const ModelState& model, const Tensor& image);

/// Binary checkpoint: "EOCM1", u32 version, u32 stage, then records of
/// (u32 name length, name, u32 rank, u32 extents, f64 payload).
std::vector<std::uint8_t> encode_checkpoint(const ModelState& model);
ModelState decode_checkpoint(std::span<const std::uint8_t> buf);
void save_checkpoint(const std::filesystem::path& path, const ModelState& model);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace eoc
