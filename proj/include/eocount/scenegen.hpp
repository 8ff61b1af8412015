#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eocount/tensor.hpp"

namespace eoc {

enum class ShapeKind { disk, square, triangle, cross, ring, diamond };

std::string to_string(ShapeKind kind);
ShapeKind parse_shape_kind(const std::string& name);

/// One member of the class set. class_id 0 is the background class.
struct ClassSpec {
  int class_id = 0;
  ShapeKind shape = ShapeKind::disk;
  std::array<double, 2> size_range{7.0, 10.0};
  std::array<double, 2> intensity_range{0.6, 0.8};
  std::array<int, 2> count_range{3, 12};
  /// Scene context: mean backdrop brightness and the direction (radians) of a
  /// linear illumination ramp of half-amplitude `ramp`.
  double backdrop = 0.2;
  double ramp_angle = 0.0;
  double ramp = 0.0;
};

/// Throws std::invalid_argument when a spec breaks the class-set rules.
void validate_class_specs(std::span<const ClassSpec> specs);

/// Background plus `counting_classes` shape classes (at most 5).
std::vector<ClassSpec> default_class_specs(int counting_classes);

struct Dot {
  double row = 0.0;
  double col = 0.0;
  bool operator==(const Dot&) const = default;
};

struct SceneParams {
  std::size_t height = 64;
  std::size_t width = 64;
  double sigma = 4.0;
  double delta = 1e-3;
};

struct Sample {
  Tensor image;    // [1, H, W] in [0, 1]
  Tensor density;  // [1, H, W], integrates to the object count
  Tensor mask;     // [1, H, W], density > delta
  std::vector<Dot> dots;
  std::size_t count = 0;  // == dots.size() for generated samples
  int class_id = 0;
  std::uint64_t seed = 0;  // also serves as the sample id
};

struct StageDataset {
  int class_id = 0;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

struct SplitSizes {
  std::size_t train = 200;
  std::size_t val = 20;
  std::size_t test = 50;
};

/// Deterministic scene for (spec, seed, params).
Sample generate_sample(const ClassSpec& spec, std::uint64_t seed, const SceneParams& params = {});

/// Sum of per-dot truncated Gaussians (radius ceil(3 sigma)), each
/// renormalized after truncation and clipping to carry mass exactly 1.
Tensor density_map(std::span<const Dot> dots, double sigma, std::size_t height, std::size_t width);

Tensor binary_mask(const Tensor& density, double delta);

/// f x f sum pooling of a [C, H, W] map; total mass is preserved.
Tensor downsample_density(const Tensor& density, int factor);

/// Horizontal mirror with probability 1/2 (always when `force`).
Sample augment_flip(const Sample& sample, std::uint64_t seed, bool force = false);

/// Seed of sample `index` of `split` (0 train, 1 val, 2 test) for a class.
/// base_seed XOR a hash of (class, split, index); indices are limited to 2^24.
std::uint64_t sample_seed(std::uint64_t base_seed, int class_id, int split, std::size_t index);

/// One StageDataset per counting class, in ascending class_id order. The
/// background class has no stage of its own; its samples join stage 1.
std::vector<StageDataset> make_benchmark(std::span<const ClassSpec> specs, SplitSizes sizes,
                                         std::uint64_t base_seed, const SceneParams& params = {});

}  // namespace eoc
