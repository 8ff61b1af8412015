#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "eocount/scenegen.hpp"
#include "eocount/tensor.hpp"

namespace eoc {

/// Malformed or inconsistent on-disk data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kTensorMagic[] = "EOCD1";

// Little-endian primitives shared by the tensor and checkpoint formats.
namespace bytes {
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> buf) : buf_(buf) {}
  std::uint32_t u32();
  double f64();
  std::span<const std::uint8_t> take(std::size_t n);
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);
}  // namespace bytes

/// "EOCD1", u32 rank, u32 extents, row-major little-endian f64 payload.
std::vector<std::uint8_t> encode_eocd1(const Tensor& t);
Tensor decode_eocd1(std::span<const std::uint8_t> buf);
void write_eocd1(const std::filesystem::path& path, const Tensor& t);
Tensor read_eocd1(const std::filesystem::path& path);

/// Dataset layout: one directory per stage (stage_<k>); per sample
/// <seed>_image.eocd1 and <seed>_density.eocd1; per split an index file
/// <split>_index.txt with lines "class_id,dot_count,seed".
/// Returns every path written, relative to `dir`.
std::vector<std::filesystem::path> export_benchmark(const std::filesystem::path& dir,
                                                    std::span<const StageDataset> stages);

/// Reads an exported benchmark. Dots are not stored; Sample::count comes from
/// the index and the mask is recomputed with `delta`.
std::vector<StageDataset> import_benchmark(const std::filesystem::path& dir, double delta);

}  // namespace eoc
