#include "eocount/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace eoc {

namespace bytes {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

std::span<const std::uint8_t> Reader::take(std::size_t n) {
  if (remaining() < n) throw FormatError("unexpected end of data");
  auto s = buf_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint32_t Reader::u32() {
  auto s = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

double Reader::f64() {
  auto s = take(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
  return std::bit_cast<double>(v);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace bytes

std::vector<std::uint8_t> encode_eocd1(const Tensor& t) {
  std::vector<std::uint8_t> out(kTensorMagic, kTensorMagic + 5);
  out.reserve(5 + 4 * (1 + t.rank()) + 8 * t.numel());
  bytes::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) bytes::put_u32(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) bytes::put_f64(out, v);
  return out;
}

Tensor decode_eocd1(std::span<const std::uint8_t> buf) {
  bytes::Reader r(buf);
  auto magic = r.take(5);
  if (std::memcmp(magic.data(), kTensorMagic, 5) != 0) throw FormatError("bad EOCD1 magic");
  const auto rank = r.u32();
  if (rank == 0 || rank > 8) throw FormatError("unsupported EOCD1 rank " + std::to_string(rank));
  Shape shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto e = r.u32();
    if (e == 0) throw FormatError("zero extent in EOCD1 header");
    shape.push_back(e);
    n *= e;
  }
  if (r.remaining() != n * 8)
    throw FormatError("EOCD1 payload holds " + std::to_string(r.remaining()) + " bytes, shape needs " +
                      std::to_string(n * 8));
  std::vector<double> values(n);
  for (auto& v : values) v = r.f64();
  return Tensor::from(std::move(shape), std::move(values));
}

void write_eocd1(const std::filesystem::path& path, const Tensor& t) {
  bytes::write_file(path, encode_eocd1(t));
}

Tensor read_eocd1(const std::filesystem::path& path) { return decode_eocd1(bytes::read_file(path)); }

namespace {

constexpr std::array<const char*, 3> kSplits{"train", "val", "test"};

}  // namespace

std::vector<std::filesystem::path> export_benchmark(const std::filesystem::path& dir,
                                                    std::span<const StageDataset> stages) {
  namespace fs = std::filesystem;
  std::vector<fs::path> written;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    const fs::path rel_stage = "stage_" + std::to_string(k + 1);
    fs::create_directories(dir / rel_stage);
    const std::array<const std::vector<Sample>*, 3> splits{&stages[k].train, &stages[k].val,
                                                           &stages[k].test};
    for (std::size_t s = 0; s < 3; ++s) {
      std::ostringstream index;
      for (const auto& sample : *splits[s]) {
        const std::string stem = std::to_string(sample.seed);
        write_eocd1(dir / rel_stage / (stem + "_image.eocd1"), sample.image);
        write_eocd1(dir / rel_stage / (stem + "_density.eocd1"), sample.density);
        written.push_back(rel_stage / (stem + "_image.eocd1"));
        written.push_back(rel_stage / (stem + "_density.eocd1"));
        index << sample.class_id << ',' << sample.count << ',' << sample.seed << '\n';
      }
      const fs::path idx = rel_stage / (std::string(kSplits[s]) + "_index.txt");
      const std::string text = index.str();
      bytes::write_file(dir / idx, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
      written.push_back(idx);
    }
  }
  return written;
}

std::vector<StageDataset> import_benchmark(const std::filesystem::path& dir, double delta) {
  namespace fs = std::filesystem;
  std::vector<StageDataset> stages;
  for (std::size_t k = 1;; ++k) {
    const fs::path stage_dir = dir / ("stage_" + std::to_string(k));
    if (!fs::is_directory(stage_dir)) break;
    StageDataset stage;
    std::array<std::vector<Sample>*, 3> splits{&stage.train, &stage.val, &stage.test};
    bool class_set = false;
    for (std::size_t s = 0; s < 3; ++s) {
      std::ifstream in(stage_dir / (std::string(kSplits[s]) + "_index.txt"));
      if (!in) throw FormatError("missing index file in " + stage_dir.string());
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string cls, cnt, seed;
        if (!std::getline(fields, cls, ',') || !std::getline(fields, cnt, ',') ||
            !std::getline(fields, seed))
          throw FormatError("malformed index line '" + line + "'");
        Sample sample;
        try {
          sample.class_id = std::stoi(cls);
          sample.count = std::stoul(cnt);
          sample.seed = std::stoull(seed);
        } catch (const std::logic_error&) {
          throw FormatError("malformed index line '" + line + "'");
        }
        sample.image = read_eocd1(stage_dir / (seed + "_image.eocd1"));
        sample.density = read_eocd1(stage_dir / (seed + "_density.eocd1"));
        sample.mask = binary_mask(sample.density, delta);
        double mass = 0.0;
        for (double v : sample.density.data()) mass += v;
        if (std::llround(mass) != static_cast<long long>(sample.count))
          throw FormatError("density mass disagrees with indexed count for sample " + seed);
        if (!class_set && sample.class_id != 0) {
          stage.class_id = sample.class_id;
          class_set = true;
        }
        splits[s]->push_back(std::move(sample));
      }
    }
    stages.push_back(std::move(stage));
  }
  if (stages.empty()) throw FormatError("no stage directories under " + dir.string());
  return stages;
}

}  // namespace eoc
