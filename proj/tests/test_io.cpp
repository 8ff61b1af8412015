#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "eocount/io.hpp"
#include "eocount/scenegen.hpp"

using namespace eoc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Eocd1, LayoutIsLittleEndian) {
  auto bytes = encode_eocd1(Tensor::from({1, 2}, {1.0, -2.5}));
  ASSERT_EQ(bytes.size(), 5u + 4 + 8 + 16);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "EOCD1");
  EXPECT_EQ(bytes[5], 2);  // rank
  EXPECT_EQ(bytes[6], 0);
  EXPECT_EQ(bytes[9], 1);
  EXPECT_EQ(bytes[13], 2);
  // 1.0 = 0x3ff0000000000000
  EXPECT_EQ(bytes[17 + 7], 0x3f);
  EXPECT_EQ(bytes[17 + 6], 0xf0);
  EXPECT_EQ(bytes[17 + 0], 0x00);
}

TEST(Eocd1, RoundTrip) {
  auto t = Tensor::from({2, 1, 3}, {0.1, 1e-300, -7, 3.5, 1e300, 0});
  auto back = decode_eocd1(encode_eocd1(t));
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(back.to_vector(), t.to_vector());
}

TEST(Eocd1, RejectsMalformed) {
  auto good = encode_eocd1(Tensor::from({3}, {1, 2, 3}));
  auto magic = good;
  magic[4] = '2';
  EXPECT_THROW(decode_eocd1(magic), FormatError);
  auto shortp = good;
  shortp.pop_back();
  EXPECT_THROW(decode_eocd1(shortp), FormatError);
  auto longp = good;
  longp.push_back(0);
  EXPECT_THROW(decode_eocd1(longp), FormatError);
  std::vector<std::uint8_t> header_only(good.begin(), good.begin() + 7);
  EXPECT_THROW(decode_eocd1(header_only), FormatError);
  EXPECT_THROW(read_eocd1("/nonexistent/x.eocd1"), FormatError);
}

TEST(Benchmark, ExportImportRoundTrip) {
  TempDir dir("eocount_test_export");
  SplitSizes sz{3, 1, 2};
  const auto bench = make_benchmark(default_class_specs(2), sz, 4);
  const auto written = export_benchmark(dir.path, bench);
  for (const auto& p : written) EXPECT_TRUE(fs::exists(dir.path / p)) << p;

  std::ifstream idx(dir.path / "stage_1" / "train_index.txt");
  std::size_t lines = 0;
  for (std::string l; std::getline(idx, l);) ++lines;
  EXPECT_EQ(lines, bench[0].train.size());

  const auto back = import_benchmark(dir.path, 1e-3);
  ASSERT_EQ(back.size(), bench.size());
  for (std::size_t k = 0; k < bench.size(); ++k) {
    EXPECT_EQ(back[k].class_id, bench[k].class_id);
    ASSERT_EQ(back[k].train.size(), bench[k].train.size());
    ASSERT_EQ(back[k].test.size(), bench[k].test.size());
    for (std::size_t i = 0; i < bench[k].train.size(); ++i) {
      const auto& a = bench[k].train[i];
      const auto& b = back[k].train[i];
      EXPECT_EQ(a.seed, b.seed);
      EXPECT_EQ(a.class_id, b.class_id);
      EXPECT_EQ(a.count, b.count);
      EXPECT_EQ(a.image.to_vector(), b.image.to_vector());
      EXPECT_EQ(a.density.to_vector(), b.density.to_vector());
      EXPECT_EQ(a.mask.to_vector(), b.mask.to_vector());
    }
  }
}

TEST(Benchmark, ImportErrors) {
  TempDir dir("eocount_test_import");
  EXPECT_THROW(import_benchmark(dir.path, 1e-3), FormatError);

  const auto bench = make_benchmark(default_class_specs(1), SplitSizes{2, 1, 1}, 4);
  export_benchmark(dir.path, bench);
  {
    std::ofstream f(dir.path / "stage_1" / "val_index.txt", std::ios::app);
    f << "1,x,12\n";
  }
  EXPECT_THROW(import_benchmark(dir.path, 1e-3), FormatError);

  export_benchmark(dir.path, bench);
  const auto& s = bench[0].train[0];
  {
    std::ofstream f(dir.path / "stage_1" / "test_index.txt", std::ios::app);
    f << s.class_id << ',' << s.count + 3 << ',' << s.seed << '\n';
  }
  EXPECT_THROW(import_benchmark(dir.path, 1e-3), FormatError);

  export_benchmark(dir.path, bench);
  fs::remove(dir.path / "stage_1" / (std::to_string(s.seed) + "_image.eocd1"));
  EXPECT_THROW(import_benchmark(dir.path, 1e-3), FormatError);
}
