#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "eocount/io.hpp"
#include "eocount/model.hpp"
#include "eocount/ops.hpp"
#include "eocount/rng.hpp"

using namespace eoc;

namespace {

ArchConfig tiny_arch(MaskArch m = MaskArch::full) {
  ArchConfig a;
  a.backbone = {4, 6, 8, 8};
  a.trunk = 8;
  a.mask = 4;
  a.feedback = 4;
  a.mask_arch = m;
  return a;
}

Tensor random_image(std::uint64_t seed, std::size_t h = 32, std::size_t w = 32) {
  Rng rng(seed);
  std::vector<double> v(h * w);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from({1, h, w}, v);
}

std::vector<double> channels(const Tensor& t, std::size_t begin, std::size_t end) {
  return slice_channels(t, begin, end).to_vector();
}

}  // namespace

TEST(BuildInitial, TwoOutputs) {
  auto m = build_initial(tiny_arch(), 1);
  EXPECT_EQ(m.stage, 1);
  EXPECT_EQ(m.head.weight.dim(0), 2u);
  EXPECT_EQ(m.classifier_weight.dim(0), 2u);
  EXPECT_EQ(m.classifier_bias.numel(), 2u);
}

TEST(BuildInitial, SameSeedSameParameters) {
  auto a = build_initial(tiny_arch(), 5);
  auto b = build_initial(tiny_arch(), 5);
  auto c = build_initial(tiny_arch(), 6);
  EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
  EXPECT_NE(encode_checkpoint(a), encode_checkpoint(c));
}

TEST(BuildInitial, XavierBoundsAndZeroBias) {
  auto m = build_initial(tiny_arch(), 2);
  for (const auto& [name, t] : m.named_parameters()) {
    if (t.rank() == 1) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
      continue;
    }
    std::size_t fan_in = t.dim(1), fan_out = t.dim(0);
    if (t.rank() == 4) {
      fan_in *= t.dim(2) * t.dim(3);
      fan_out *= t.dim(2) * t.dim(3);
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double v : t.data()) EXPECT_LE(std::abs(v), bound) << name;
  }
}

TEST(Forward, Shapes) {
  auto m = build_initial(tiny_arch(), 1);
  auto out = forward(m, random_image(1, 64, 64));
  EXPECT_EQ(out.density.shape(), (Shape{2, 16, 16}));
  EXPECT_EQ(out.logits.shape(), (Shape{2}));
  EXPECT_EQ(out.mask_prob.shape(), (Shape{1, 16, 16}));
  EXPECT_EQ(out.feature_vec.shape(), (Shape{8}));
  auto m3 = expand(expand(m, 1), 2);
  auto o3 = forward(m3, random_image(2, 32, 48));
  EXPECT_EQ(o3.density.shape(), (Shape{4, 8, 12}));
  EXPECT_EQ(o3.logits.numel(), 4u);
}

TEST(Forward, RejectsBadSizes) {
  auto m = build_initial(tiny_arch(), 1);
  EXPECT_THROW(forward(m, Tensor::zeros({1, 30, 32})), DimensionError);
  EXPECT_THROW(forward(m, Tensor::zeros({32, 32})), DimensionError);
}

TEST(Forward, ZeroImagePropagatesBiases) {
  auto m = build_initial(tiny_arch(), 3);
  m.classifier_bias[0] = 0.25;
  m.classifier_bias[1] = -1.5;
  m.mask_out.bias[0] = 0.8;
  auto out = forward(m, Tensor::zeros({1, 32, 32}));
  EXPECT_EQ(out.logits.to_vector(), (std::vector<double>{0.25, -1.5}));
  const double q = 1.0 / (1.0 + std::exp(-0.8));
  for (double v : out.mask_prob.data()) EXPECT_NEAR(v, q, 1e-15);
  for (double v : out.density.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, BitwiseRepeatable) {
  auto m = build_initial(tiny_arch(), 4);
  auto x = random_image(9);
  auto a = forward(m, x), b = forward(m, x);
  EXPECT_EQ(a.density.to_vector(), b.density.to_vector());
  EXPECT_EQ(a.logits.to_vector(), b.logits.to_vector());
  EXPECT_EQ(a.mask_prob.to_vector(), b.mask_prob.to_vector());
  Tape::current().clear();
}

TEST(Forward, RangeProperties) {
  auto m = build_initial(tiny_arch(), 7);
  for (std::uint64_t s = 0; s < 10; ++s) {
    NoGradGuard g;
    auto x = random_image(s);
    for (auto& v : x.data()) v = (v - 0.5) * 40.0;  // far outside the image range
    auto out = forward(m, x);
    for (double v : out.density.data()) EXPECT_GE(v, 0.0);
    for (double v : out.mask_prob.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Expand, OldOutputsBitwiseUnchanged) {
  NoGradGuard g;
  auto m = build_initial(tiny_arch(), 11);
  for (int step = 0; step < 3; ++step) {
    auto e = expand(m, 100 + static_cast<std::uint64_t>(step));
    EXPECT_EQ(e.stage, m.stage + 1);
    EXPECT_EQ(e.head.weight.dim(0), m.num_outputs() + 1);
    for (std::uint64_t s = 0; s < 5; ++s) {
      auto x = random_image(s * 7 + static_cast<std::uint64_t>(step));
      auto a = forward(m, x), b = forward(e, x);
      EXPECT_EQ(channels(b.density, 0, m.num_outputs()), a.density.to_vector());
      auto lb = b.logits.to_vector();
      lb.pop_back();
      EXPECT_EQ(lb, a.logits.to_vector());
      EXPECT_EQ(b.mask_prob.to_vector(), a.mask_prob.to_vector());
    }
    m = e;
  }
}

TEST(Expand, DoesNotAliasTheOldModel) {
  auto m = build_initial(tiny_arch(), 1);
  auto e = expand(m, 2);
  const double before = m.backbone[0].weight[0];
  e.backbone[0].weight[0] += 1.0;
  EXPECT_EQ(m.backbone[0].weight[0], before);
}

TEST(SelectDensity, ArgmaxAndTies) {
  ForwardOutput out;
  out.density = Tensor::from({3, 1, 2}, {1, 2, 3, 4, 5, 6});
  out.logits = Tensor::from({3}, {0, 0, 1});
  auto s = select_density(out);
  EXPECT_EQ(s.class_id, 2u);
  EXPECT_EQ(s.density.to_vector(), (std::vector<double>{5, 6}));
  out.logits = Tensor::from({3}, {2, 2, 1});
  EXPECT_EQ(select_density(out).class_id, 0u);
  EXPECT_EQ(select_density(out).density.to_vector(), (std::vector<double>{1, 2}));
}

TEST(PredictCount, MatchesSelectedChannelSum) {
  auto m = build_initial(tiny_arch(), 5);
  for (auto& v : m.head.bias.data()) v = 0.1;
  auto x = random_image(3);
  auto p = predict_count(m, x);
  NoGradGuard g;
  auto out = forward(m, x);
  const auto sel = select_density(out);
  double s = 0;
  for (double v : sel.density.data()) s += v;
  EXPECT_EQ(p.class_id, sel.class_id);
  EXPECT_EQ(p.count, s);
  EXPECT_GE(p.count, 0.0);
}

TEST(PredictCount, ZeroHeadGivesZero) {
  auto m = build_initial(tiny_arch(), 5);
  for (auto& v : m.head.weight.data()) v = 0.0;
  for (auto& v : m.head.bias.data()) v = 0.0;
  EXPECT_EQ(predict_count(m, random_image(1)).count, 0.0);
}

TEST(MaskArch, VariantsDifferInSize) {
  const auto full = build_initial(tiny_arch(MaskArch::full), 1).parameter_count();
  const auto nofb = build_initial(tiny_arch(MaskArch::no_feedback), 1).parameter_count();
  const auto none = build_initial(tiny_arch(MaskArch::none), 1).parameter_count();
  EXPECT_LT(none, nofb);
  EXPECT_LT(nofb, full);
  auto m = build_initial(tiny_arch(MaskArch::none), 1);
  auto out = forward(m, random_image(1));
  EXPECT_FALSE(out.mask_prob.defined());
  EXPECT_EQ(out.density.dim(0), 2u);
}

TEST(Checkpoint, RoundTripBitwise) {
  for (auto ma : {MaskArch::full, MaskArch::no_feedback, MaskArch::none}) {
    auto m = expand(build_initial(tiny_arch(ma), 3), 4);
    const auto bytes = encode_checkpoint(m);
    ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "EOCM1");
    auto back = decode_checkpoint(bytes);
    EXPECT_EQ(back.stage, 2);
    EXPECT_EQ(back.arch.mask_arch, ma);
    EXPECT_EQ(encode_checkpoint(back), bytes);
    auto x = random_image(8);
    NoGradGuard g;
    EXPECT_EQ(forward(back, x).density.to_vector(), forward(m, x).density.to_vector());
  }
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "eocount_test_ckpt.eocm1";
  auto m = build_initial(tiny_arch(), 3);
  save_checkpoint(path, m);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), encode_checkpoint(m));
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruption) {
  const auto bytes = encode_checkpoint(build_initial(tiny_arch(), 3));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_checkpoint(extra), FormatError);
  auto version = bytes;
  version[5] = 9;
  EXPECT_THROW(decode_checkpoint(version), FormatError);
  auto stage = bytes;
  stage[9] = 2;  // stage 2 but only two outputs
  EXPECT_THROW(decode_checkpoint(stage), FormatError);
}
