#include "eocount/model.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "eocount/io.hpp"
#include "eocount/ops.hpp"
#include "eocount/rng.hpp"

namespace eoc {

namespace {

constexpr char kCheckpointMagic[] = "EOCM1";
constexpr std::uint32_t kCheckpointVersion = 1;

void xavier_fill(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
}

ConvLayer make_conv(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng) {
  ConvLayer layer;
  layer.weight = Tensor::zeros({cout, cin, k, k}, true);
  layer.bias = Tensor::zeros({cout}, true);
  layer.padding = static_cast<int>(k / 2);
  xavier_fill(layer.weight, cin * k * k, cout * k * k, rng);
  return layer;
}

Tensor apply(const ConvLayer& layer, const Tensor& x) {
  return conv2d(x, layer.weight, layer.bias, 1, layer.padding);
}

Tensor conv_relu(const ConvLayer& layer, const Tensor& x) { return relu(apply(layer, x)); }

std::size_t fused_channels(const ArchConfig& arch) {
  switch (arch.mask_arch) {
    case MaskArch::none:
      return arch.trunk;
    case MaskArch::no_feedback:
      return arch.trunk + 1;
    case MaskArch::full:
      return arch.trunk + arch.feedback;
  }
  return arch.trunk;
}

ConvLayer clone_layer(const ConvLayer& l) { return {l.weight.clone(), l.bias.clone(), l.padding}; }

}  // namespace

ArchConfig ArchConfig::desk() {
  ArchConfig a;
  a.backbone = {8, 16, 32, 32};
  a.trunk = 32;
  a.mask = 16;
  a.feedback = 16;
  return a;
}

std::vector<std::pair<std::string, Tensor>> ModelState::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto push_conv = [&](const std::string& name, const ConvLayer& l) {
    out.emplace_back(name + ".weight", l.weight);
    out.emplace_back(name + ".bias", l.bias);
  };
  for (std::size_t i = 0; i < backbone.size(); ++i) push_conv("backbone." + std::to_string(i), backbone[i]);
  for (std::size_t i = 0; i < trunk.size(); ++i) push_conv("trunk." + std::to_string(i), trunk[i]);
  for (std::size_t i = 0; i < mask_convs.size(); ++i) push_conv("mask." + std::to_string(i), mask_convs[i]);
  if (mask_out.weight.defined()) push_conv("mask.out", mask_out);
  for (std::size_t i = 0; i < feedback.size(); ++i) push_conv("feedback." + std::to_string(i), feedback[i]);
  push_conv("head", head);
  out.emplace_back("classifier.weight", classifier_weight);
  out.emplace_back("classifier.bias", classifier_bias);
  return out;
}

std::vector<Tensor> ModelState::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

ModelState ModelState::clone() const {
  ModelState m;
  m.arch = arch;
  m.stage = stage;
  for (const auto& l : backbone) m.backbone.push_back(clone_layer(l));
  for (const auto& l : trunk) m.trunk.push_back(clone_layer(l));
  for (const auto& l : mask_convs) m.mask_convs.push_back(clone_layer(l));
  if (mask_out.weight.defined()) m.mask_out = clone_layer(mask_out);
  for (const auto& l : feedback) m.feedback.push_back(clone_layer(l));
  m.head = clone_layer(head);
  m.classifier_weight = classifier_weight.clone();
  m.classifier_bias = classifier_bias.clone();
  return m;
}

void ModelState::set_trainable(bool flag) {
  for (auto& t : parameters()) t.set_requires_grad(flag);
}

ModelState build_initial(const ArchConfig& arch, std::uint64_t seed) {
  if (arch.backbone.size() < 2) throw std::invalid_argument("backbone needs at least two blocks");
  Rng rng(seed);
  ModelState m;
  m.arch = arch;
  m.stage = 1;
  std::size_t cin = 1;
  for (auto w : arch.backbone) {
    m.backbone.push_back(make_conv(cin, w, 3, rng));
    cin = w;
  }
  const std::size_t feat = cin;
  m.trunk.push_back(make_conv(feat, arch.trunk, 3, rng));
  m.trunk.push_back(make_conv(arch.trunk, arch.trunk, 3, rng));
  if (arch.mask_arch != MaskArch::none) {
    m.mask_convs.push_back(make_conv(feat, arch.mask, 3, rng));
    m.mask_convs.push_back(make_conv(arch.mask, arch.mask, 3, rng));
    m.mask_out = make_conv(arch.mask, 1, 1, rng);
  }
  if (arch.mask_arch == MaskArch::full) {
    m.feedback.push_back(make_conv(1, arch.feedback, 3, rng));
    m.feedback.push_back(make_conv(arch.feedback, arch.feedback, 3, rng));
  }
  m.head = make_conv(fused_channels(arch), 2, 1, rng);
  m.classifier_weight = Tensor::zeros({2, feat}, true);
  xavier_fill(m.classifier_weight, feat, 2, rng);
  m.classifier_bias = Tensor::zeros({2}, true);
  return m;
}

ForwardOutput forward(const ModelState& m, const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("forward expects a [1, H, W] image");
  if (image.dim(1) % kOutputStride != 0 || image.dim(2) % kOutputStride != 0)
    throw DimensionError("image extents " + shape_str(image.shape()) + " must be divisible by 4");

  Tensor x = image;
  for (std::size_t i = 0; i < m.backbone.size(); ++i) {
    x = conv_relu(m.backbone[i], x);
    if (i < 2) x = maxpool2d(x, 2);
  }
  const Tensor features = x;

  ForwardOutput out;
  out.logits = linear(global_avgpool(features), m.classifier_weight, m.classifier_bias);

  Tensor trunk = features;
  for (const auto& l : m.trunk) trunk = conv_relu(l, trunk);
  out.feature_vec = global_avgpool(trunk);

  Tensor fused = trunk;
  if (m.arch.mask_arch != MaskArch::none) {
    Tensor mk = features;
    for (const auto& l : m.mask_convs) mk = conv_relu(l, mk);
    out.mask_prob = sigmoid(apply(m.mask_out, mk));
    if (m.arch.mask_arch == MaskArch::full) {
      Tensor fb = affine(out.mask_prob, -1.0, 1.0);
      for (const auto& l : m.feedback) fb = conv_relu(l, fb);
      fused = concat_channels(trunk, fb);
    } else {
      fused = concat_channels(trunk, out.mask_prob);
    }
  }
  // without this the fused channels carry a large constant offset, so a head
  // channel is on or off over the whole map and easily dies for good
  fused = center_channels(fused);
  out.density = relu(apply(m.head, fused));
  return out;
}

ModelState expand(const ModelState& model, std::uint64_t seed) {
  ModelState m = model.clone();
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(model.stage), 0xe4a));
  const std::size_t k_old = model.num_outputs();
  const std::size_t k_new = k_old + 1;

  const std::size_t cf = model.head.weight.dim(1);
  Tensor hw = Tensor::zeros({k_new, cf, 1, 1}, true);
  std::copy(model.head.weight.data().begin(), model.head.weight.data().end(), hw.data().begin());
  Tensor new_row = Tensor::zeros({cf});
  xavier_fill(new_row, cf, k_new, rng);
  std::copy(new_row.data().begin(), new_row.data().end(), hw.data().begin() + static_cast<std::ptrdiff_t>(k_old * cf));
  Tensor hb = Tensor::zeros({k_new}, true);
  std::copy(model.head.bias.data().begin(), model.head.bias.data().end(), hb.data().begin());
  m.head.weight = hw;
  m.head.bias = hb;

  const std::size_t feat = model.classifier_weight.dim(1);
  Tensor cw = Tensor::zeros({k_new, feat}, true);
  std::copy(model.classifier_weight.data().begin(), model.classifier_weight.data().end(), cw.data().begin());
  Tensor crow = Tensor::zeros({feat});
  xavier_fill(crow, feat, k_new, rng);
  std::copy(crow.data().begin(), crow.data().end(), cw.data().begin() + static_cast<std::ptrdiff_t>(k_old * feat));
  Tensor cb = Tensor::zeros({k_new}, true);
  std::copy(model.classifier_bias.data().begin(), model.classifier_bias.data().end(), cb.data().begin());
  m.classifier_weight = cw;
  m.classifier_bias = cb;

  m.stage = model.stage + 1;
  return m;
}

Selection select_density(const ForwardOutput& out) {
  Selection s;
  s.class_id = argmax(out.logits.data());
  s.density = slice_channels(out.density, s.class_id, s.class_id + 1);
  return s;
}

CountPrediction predict_count(const ModelState& model, const Tensor& image) {
  NoGradGuard no_grad;
  const auto sel = select_density(forward(model, image));
  double c = 0.0;
  for (double v : sel.density.data()) c += v;
  return {sel.class_id, c};
}

std::vector<std::uint8_t> encode_checkpoint(const ModelState& model) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 5);
  bytes::put_u32(out, kCheckpointVersion);
  bytes::put_u32(out, static_cast<std::uint32_t>(model.stage));
  for (const auto& [name, t] : model.named_parameters()) {
    bytes::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    bytes::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) bytes::put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) bytes::put_f64(out, v);
  }
  return out;
}

ModelState decode_checkpoint(std::span<const std::uint8_t> buf) {
  bytes::Reader r(buf);
  auto magic = r.take(5);
  if (std::memcmp(magic.data(), kCheckpointMagic, 5) != 0) throw FormatError("bad EOCM1 magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto stage = r.u32();
  if (stage < 1) throw FormatError("checkpoint stage must be >= 1");

  std::map<std::string, Tensor> params;
  while (r.remaining() > 0) {
    const auto len = r.u32();
    auto name_bytes = r.take(len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto rank = r.u32();
    if (rank == 0 || rank > 4) throw FormatError("bad rank for parameter " + name);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(r.u32());
      if (shape.back() == 0) throw FormatError("zero extent for parameter " + name);
      n *= shape.back();
    }
    if (r.remaining() < n * 8) throw FormatError("truncated payload for parameter " + name);
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    if (!params.emplace(name, Tensor::from(std::move(shape), std::move(values), true)).second)
      throw FormatError("duplicate parameter " + name);
  }

  auto take = [&](const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw FormatError("checkpoint lacks parameter " + name);
    Tensor t = it->second;
    params.erase(it);
    return t;
  };
  auto take_conv = [&](const std::string& name) {
    ConvLayer l;
    l.weight = take(name + ".weight");
    l.bias = take(name + ".bias");
    if (l.weight.rank() != 4 || l.bias.rank() != 1 || l.bias.dim(0) != l.weight.dim(0))
      throw FormatError("inconsistent conv parameter shapes for " + name);
    l.padding = static_cast<int>(l.weight.dim(2) / 2);
    return l;
  };
  auto has = [&](const std::string& name) { return params.count(name + ".weight") > 0; };

  ModelState m;
  m.stage = static_cast<int>(stage);
  m.arch.backbone.clear();
  for (std::size_t i = 0; has("backbone." + std::to_string(i)); ++i) {
    m.backbone.push_back(take_conv("backbone." + std::to_string(i)));
    m.arch.backbone.push_back(m.backbone.back().weight.dim(0));
  }
  for (std::size_t i = 0; i < 2; ++i) m.trunk.push_back(take_conv("trunk." + std::to_string(i)));
  m.arch.trunk = m.trunk.back().weight.dim(0);
  m.arch.mask_arch = MaskArch::none;
  if (has("mask.0")) {
    for (std::size_t i = 0; i < 2; ++i) m.mask_convs.push_back(take_conv("mask." + std::to_string(i)));
    m.mask_out = take_conv("mask.out");
    m.arch.mask = m.mask_convs.back().weight.dim(0);
    m.arch.mask_arch = MaskArch::no_feedback;
  }
  if (has("feedback.0")) {
    for (std::size_t i = 0; i < 2; ++i) m.feedback.push_back(take_conv("feedback." + std::to_string(i)));
    m.arch.feedback = m.feedback.back().weight.dim(0);
    m.arch.mask_arch = MaskArch::full;
  }
  m.head = take_conv("head");
  m.classifier_weight = take("classifier.weight");
  m.classifier_bias = take("classifier.bias");
  if (!params.empty()) throw FormatError("unexpected parameter " + params.begin()->first);
  if (m.backbone.size() < 2) throw FormatError("checkpoint backbone needs at least two blocks");
  if (m.head.weight.dim(0) != m.num_outputs() || m.classifier_bias.dim(0) != m.num_outputs() ||
      m.classifier_weight.dim(0) != m.num_outputs())
    throw FormatError("output count does not match stage " + std::to_string(stage));
  if (m.head.weight.dim(1) != fused_channels(m.arch))
    throw FormatError("head input width does not match the architecture");
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& model) {
  bytes::write_file(path, encode_checkpoint(model));
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(bytes::read_file(path));
}

}  // namespace eoc
