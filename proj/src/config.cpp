#include "eocount/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace eoc {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> parse_widths(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_integer<std::size_t>(key, trim(item)));
  return out;
}

std::string real_str(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"method", [](auto& c, auto&, auto& v) { c.method = MethodSpec::parse(v); }},
      {"bench.classes", [](auto& c, auto& k, auto& v) { c.bench.classes = parse_integer<int>(k, v); }},
      {"bench.train", [](auto& c, auto& k, auto& v) { c.bench.sizes.train = parse_integer<std::size_t>(k, v); }},
      {"bench.val", [](auto& c, auto& k, auto& v) { c.bench.sizes.val = parse_integer<std::size_t>(k, v); }},
      {"bench.test", [](auto& c, auto& k, auto& v) { c.bench.sizes.test = parse_integer<std::size_t>(k, v); }},
      {"bench.image_size", [](auto& c, auto& k, auto& v) { c.bench.image_size = parse_integer<std::size_t>(k, v); }},
      {"bench.base_seed", [](auto& c, auto& k, auto& v) { c.bench.base_seed = parse_integer<std::uint64_t>(k, v); }},
      {"train.epochs", [](auto& c, auto& k, auto& v) { c.train.epochs = parse_integer<int>(k, v); }},
      {"train.batch_size", [](auto& c, auto& k, auto& v) { c.train.batch_size = parse_integer<std::size_t>(k, v); }},
      {"train.lr", [](auto& c, auto& k, auto& v) { c.train.lr = parse_real(k, v); }},
      {"train.lr_decay_every", [](auto& c, auto& k, auto& v) { c.train.lr_decay_every = parse_integer<int>(k, v); }},
      {"train.lr_decay_factor", [](auto& c, auto& k, auto& v) { c.train.lr_decay_factor = parse_real(k, v); }},
      {"train.weight_decay", [](auto& c, auto& k, auto& v) { c.train.weight_decay = parse_real(k, v); }},
      {"train.lambda", [](auto& c, auto& k, auto& v) { c.train.lambda = parse_real(k, v); }},
      {"train.delta", [](auto& c, auto& k, auto& v) { c.train.delta = parse_real(k, v); }},
      {"train.memory", [](auto& c, auto& k, auto& v) { c.train.memory = parse_integer<std::size_t>(k, v); }},
      {"train.seed", [](auto& c, auto& k, auto& v) { c.train.seed = parse_integer<std::uint64_t>(k, v); }},
      {"train.gate_with_truth", [](auto& c, auto& k, auto& v) { c.train.gate_with_truth = parse_bool(k, v); }},
      {"arch.backbone", [](auto& c, auto& k, auto& v) { c.arch.backbone = parse_widths(k, v); }},
      {"arch.trunk", [](auto& c, auto& k, auto& v) { c.arch.trunk = parse_integer<std::size_t>(k, v); }},
      {"arch.mask", [](auto& c, auto& k, auto& v) { c.arch.mask = parse_integer<std::size_t>(k, v); }},
      {"arch.feedback", [](auto& c, auto& k, auto& v) { c.arch.feedback = parse_integer<std::size_t>(k, v); }},
  };
  return table;
}

}  // namespace

MethodSpec MethodSpec::parse(const std::string& text) {
  MethodSpec m;
  if (text == "full") return m;
  if (text == "ft") {
    m.method = Method::ft;
    return m;
  }
  if (text == "joint") {
    m.method = Method::joint;
    return m;
  }
  const std::string prefix = "ablation:";
  if (text.rfind(prefix, 0) == 0) {
    m.ablation = true;
    try {
      m.variant = parse_mask_variant(text.substr(prefix.size()));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("method: ") + e.what());
    }
    return m;
  }
  throw ConfigError("method: expected full, ft, joint or ablation:<variant>, got '" + text + "'");
}

std::string MethodSpec::to_string() const {
  if (ablation) return "ablation:" + eoc::to_string(variant);
  switch (method) {
    case Method::ft:
      return "ft";
    case Method::joint:
      return "joint";
    case Method::full:
      break;
  }
  return "full";
}

ExperimentConfig ExperimentConfig::for_profile(const std::string& profile) {
  ExperimentConfig c;
  c.profile = profile;
  if (profile == "desk") {
    c.train = TrainConfig::desk();
    c.arch = ArchConfig::desk();
  } else if (profile == "paper") {
    c.train = TrainConfig::paper();
    c.arch = ArchConfig{};
  } else {
    throw ConfigError("profile: expected desk or paper, got '" + profile + "'");
  }
  return c;
}

void ExperimentConfig::validate() const {
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  if (bench.classes < 1 || bench.classes > 5) throw ConfigError("bench.classes must lie in [1, 5]");
  if (bench.sizes.train < 1 || bench.sizes.test < 1) throw ConfigError("bench.train and bench.test must be >= 1");
  if (bench.image_size < 32 || bench.image_size % kOutputStride != 0)
    throw ConfigError("bench.image_size must be a multiple of " + std::to_string(kOutputStride) + " and >= 32");
  if (arch.backbone.size() != 4) throw ConfigError("arch.backbone needs exactly 4 widths");
  for (auto w : arch.backbone)
    if (w == 0) throw ConfigError("arch.backbone widths must be >= 1");
  if (arch.trunk == 0 || arch.mask == 0 || arch.feedback == 0)
    throw ConfigError("arch widths must be >= 1");
}

std::string ExperimentConfig::to_text() const {
  std::map<std::string, std::string> kv;
  kv["profile"] = profile;
  kv["method"] = method.to_string();
  kv["bench.classes"] = std::to_string(bench.classes);
  kv["bench.train"] = std::to_string(bench.sizes.train);
  kv["bench.val"] = std::to_string(bench.sizes.val);
  kv["bench.test"] = std::to_string(bench.sizes.test);
  kv["bench.image_size"] = std::to_string(bench.image_size);
  kv["bench.base_seed"] = std::to_string(bench.base_seed);
  kv["train.epochs"] = std::to_string(train.epochs);
  kv["train.batch_size"] = std::to_string(train.batch_size);
  kv["train.lr"] = real_str(train.lr);
  kv["train.lr_decay_every"] = std::to_string(train.lr_decay_every);
  kv["train.lr_decay_factor"] = real_str(train.lr_decay_factor);
  kv["train.weight_decay"] = real_str(train.weight_decay);
  kv["train.lambda"] = real_str(train.lambda);
  kv["train.delta"] = real_str(train.delta);
  kv["train.memory"] = std::to_string(train.memory);
  kv["train.seed"] = std::to_string(train.seed);
  kv["train.gate_with_truth"] = train.gate_with_truth ? "true" : "false";
  std::string widths;
  for (std::size_t i = 0; i < arch.backbone.size(); ++i)
    widths += (i ? "," : "") + std::to_string(arch.backbone[i]);
  kv["arch.backbone"] = widths;
  kv["arch.trunk"] = std::to_string(arch.trunk);
  kv["arch.mask"] = std::to_string(arch.mask);
  kv["arch.feedback"] = std::to_string(arch.feedback);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string ExperimentConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_text()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<ClassSpec> ExperimentConfig::class_specs() const { return default_class_specs(bench.classes); }

SceneParams ExperimentConfig::scene_params() const {
  SceneParams p;
  p.height = bench.image_size;
  p.width = bench.image_size;
  p.delta = train.delta;
  return p;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second) throw ConfigError("duplicate key '" + key + "'");
  }
  return kv;
}

ExperimentConfig make_config(const std::map<std::string, std::string>& kv,
                             const std::optional<std::string>& profile_override) {
  std::string profile = "desk";
  if (auto it = kv.find("profile"); it != kv.end()) profile = it->second;
  if (profile_override) profile = *profile_override;
  ExperimentConfig c = ExperimentConfig::for_profile(profile);
  const auto& table = setters();
  for (const auto& [k, v] : kv) {
    if (k == "profile") continue;
    auto it = table.find(k);
    if (it == table.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second(c, k, v);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config_file(const std::string& path, const std::optional<std::string>& profile_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return make_config(parse_key_values(ss.str()), profile_override);
}

}  // namespace eoc
