#include "eocount/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

#include "eocount/rng.hpp"

namespace eoc {

namespace {

constexpr std::array<const char*, 6> kShapeNames{"disk", "square", "triangle", "cross", "ring",
                                                 "diamond"};

// Inside test in object-local coordinates (dy, dx) relative to the centroid,
// for an object of half-extent a.
bool inside(ShapeKind kind, double dy, double dx, double a) {
  switch (kind) {
    case ShapeKind::disk:
      return dy * dy + dx * dx <= a * a;
    case ShapeKind::square:
      return std::abs(dy) <= 0.8 * a && std::abs(dx) <= 0.8 * a;
    case ShapeKind::triangle: {
      // Apex up; vertices placed so the centroid sits at the origin.
      const double h = 1.8 * a;
      const double top = -2.0 * h / 3.0;
      if (dy < top || dy > h / 3.0) return false;
      return std::abs(dx) <= a * (dy - top) / h;
    }
    case ShapeKind::cross: {
      const double arm = a / 3.0;
      return (std::abs(dy) <= a && std::abs(dx) <= arm) ||
             (std::abs(dx) <= a && std::abs(dy) <= arm);
    }
    case ShapeKind::ring: {
      const double r2 = dy * dy + dx * dx;
      return r2 <= a * a && r2 >= 0.3 * a * a;
    }
    case ShapeKind::diamond:
      return std::abs(dy) + std::abs(dx) <= a;
  }
  return false;
}

// Bilinearly interpolated value noise on a coarse lattice.
void add_value_noise(Rng& rng, std::span<double> img, std::size_t h, std::size_t w,
                     double amplitude) {
  constexpr std::size_t kGrid = 9;
  std::array<double, kGrid * kGrid> lattice{};
  for (auto& v : lattice) v = rng.uniform();
  const double sy = static_cast<double>(kGrid - 1) / static_cast<double>(h - 1);
  const double sx = static_cast<double>(kGrid - 1) / static_cast<double>(w - 1);
  for (std::size_t i = 0; i < h; ++i) {
    const double gy = static_cast<double>(i) * sy;
    const auto y0 = std::min(static_cast<std::size_t>(gy), kGrid - 2);
    const double fy = gy - static_cast<double>(y0);
    for (std::size_t j = 0; j < w; ++j) {
      const double gx = static_cast<double>(j) * sx;
      const auto x0 = std::min(static_cast<std::size_t>(gx), kGrid - 2);
      const double fx = gx - static_cast<double>(x0);
      const double v00 = lattice[y0 * kGrid + x0], v01 = lattice[y0 * kGrid + x0 + 1];
      const double v10 = lattice[(y0 + 1) * kGrid + x0], v11 = lattice[(y0 + 1) * kGrid + x0 + 1];
      const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
      img[i * w + j] += amplitude * v;
    }
  }
}

void add_backdrop(std::span<double> img, std::size_t h, std::size_t w, const ClassSpec& spec) {
  const double cy = static_cast<double>(h - 1) / 2.0, cx = static_cast<double>(w - 1) / 2.0;
  const double uy = std::sin(spec.ramp_angle) / cy, ux = std::cos(spec.ramp_angle) / cx;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double t = (static_cast<double>(i) - cy) * uy + (static_cast<double>(j) - cx) * ux;
      img[i * w + j] += spec.backdrop + spec.ramp * t / std::sqrt(2.0);
    }
}

// Soft isotropic blobs: no hard edge, so they match none of the class shapes.
void add_distractors(Rng& rng, std::span<double> img, std::size_t h, std::size_t w) {
  const auto n = rng.uniform_int(0, 3);
  for (std::int64_t k = 0; k < n; ++k) {
    const double cy = rng.uniform(0.0, static_cast<double>(h - 1));
    const double cx = rng.uniform(0.0, static_cast<double>(w - 1));
    const double s = rng.uniform(2.0, 3.5);
    const double amp = rng.uniform(0.15, 0.35);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double d2 = (static_cast<double>(i) - cy) * (static_cast<double>(i) - cy) +
                          (static_cast<double>(j) - cx) * (static_cast<double>(j) - cx);
        img[i * w + j] += amp * std::exp(-d2 / (2.0 * s * s));
      }
  }
}

void render_object(std::span<double> img, std::size_t h, std::size_t w, ShapeKind kind, Dot c,
                   double size, double intensity) {
  const double a = size / 2.0;
  const auto lo_r = static_cast<long>(std::floor(c.row - a - 1));
  const auto hi_r = static_cast<long>(std::ceil(c.row + a + 1));
  const auto lo_c = static_cast<long>(std::floor(c.col - a - 1));
  const auto hi_c = static_cast<long>(std::ceil(c.col + a + 1));
  static constexpr std::array<double, 2> kSub{-0.25, 0.25};
  for (long i = std::max(0L, lo_r); i <= std::min(static_cast<long>(h) - 1, hi_r); ++i)
    for (long j = std::max(0L, lo_c); j <= std::min(static_cast<long>(w) - 1, hi_c); ++j) {
      int hits = 0;
      for (double oy : kSub)
        for (double ox : kSub)
          hits += inside(kind, static_cast<double>(i) + oy - c.row, static_cast<double>(j) + ox - c.col,
                         a);
      if (hits == 0) continue;
      const double cover = hits / 4.0;
      double& px = img[static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j)];
      px = (1.0 - cover) * px + cover * intensity;
    }
}

}  // namespace

std::string to_string(ShapeKind kind) { return kShapeNames[static_cast<std::size_t>(kind)]; }

ShapeKind parse_shape_kind(const std::string& name) {
  for (std::size_t i = 0; i < kShapeNames.size(); ++i)
    if (name == kShapeNames[i]) return static_cast<ShapeKind>(i);
  throw std::invalid_argument("unknown shape kind '" + name + "'");
}

void validate_class_specs(std::span<const ClassSpec> specs) {
  std::set<int> ids;
  std::set<ShapeKind> shapes;
  bool has_background = false;
  for (const auto& s : specs) {
    if (s.class_id < 0) throw std::invalid_argument("class_id must be >= 0");
    if (!ids.insert(s.class_id).second)
      throw std::invalid_argument("duplicate class_id " + std::to_string(s.class_id));
    if (!shapes.insert(s.shape).second)
      throw std::invalid_argument("classes must have distinct shape kinds");
    if (s.class_id == 0) {
      has_background = true;
      if (s.count_range[0] != 0 || s.count_range[1] != 0)
        throw std::invalid_argument("background class must have count_range [0,0]");
    } else if (s.count_range[0] < 1 || s.count_range[1] < s.count_range[0]) {
      throw std::invalid_argument("class " + std::to_string(s.class_id) +
                                  " needs count_range with min >= 1 and max >= min");
    }
    if (s.size_range[0] <= 0 || s.size_range[1] < s.size_range[0])
      throw std::invalid_argument("invalid size_range");
    if (s.intensity_range[0] < 0 || s.intensity_range[1] > 1 ||
        s.intensity_range[1] < s.intensity_range[0])
      throw std::invalid_argument("invalid intensity_range");
  }
  if (!has_background || specs.size() < 2)
    throw std::invalid_argument("need a background class and at least one counting class");
  if (*ids.rbegin() != static_cast<int>(ids.size()) - 1)
    throw std::invalid_argument("class ids must be contiguous from 0");
}

std::vector<ClassSpec> default_class_specs(int counting_classes) {
  if (counting_classes < 1 || counting_classes > 5)
    throw std::invalid_argument("default class set supports 1..5 counting classes");
  // Each class has its own scene context (backdrop level, ramp direction), the
  // way real counting categories come from different kinds of scenes.
  std::vector<ClassSpec> all{
      {0, ShapeKind::diamond, {8, 11}, {0.6, 0.8}, {0, 0}},
      {1, ShapeKind::disk, {4, 6}, {0.6, 0.75}, {6, 20}},
      {2, ShapeKind::square, {7, 10}, {0.7, 0.85}, {3, 12}},
      {3, ShapeKind::triangle, {11, 14}, {0.85, 1.0}, {2, 8}},
      {4, ShapeKind::cross, {8, 11}, {0.02, 0.15}, {3, 12}},
      {5, ShapeKind::ring, {8, 11}, {0.75, 0.95}, {3, 12}},
  };
  for (auto& c : all) {
    c.backdrop = 0.06 + 0.04 * c.class_id;
    c.ramp_angle = c.class_id * std::numbers::pi / 3.0;
    c.ramp = 0.15;
  }
  all[4].backdrop = 0.7;  // dark crosses on a bright field
  all.resize(static_cast<std::size_t>(counting_classes) + 1);
  return all;
}

Tensor density_map(std::span<const Dot> dots, double sigma, std::size_t height, std::size_t width) {
  if (!(sigma > 0.0)) throw std::invalid_argument("density_map: sigma must be positive");
  Tensor out = Tensor::zeros({1, height, width});
  auto d = out.data();
  const long radius = static_cast<long>(std::ceil(3.0 * sigma));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> window;
  for (const auto& dot : dots) {
    if (!(dot.row >= 0.0 && dot.row <= static_cast<double>(height - 1) && dot.col >= 0.0 &&
          dot.col <= static_cast<double>(width - 1)))
      throw std::out_of_range("density_map: dot outside image bounds");
    const long cr = std::lround(dot.row), cc = std::lround(dot.col);
    const long r0 = std::max(0L, cr - radius), r1 = std::min(static_cast<long>(height) - 1, cr + radius);
    const long c0 = std::max(0L, cc - radius), c1 = std::min(static_cast<long>(width) - 1, cc + radius);
    window.clear();
    double mass = 0.0;
    for (long i = r0; i <= r1; ++i)
      for (long j = c0; j <= c1; ++j) {
        const double dy = static_cast<double>(i) - dot.row, dx = static_cast<double>(j) - dot.col;
        const double v = std::exp(-(dy * dy + dx * dx) * inv);
        window.push_back(v);
        mass += v;
      }
    std::size_t k = 0;
    for (long i = r0; i <= r1; ++i)
      for (long j = c0; j <= c1; ++j)
        d[static_cast<std::size_t>(i) * width + static_cast<std::size_t>(j)] += window[k++] / mass;
  }
  return out;
}

Tensor binary_mask(const Tensor& density, double delta) {
  if (delta < 0.0) throw std::invalid_argument("binary_mask: delta must be >= 0");
  Tensor out = Tensor::zeros(density.shape());
  auto m = out.data();
  const auto d = density.data();
  for (std::size_t i = 0; i < d.size(); ++i) m[i] = d[i] > delta ? 1.0 : 0.0;
  return out;
}

Tensor downsample_density(const Tensor& density, int factor) {
  if (density.rank() != 3) throw DimensionError("downsample_density expects [C, H, W]");
  if (factor < 1) throw std::invalid_argument("downsample_density: factor must be >= 1");
  const std::size_t c = density.dim(0), h = density.dim(1), w = density.dim(2);
  const auto f = static_cast<std::size_t>(factor);
  if (h % f != 0 || w % f != 0)
    throw DimensionError("downsample_density: " + shape_str(density.shape()) +
                         " not divisible by " + std::to_string(factor));
  const std::size_t ho = h / f, wo = w / f;
  Tensor out = Tensor::zeros({c, ho, wo});
  auto o = out.data();
  const auto in = density.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) o[(ch * ho + i / f) * wo + j / f] += in[(ch * h + i) * w + j];
  return out;
}

namespace {

Tensor mirror(const Tensor& t) {
  Tensor out = t.detach();
  const std::size_t w = t.dim(t.rank() - 1);
  auto d = out.data();
  for (std::size_t row = 0; row < d.size() / w; ++row)
    std::reverse(d.begin() + static_cast<std::ptrdiff_t>(row * w),
                 d.begin() + static_cast<std::ptrdiff_t>((row + 1) * w));
  return out;
}

}  // namespace

Sample augment_flip(const Sample& sample, std::uint64_t seed, bool force) {
  Sample out = sample;
  Rng rng(seed);
  if (!force && !rng.coin()) return out;
  const double w = static_cast<double>(sample.image.dim(sample.image.rank() - 1));
  out.image = mirror(sample.image);
  out.density = mirror(sample.density);
  out.mask = mirror(sample.mask);
  for (auto& d : out.dots) d.col = w - 1.0 - d.col;
  return out;
}

Sample generate_sample(const ClassSpec& spec, std::uint64_t seed, const SceneParams& params) {
  const std::size_t h = params.height, w = params.width;
  if (h < 32 || w < 32) throw std::invalid_argument("generate_sample: image must be at least 32x32");
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(spec.class_id)));

  Sample s;
  s.class_id = spec.class_id;
  s.seed = seed;
  s.image = Tensor::zeros({1, h, w});
  auto img = s.image.data();
  add_backdrop(img, h, w, spec);
  add_value_noise(rng, img, h, w, 0.12);
  add_distractors(rng, img, h, w);

  const auto n = spec.class_id == 0 ? 0 : rng.uniform_int(spec.count_range[0], spec.count_range[1]);
  for (std::int64_t k = 0; k < n; ++k) {
    const double size = rng.uniform(spec.size_range[0], spec.size_range[1]);
    const double margin = size / 2.0;
    // centers on a 1/256 px grid so mirroring is exact
    auto coord = [&](std::size_t extent) {
      return std::round(rng.uniform(margin, static_cast<double>(extent - 1) - margin) * 256.0) / 256.0;
    };
    const double row = coord(h);
    const Dot c{row, coord(w)};
    const double intensity = rng.uniform(spec.intensity_range[0], spec.intensity_range[1]);
    render_object(img, h, w, spec.shape, c, size, intensity);
    s.dots.push_back(c);
  }
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);

  s.count = s.dots.size();
  s.density = density_map(s.dots, params.sigma, h, w);
  s.mask = binary_mask(s.density, params.delta);
  return s;
}

std::uint64_t sample_seed(std::uint64_t base_seed, int class_id, int split, std::size_t index) {
  if (index >= (std::size_t{1} << 24)) throw std::out_of_range("split index too large");
  const auto block = static_cast<std::uint64_t>(class_id) * 3 + static_cast<std::uint64_t>(split);
  return base_seed ^ mix64((block << 24) + index);
}

std::vector<StageDataset> make_benchmark(std::span<const ClassSpec> specs, SplitSizes sizes,
                                         std::uint64_t base_seed, const SceneParams& params) {
  validate_class_specs(specs);
  std::vector<ClassSpec> ordered(specs.begin(), specs.end());
  std::sort(ordered.begin(), ordered.end(),
            [](const ClassSpec& a, const ClassSpec& b) { return a.class_id < b.class_id; });

  auto fill = [&](const ClassSpec& spec, StageDataset& stage) {
    const std::array<std::size_t, 3> n{sizes.train, sizes.val, sizes.test};
    std::array<std::vector<Sample>*, 3> dst{&stage.train, &stage.val, &stage.test};
    for (int split = 0; split < 3; ++split)
      for (std::size_t i = 0; i < n[static_cast<std::size_t>(split)]; ++i)
        dst[static_cast<std::size_t>(split)]->push_back(
            generate_sample(spec, sample_seed(base_seed, spec.class_id, split, i), params));
  };

  std::vector<StageDataset> stages;
  for (const auto& spec : ordered) {
    if (spec.class_id == 0) continue;
    StageDataset stage;
    stage.class_id = spec.class_id;
    fill(spec, stage);
    stages.push_back(std::move(stage));
  }
  fill(ordered.front(), stages.front());  // background joins the first stage
  return stages;
}

}  // namespace eoc
