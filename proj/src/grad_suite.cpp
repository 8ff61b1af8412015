#include "eocount/grad_suite.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <memory>
#include <ostream>

#include "eocount/grad_check.hpp"
#include "eocount/model.hpp"
#include "eocount/rng.hpp"
#include "eocount/scenegen.hpp"
#include "eocount/trainer.hpp"

namespace eoc {

namespace {

// Values are drawn from ranges that keep gradients well away from zero, so
// round-off in the central difference stays far below the tolerance.
Tensor uniform_tensor(Rng& rng, Shape shape, double lo, double hi, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

Tensor signed_tensor(Rng& rng, Shape shape, double lo, double hi, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.coin() ? 1.0 : -1.0) * rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

Tensor weighted(const Tensor& y, const Tensor& r) { return sum(mul(y, r)); }

struct Case {
  ScalarFn fn;
  std::vector<Tensor> inputs;
  std::size_t max_coords = 0;
  double min_magnitude = 0.0;
};

using CaseMaker = std::function<Case(Rng&)>;

Case conv_case(Rng& rng) {
  const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
  const std::size_t k = rng.coin() ? 3 : 1;
  const int stride = rng.coin() ? 2 : 1;
  const int pad = k == 3 && rng.coin() ? 1 : 0;
  const std::size_t h = pick(rng, 4, 7), w = pick(rng, 4, 7);
  Tensor x = uniform_tensor(rng, {cin, h, w}, 0.1, 1.0);
  Tensor wt = uniform_tensor(rng, {cout, cin, k, k}, 0.1, 1.0);
  Tensor b = uniform_tensor(rng, {cout}, -0.5, 0.5);
  const std::size_t ho = (h + 2 * static_cast<std::size_t>(pad) - k) / static_cast<std::size_t>(stride) + 1;
  const std::size_t wo = (w + 2 * static_cast<std::size_t>(pad) - k) / static_cast<std::size_t>(stride) + 1;
  Tensor r = uniform_tensor(rng, {cout, ho, wo}, 0.5, 1.5, false);
  return {[r, stride, pad](const std::vector<Tensor>& in) {
            return weighted(conv2d(in[0], in[1], in[2], stride, pad), r);
          },
          {x, wt, b}};
}

Case relu_case(Rng& rng) {
  const Shape s{pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)};
  Tensor x = signed_tensor(rng, s, 0.05, 1.0);
  Tensor r = uniform_tensor(rng, s, 0.5, 1.5, false);
  return {[r](const std::vector<Tensor>& in) { return weighted(relu(in[0]), r); }, {x}};
}

Case sigmoid_case(Rng& rng) {
  const Shape s{pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)};
  Tensor x = uniform_tensor(rng, s, -3.0, 3.0);
  Tensor r = signed_tensor(rng, s, 0.5, 1.5, false);
  return {[r](const std::vector<Tensor>& in) { return weighted(sigmoid(in[0]), r); }, {x}};
}

Case maxpool_case(Rng& rng) {
  const std::size_t c = pick(rng, 1, 3), h = 2 * pick(rng, 1, 3), w = 2 * pick(rng, 1, 3);
  Tensor x = uniform_tensor(rng, {c, h, w}, -1.0, 1.0);
  Tensor r = uniform_tensor(rng, {c, h / 2, w / 2}, 0.5, 1.5, false);
  return {[r](const std::vector<Tensor>& in) { return weighted(maxpool2d(in[0], 2), r); }, {x}};
}

Case avgpool_case(Rng& rng) {
  const std::size_t c = pick(rng, 1, 4);
  Tensor x = uniform_tensor(rng, {c, pick(rng, 1, 5), pick(rng, 1, 5)}, -1.0, 1.0);
  Tensor r = signed_tensor(rng, {c}, 0.5, 1.5, false);
  return {[r](const std::vector<Tensor>& in) { return weighted(global_avgpool(in[0]), r); }, {x}};
}

Case center_case(Rng& rng) {
  const std::vector<std::size_t> shape{pick(rng, 1, 4), pick(rng, 1, 5), pick(rng, 2, 5)};
  Tensor x = uniform_tensor(rng, shape, -1.0, 1.0);
  // position-dependent weights, the plain sum of a centered map is zero
  Tensor r = signed_tensor(rng, shape, 0.5, 1.5, false);
  return {[r](const std::vector<Tensor>& in) { return weighted(center_channels(in[0]), r); }, {x}};
}

Case linear_case(Rng& rng) {
  const std::size_t d = pick(rng, 1, 6), k = pick(rng, 1, 4);
  Tensor x = uniform_tensor(rng, {d}, 0.1, 1.0);
  Tensor w = uniform_tensor(rng, {k, d}, 0.1, 1.0);
  Tensor b = uniform_tensor(rng, {k}, -0.5, 0.5);
  Tensor r = uniform_tensor(rng, {k}, 0.5, 1.5, false);
  return {[r](const std::vector<Tensor>& in) { return weighted(linear(in[0], in[1], in[2]), r); }, {x, w, b}};
}

Case cross_entropy_case(Rng& rng) {
  const std::size_t k = pick(rng, 2, 6);
  const std::size_t target = pick(rng, 0, k - 1);
  Tensor z = uniform_tensor(rng, {k}, -2.0, 2.0);
  return {[target](const std::vector<Tensor>& in) { return softmax_cross_entropy(in[0], target); }, {z}};
}

Case bce_case(Rng& rng) {
  const Shape s{1, pick(rng, 2, 5), pick(rng, 2, 5)};
  Tensor q = uniform_tensor(rng, s, 0.05, 0.95);
  std::vector<double> t(shape_numel(s));
  for (auto& v : t) v = rng.coin() ? 1.0 : 0.0;
  Tensor target = Tensor::from(s, std::move(t));
  return {[target](const std::vector<Tensor>& in) { return bce_loss(in[0], target); }, {q}};
}

Case mse_case(Rng& rng) {
  const Shape s{pick(rng, 1, 2), pick(rng, 2, 4), pick(rng, 2, 4)};
  Tensor p = uniform_tensor(rng, s, 0.0, 1.0);
  Tensor t = uniform_tensor(rng, s, 1.5, 2.5);
  const double c = rng.uniform(0.1, 2.0);
  return {[c](const std::vector<Tensor>& in) { return mse_loss(in[0], in[1], c); }, {p, t}};
}

Case concat_case(Rng& rng) {
  const std::size_t h = pick(rng, 1, 4), w = pick(rng, 1, 4);
  const std::size_t ca = pick(rng, 1, 3), cb = pick(rng, 1, 3);
  Tensor a = uniform_tensor(rng, {ca, h, w}, -1.0, 1.0);
  Tensor b = uniform_tensor(rng, {cb, h, w}, -1.0, 1.0);
  Tensor r = signed_tensor(rng, {ca + cb, h, w}, 0.5, 1.5, false);
  return {[r](const std::vector<Tensor>& in) { return weighted(concat_channels(in[0], in[1]), r); }, {a, b}};
}

Case slice_case(Rng& rng) {
  const std::size_t c = pick(rng, 2, 5), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
  const std::size_t b = pick(rng, 0, c - 1), e = pick(rng, b + 1, c);
  Tensor x = uniform_tensor(rng, {c, h, w}, -1.0, 1.0);
  Tensor r = signed_tensor(rng, {e - b, h, w}, 0.5, 1.5, false);
  return {[r, b, e](const std::vector<Tensor>& in) { return weighted(slice_channels(in[0], b, e), r); }, {x}};
}

Case affine_case(Rng& rng) {
  const Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
  const double a = (rng.coin() ? 1.0 : -1.0) * rng.uniform(0.2, 2.0), b = rng.uniform(-1.0, 1.0);
  Tensor x = uniform_tensor(rng, s, -1.0, 1.0);
  Tensor r = signed_tensor(rng, s, 0.5, 1.5, false);
  return {[r, a, b](const std::vector<Tensor>& in) { return weighted(affine(in[0], a, b), r); }, {x}};
}

Case add_case(Rng& rng) {
  const Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
  Tensor x = uniform_tensor(rng, s, -1.0, 1.0), y = uniform_tensor(rng, s, -1.0, 1.0);
  Tensor r = signed_tensor(rng, s, 0.5, 1.5, false);
  return {[r](const std::vector<Tensor>& in) { return weighted(add(in[0], in[1]), r); }, {x, y}};
}

Case mul_case(Rng& rng) {
  const Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
  Tensor x = signed_tensor(rng, s, 0.2, 1.0), y = signed_tensor(rng, s, 0.2, 1.0);
  return {[](const std::vector<Tensor>& in) { return sum(mul(in[0], in[1])); }, {x, y}};
}

Case scale_case(Rng& rng) {
  const Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
  const double c = (rng.coin() ? 1.0 : -1.0) * rng.uniform(0.2, 2.0);
  Tensor x = uniform_tensor(rng, s, -1.0, 1.0);
  Tensor r = signed_tensor(rng, s, 0.5, 1.5, false);
  return {[r, c](const std::vector<Tensor>& in) { return weighted(scale(in[0], c), r); }, {x}};
}

Case sum_case(Rng& rng) {
  Tensor x = uniform_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, 0.1, 1.0);
  // sum feeding a product so the upstream gradient is not identically one
  return {[](const std::vector<Tensor>& in) {
            const Tensor s = sum(in[0]);
            return mul(s, s);
          },
          {x}};
}

Sample toy_sample(Rng& rng, int class_id) {
  const std::size_t n = 16;
  std::vector<Dot> dots;
  const int count = class_id == 0 ? 0 : static_cast<int>(rng.uniform_int(1, 3));
  for (int i = 0; i < count; ++i) dots.push_back({rng.uniform(3.0, 12.0), rng.uniform(3.0, 12.0)});
  Sample s;
  s.image = uniform_tensor(rng, {1, n, n}, 0.0, 1.0, false);
  s.density = density_map(dots, 1.5, n, n);
  s.mask = binary_mask(s.density, 1e-3);
  s.dots = dots;
  s.count = static_cast<std::size_t>(count);
  s.class_id = class_id;
  return s;
}

Case full_model_case(Rng& rng) {
  ArchConfig arch;
  arch.backbone = {2, 3, 3, 3};
  arch.trunk = 3;
  arch.mask = 2;
  arch.feedback = 2;
  const std::uint64_t seed = rng.next_u64();
  // a teacher from another seed, so the distillation term has a gradient
  ModelState teacher = build_initial(arch, seed ^ 0x5eed);
  ModelState model = expand(build_initial(arch, seed), seed);
  std::vector<Sample> batch;
  for (int c = 0; c < 3; ++c) batch.push_back(toy_sample(rng, c));
  std::vector<Tensor> teacher_d;
  {
    NoGradGuard no_grad;
    for (const auto& s : batch) teacher_d.push_back(forward(teacher, s.image).density);
  }
  TrainConfig cfg;
  auto params = model.parameters();
  for (auto& p : params) p.set_requires_grad(true);
  // the closure keeps the model alive; its parameters alias `params`
  auto shared = std::make_shared<ModelState>(std::move(model));
  return {[shared, batch, teacher_d, cfg](const std::vector<Tensor>&) {
            return batch_loss(*shared, batch, teacher_d, cfg);
          },
          params, 4, 1e-4};
}

const std::vector<std::pair<std::string, CaseMaker>>& cases() {
  static const std::vector<std::pair<std::string, CaseMaker>> table = {
      {"conv2d", conv_case},
      {"relu", relu_case},
      {"sigmoid", sigmoid_case},
      {"maxpool2d", maxpool_case},
      {"global_avgpool", avgpool_case},
      {"center_channels", center_case},
      {"linear", linear_case},
      {"softmax_cross_entropy", cross_entropy_case},
      {"bce_loss", bce_case},
      {"mse_loss", mse_case},
      {"concat_channels", concat_case},
      {"slice_channels", slice_case},
      {"affine", affine_case},
      {"add", add_case},
      {"mul", mul_case},
      {"scale", scale_case},
      {"sum", sum_case},
      {"full_model", full_model_case},
  };
  return table;
}

struct FaultScope {
  explicit FaultScope(GradFault f) : previous(grad_fault()) { set_grad_fault(f); }
  ~FaultScope() { set_grad_fault(previous); }
  GradFault previous;
};

}  // namespace

std::vector<std::string> grad_suite_ops() {
  std::vector<std::string> names;
  for (const auto& [name, maker] : cases()) names.push_back(name);
  return names;
}

std::vector<GradSuiteRow> run_grad_suite(const GradSuiteOptions& options) {
  FaultScope fault(options.fault);
  std::vector<GradSuiteRow> rows;
  std::uint64_t op_index = 0;
  for (const auto& [name, maker] : cases()) {
    GradSuiteRow row;
    row.op = name;
    row.seeds = options.seeds;
    for (int s = 0; s < options.seeds; ++s) {
      Rng rng(derive_seed(options.base_seed, op_index, static_cast<std::uint64_t>(s)));
      Case c = maker(rng);
      GradCheckOptions gopt;
      gopt.eps = options.eps;
      gopt.max_coords_per_input = c.max_coords;
      gopt.min_magnitude = c.min_magnitude;
      gopt.sample_seed = rng.next_u64();
      const auto r = grad_check(c.fn, c.inputs, gopt);
      row.checked += r.checked;
      row.skipped_kinks += r.skipped_kinks;
      row.skipped_small += r.skipped_small;
      row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
    }
    row.passed = row.checked > 0 && row.max_rel_error < options.tolerance;
    rows.push_back(row);
    ++op_index;
  }
  return rows;
}

bool all_passed(const std::vector<GradSuiteRow>& rows) {
  return std::all_of(rows.begin(), rows.end(), [](const GradSuiteRow& r) { return r.passed; });
}

void print_grad_table(std::ostream& os, const std::vector<GradSuiteRow>& rows, double tolerance) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-22s %6s %8s %8s %8s %14s  %s\n", "op", "seeds", "checked", "kinks", "small",
                "max_rel_err", "result");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-22s %6d %8zu %8zu %8zu %14.3e  %s\n", r.op.c_str(), r.seeds, r.checked,
                  r.skipped_kinks, r.skipped_small, r.max_rel_error, r.passed ? "PASS" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "tolerance %.1e\n", tolerance);
  os << buf;
}

}  // namespace eoc
