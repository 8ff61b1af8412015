#include "eocount/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "eocount/adam.hpp"
#include "eocount/ops.hpp"
#include "eocount/rng.hpp"

namespace eoc {

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 60;
  c.lr_decay_every = 20;
  c.lr = 1e-3;
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (lr_decay_every < 1) throw std::invalid_argument("lr_decay_every must be >= 1");
  if (!(lr_decay_factor >= 1.0)) throw std::invalid_argument("lr_decay_factor must be >= 1");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  if (delta < 0.0) throw std::invalid_argument("delta must be >= 0");
}

double TrainConfig::lr_at(int epoch, bool incremental) const {
  if (!incremental) return lr;
  return lr / std::pow(lr_decay_factor, epoch / lr_decay_every);
}

// ---- losses ----

namespace {

Tensor accumulate_sum(Tensor acc, const Tensor& term) { return acc.defined() ? add(acc, term) : term; }

}  // namespace

Tensor loss_classifier(std::span<const Tensor> logits, std::span<const std::size_t> labels) {
  if (logits.size() != labels.size() || logits.empty())
    throw std::invalid_argument("loss_classifier: batch size mismatch");
  Tensor total;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (labels[i] >= logits[i].numel())
      throw std::out_of_range("loss_classifier: label " + std::to_string(labels[i]) + " out of range");
    total = accumulate_sum(total, softmax_cross_entropy(logits[i], labels[i]));
  }
  return scale(total, 1.0 / static_cast<double>(logits.size()));
}

Tensor loss_density(std::span<const Tensor> densities, std::span<const Tensor> gt_densities,
                    std::span<const std::size_t> true_classes, std::span<const std::size_t> gating) {
  const std::size_t n = densities.size();
  if (n == 0 || gt_densities.size() != n || true_classes.size() != n || gating.size() != n)
    throw std::invalid_argument("loss_density: batch size mismatch");
  const double s = 1.0 / (2.0 * static_cast<double>(n));
  Tensor total;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = gating[i];
    Tensor pred = slice_channels(densities[i], j, j + 1);
    const Tensor target = j == true_classes[i] ? gt_densities[i] : Tensor::zeros(pred.shape());
    total = accumulate_sum(total, mse_loss(pred, target, s));
  }
  return total;
}

Tensor loss_mask(std::span<const Tensor> mask_probs, std::span<const Tensor> gt_masks) {
  if (mask_probs.empty() || mask_probs.size() != gt_masks.size())
    throw std::invalid_argument("loss_mask: batch size mismatch");
  // Equal-sized maps, so the mean of per-sample means is the pixel mean.
  Tensor total;
  for (std::size_t i = 0; i < mask_probs.size(); ++i)
    total = accumulate_sum(total, bce_loss(mask_probs[i], gt_masks[i]));
  return scale(total, 1.0 / static_cast<double>(mask_probs.size()));
}

Tensor loss_distill(std::span<const Tensor> student, std::span<const Tensor> teacher) {
  const std::size_t n = student.size();
  if (n == 0 || teacher.size() != n) throw std::invalid_argument("loss_distill: batch size mismatch");
  const double s = 1.0 / (2.0 * static_cast<double>(n));
  Tensor total;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t old = teacher[i].dim(0);
    if (student[i].dim(0) != old + 1)
      throw std::invalid_argument("loss_distill: teacher has " + std::to_string(old) +
                                  " channels, student " + std::to_string(student[i].dim(0)) +
                                  "; expected the previous stage");
    total = accumulate_sum(total, mse_loss(slice_channels(student[i], 0, old), teacher[i], s));
  }
  return total;
}

// ---- bank ----

std::size_t SupportSampleBank::size() const {
  std::size_t n = 0;
  for (const auto& [id, entries] : classes_) n += entries.size();
  return n;
}

std::vector<Sample> SupportSampleBank::samples() const {
  std::vector<Sample> out;
  for (const auto& [id, entries] : classes_)
    for (const auto& e : entries) out.push_back(e.sample);
  return out;
}

std::vector<std::size_t> SupportSampleBank::allotments(std::size_t capacity, std::size_t num_classes) {
  if (num_classes == 0) return {};
  std::vector<std::size_t> out(num_classes, capacity / num_classes);
  for (std::size_t i = 0; i < capacity % num_classes; ++i) out[i] += 1;
  return out;
}

void SupportSampleBank::add_class(int class_id, std::vector<BankEntry> ranked) {
  if (contains(class_id))
    throw std::invalid_argument("class " + std::to_string(class_id) + " is already in the bank");
  classes_.emplace(class_id, std::move(ranked));
  const auto allot = allotments(capacity_, classes_.size());
  std::size_t i = 0;
  for (auto& [id, entries] : classes_) {
    if (entries.size() > allot[i]) entries.resize(allot[i]);
    ++i;
  }
}

std::vector<std::pair<std::size_t, double>> rank_by_center(std::span<const std::vector<double>> features) {
  std::vector<std::pair<std::size_t, double>> ranked;
  if (features.empty()) return ranked;
  const std::size_t d = features.front().size();
  std::vector<double> center(d, 0.0);
  for (const auto& f : features) {
    if (f.size() != d) throw DimensionError("rank_by_center: feature dimensions differ");
    for (std::size_t j = 0; j < d; ++j) center[j] += f[j];
  }
  for (auto& c : center) c /= static_cast<double>(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (features[i][j] - center[j]) * (features[i][j] - center[j]);
    ranked.emplace_back(i, std::sqrt(s));
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second < b.second; });
  return ranked;
}

void update_bank_with_features(SupportSampleBank& bank, std::span<const Sample> samples,
                               std::span<const std::vector<double>> features, int class_id) {
  if (samples.size() != features.size()) throw std::invalid_argument("update_bank: feature count mismatch");
  if (bank.contains(class_id))
    throw std::invalid_argument("class " + std::to_string(class_id) + " is already in the bank");
  std::vector<BankEntry> entries;
  for (const auto& [idx, dist] : rank_by_center(features))
    entries.push_back({samples[idx], features[idx], dist});
  bank.add_class(class_id, std::move(entries));
}

void update_bank(SupportSampleBank& bank, const ModelState& model, std::span<const Sample> samples,
                 int class_id) {
  std::vector<Sample> own;
  std::vector<std::vector<double>> features;
  NoGradGuard no_grad;
  for (const auto& s : samples) {
    if (s.class_id != class_id) continue;
    own.push_back(s);
    features.push_back(forward(model, s.image).feature_vec.to_vector());
  }
  update_bank_with_features(bank, own, features, class_id);
}

// ---- training ----

namespace {

StageLossBreakdown combine(const StageLossBreakdown& a, const StageLossBreakdown& b) {
  return {a.l_a + b.l_a, a.l_c + b.l_c, a.l_d + b.l_d, a.l_kd + b.l_kd, a.l_total + b.l_total, b.lambda,
          b.mask_weight};
}

}  // namespace

Tensor batch_loss(const ModelState& model, std::span<const Sample> batch, std::span<const Tensor> teacher_densities,
                  const TrainConfig& cfg, StageLossBreakdown* breakdown) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("batch_loss: empty batch");
  const bool teacher = !teacher_densities.empty();
  if (teacher && teacher_densities.size() != n)
    throw std::invalid_argument("batch_loss: teacher output count does not match the batch");
  const double lambda = teacher ? cfg.lambda : 0.0;
  const bool has_mask = model.arch.mask_arch != MaskArch::none;
  const double mask_weight = (has_mask && cfg.mask_supervision != MaskSupervision::none) ? 1.0 : 0.0;

  std::vector<Tensor> logits, densities, masks, gt_d, gt_m;
  std::vector<std::size_t> labels, gating;
  for (const auto& s : batch) {
    const Tensor ds = downsample_density(s.density, static_cast<int>(kOutputStride));
    ForwardOutput out = forward(model, s.image);
    logits.push_back(out.logits);
    densities.push_back(out.density);
    if (has_mask) masks.push_back(out.mask_prob);
    gt_d.push_back(ds);
    gt_m.push_back(binary_mask(ds, cfg.delta));
    labels.push_back(static_cast<std::size_t>(s.class_id));
    gating.push_back(cfg.gate_with_truth ? labels.back() : argmax(out.logits.data()));
  }

  StageLossBreakdown br;
  br.lambda = lambda;
  br.mask_weight = mask_weight;
  Tensor l_c = loss_classifier(logits, labels);
  Tensor l_d = loss_density(densities, gt_d, labels, gating);
  Tensor total = add(l_c, scale(l_d, 1.0 - lambda));
  br.l_c = l_c.item();
  br.l_d = l_d.item();
  if (has_mask) {
    Tensor l_a;
    if (cfg.mask_supervision == MaskSupervision::density_mse) {
      const double s = 1.0 / (2.0 * static_cast<double>(n));
      for (std::size_t i = 0; i < n; ++i) l_a = accumulate_sum(l_a, mse_loss(masks[i], gt_d[i], s));
    } else if (cfg.mask_supervision == MaskSupervision::bce) {
      l_a = loss_mask(masks, gt_m);
    } else {
      NoGradGuard no_grad;  // logged only
      l_a = loss_mask(masks, gt_m);
    }
    br.l_a = l_a.item();
    if (mask_weight != 0.0) total = add(l_a, total);
  }
  if (teacher) {
    Tensor l_kd = loss_distill(densities, teacher_densities);
    br.l_kd = l_kd.item();
    total = add(total, scale(l_kd, lambda));
  }
  br.l_total = total.item();
  if (breakdown) *breakdown = br;
  return total;
}

StageHistory train_stage(ModelState& model, std::span<const Sample> new_data, const SupportSampleBank& bank,
                         const ModelState* teacher, const TrainConfig& cfg, std::span<const Sample> val,
                         bool incremental) {
  cfg.validate();
  std::vector<Sample> pool(new_data.begin(), new_data.end());
  for (auto& s : bank.samples()) pool.push_back(std::move(s));
  if (pool.empty()) throw std::invalid_argument("train_stage: empty training set");
  if (teacher && teacher->num_outputs() + 1 != model.num_outputs())
    throw std::invalid_argument("train_stage: teacher must be the previous-stage model");

  const double lambda = teacher ? cfg.lambda : 0.0;
  const bool has_mask = model.arch.mask_arch != MaskArch::none;
  const double mask_weight = (has_mask && cfg.mask_supervision != MaskSupervision::none) ? 1.0 : 0.0;
  const int stage = model.stage;

  auto params = model.parameters();
  for (auto& p : params) {
    p.set_requires_grad(true);
  }
  AdamState adam;
  // Teacher outputs depend only on (sample, flip); the teacher is frozen.
  std::vector<std::array<Tensor, 2>> teacher_cache(teacher ? pool.size() : 0);

  StageHistory history;
  std::vector<std::size_t> order(pool.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch, incremental);
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(stage) * 100003ULL,
                                                 static_cast<std::uint64_t>(epoch));
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(epoch_seed).shuffle(order);

    StageLossBreakdown epoch_sum;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);

      std::vector<Sample> batch;
      std::vector<Tensor> teacher_d;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const std::uint64_t flip_seed = derive_seed(epoch_seed, b, 0xf11);
        const bool flip = Rng(flip_seed).coin();
        batch.push_back(flip ? augment_flip(pool[idx], flip_seed, true) : pool[idx]);
        if (teacher) {
          Tensor& cached = teacher_cache[idx][flip ? 1 : 0];
          if (!cached.defined()) {
            NoGradGuard no_grad;
            cached = forward(*teacher, batch.back().image).density;
          }
          teacher_d.push_back(cached);
        }
      }

      StageLossBreakdown br;
      Tensor total = batch_loss(model, batch, teacher_d, cfg, &br);
      backward(total);
      adam_step(params, adam, lr, cfg.weight_decay);
      for (auto& p : params) p.zero_grad();

      history.batches.push_back(br);
      epoch_sum = combine(epoch_sum, br);
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = stage;
    rec.lr = lr;
    const double inv = 1.0 / static_cast<double>(batches);
    rec.mean = {epoch_sum.l_a * inv, epoch_sum.l_c * inv, epoch_sum.l_d * inv, epoch_sum.l_kd * inv,
                epoch_sum.l_total * inv, lambda, mask_weight};
    if (!val.empty()) {
      const auto report = evaluate_samples(model, val, stage);
      rec.val_mae = report.mae;
      rec.val_mse = report.mse;
    }
    history.epochs.push_back(rec);
  }
  return history;
}

MaskVariant parse_mask_variant(const std::string& name) {
  if (name == "full") return MaskVariant::full;
  if (name == "no-mask") return MaskVariant::no_mask;
  if (name == "unsupervised-mask") return MaskVariant::unsupervised;
  if (name == "density-supervised") return MaskVariant::density_supervised;
  if (name == "no-feedback") return MaskVariant::no_feedback;
  throw std::invalid_argument("unknown mask ablation variant '" + name + "'");
}

std::string to_string(MaskVariant v) {
  switch (v) {
    case MaskVariant::full:
      return "full";
    case MaskVariant::no_mask:
      return "no-mask";
    case MaskVariant::unsupervised:
      return "unsupervised-mask";
    case MaskVariant::density_supervised:
      return "density-supervised";
    case MaskVariant::no_feedback:
      return "no-feedback";
  }
  return "full";
}

void apply_mask_variant(MaskVariant v, ArchConfig& arch, TrainConfig& cfg) {
  arch.mask_arch = MaskArch::full;
  cfg.mask_supervision = MaskSupervision::bce;
  switch (v) {
    case MaskVariant::full:
      break;
    case MaskVariant::no_mask:
      arch.mask_arch = MaskArch::none;
      break;
    case MaskVariant::unsupervised:
      cfg.mask_supervision = MaskSupervision::none;
      break;
    case MaskVariant::density_supervised:
      cfg.mask_supervision = MaskSupervision::density_mse;
      break;
    case MaskVariant::no_feedback:
      arch.mask_arch = MaskArch::no_feedback;
      break;
  }
}

namespace {

std::vector<Sample> seen_validation(std::span<const StageDataset> benchmark, std::size_t upto) {
  std::vector<Sample> val;
  for (std::size_t k = 0; k <= upto && k < benchmark.size(); ++k)
    val.insert(val.end(), benchmark[k].val.begin(), benchmark[k].val.end());
  return val;
}

}  // namespace

namespace {

RunResult run_chain(std::span<const StageDataset> benchmark, const ArchConfig& arch, const TrainConfig& cfg,
                    bool full, const StageCallback& on_stage, const RunResult* first_stage) {
  if (benchmark.empty()) throw std::invalid_argument("incremental run: empty benchmark");
  cfg.validate();

  RunResult result;
  SupportSampleBank bank(cfg.memory);
  const SupportSampleBank no_bank(cfg.memory);
  ModelState model = build_initial(arch, derive_seed(cfg.seed, 0x1417));
  std::size_t k0 = 0;
  if (first_stage) {
    if (first_stage->models.empty() || first_stage->models.front().stage != 1 ||
        first_stage->models.front().arch != arch)
      throw std::invalid_argument("first-stage result does not match this run");
    model = first_stage->models.front().clone();
    result.models.push_back(model.clone());
    result.histories.push_back(first_stage->histories.front());
    result.reports.push_back(first_stage->reports.front());
    k0 = 1;
    if (on_stage) on_stage(1, result);
  }
  for (std::size_t k = k0; k < benchmark.size(); ++k) {
    const bool incremental = k > 0;
    if (incremental) model = expand(model, cfg.seed);
    const ModelState* teacher = (incremental && full) ? &result.models.back() : nullptr;
    const auto val = seen_validation(benchmark, k);
    auto history = train_stage(model, benchmark[k].train, full ? bank : no_bank, teacher, cfg, val, incremental);

    if (full) {
      if (k == 0) update_bank(bank, model, benchmark[k].train, 0);
      update_bank(bank, model, benchmark[k].train, benchmark[k].class_id);
      result.banks.push_back(bank);
    }
    result.reports.push_back(evaluate_stage(model, benchmark, static_cast<int>(k + 1)));
    result.histories.push_back(std::move(history));
    result.models.push_back(model.clone());
    if (on_stage) on_stage(static_cast<int>(k + 1), result);
  }
  return result;
}

}  // namespace

RunResult run_incremental(std::span<const StageDataset> benchmark, const ArchConfig& arch,
                          const TrainConfig& cfg, Method method, const StageCallback& on_stage) {
  if (method == Method::joint) return run_baseline_joint(benchmark, arch, cfg);
  return run_chain(benchmark, arch, cfg, method == Method::full, on_stage, nullptr);
}

RunResult run_baseline_ft(std::span<const StageDataset> benchmark, const ArchConfig& arch,
                          const TrainConfig& cfg, const StageCallback& on_stage, const RunResult* first_stage) {
  return run_chain(benchmark, arch, cfg, false, on_stage, first_stage);
}

RunResult run_baseline_joint(std::span<const StageDataset> benchmark, const ArchConfig& arch,
                             const TrainConfig& cfg) {
  if (benchmark.empty()) throw std::invalid_argument("run_baseline_joint: empty benchmark");
  cfg.validate();
  ModelState model = build_initial(arch, derive_seed(cfg.seed, 0x1417));
  for (std::size_t k = 1; k < benchmark.size(); ++k) model = expand(model, cfg.seed);
  std::vector<Sample> train;
  for (const auto& stage : benchmark) train.insert(train.end(), stage.train.begin(), stage.train.end());
  const auto val = seen_validation(benchmark, benchmark.size() - 1);

  RunResult result;
  result.histories.push_back(train_stage(model, train, SupportSampleBank(cfg.memory), nullptr, cfg, val, false));
  result.reports.push_back(evaluate_stage(model, benchmark, static_cast<int>(benchmark.size())));
  result.models.push_back(std::move(model));
  return result;
}

RunResult run_ablation_mask(std::span<const StageDataset> benchmark, ArchConfig arch, TrainConfig cfg,
                            MaskVariant variant, const StageCallback& on_stage) {
  apply_mask_variant(variant, arch, cfg);
  return run_incremental(benchmark, arch, cfg, Method::full, on_stage);
}

void write_history_csv(std::ostream& os, const StageHistory& history) {
  os << "epoch,stage,L_a,L_c,L_d,L_kd,L_total,val_MAE,val_MSE,lr\n";
  char buf[512];
  for (const auto& e : history.epochs) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.stage,
                  e.mean.l_a, e.mean.l_c, e.mean.l_d, e.mean.l_kd, e.mean.l_total, e.val_mae, e.val_mse, e.lr);
    os << buf;
  }
}

}  // namespace eoc
