#include "eocount/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <ostream>
#include <stdexcept>

namespace eoc {

double mae(std::span<const CountPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("mae of an empty set");
  double s = 0.0;
  for (const auto& p : pairs) s += std::abs(p.truth - p.predicted);
  return s / static_cast<double>(pairs.size());
}

double mse(std::span<const CountPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("mse of an empty set");
  double s = 0.0;
  for (const auto& p : pairs) s += (p.truth - p.predicted) * (p.truth - p.predicted);
  return std::sqrt(s / static_cast<double>(pairs.size()));
}

const ClassMetrics& StageReport::for_class(int class_id) const {
  for (const auto& c : per_class)
    if (c.class_id == class_id) return c;
  throw std::out_of_range("report has no class " + std::to_string(class_id));
}

StageReport summarize(int stage, std::vector<EvalRecord> records) {
  StageReport r;
  r.stage = stage;
  std::map<int, std::vector<const EvalRecord*>> by_class;
  for (const auto& rec : records) by_class[rec.class_id].push_back(&rec);

  std::vector<CountPair> pooled;
  std::size_t correct = 0;
  for (const auto& [cls, recs] : by_class) {
    std::vector<CountPair> pairs;
    std::size_t hits = 0;
    for (const auto* rec : recs) {
      pairs.push_back({rec->truth, rec->predicted});
      if (rec->predicted_class == static_cast<std::size_t>(cls)) ++hits;
      if (cls != 0) pooled.push_back(pairs.back());
    }
    correct += hits;
    r.per_class.push_back({cls, recs.size(), mae(pairs), mse(pairs),
                           static_cast<double>(hits) / static_cast<double>(recs.size())});
  }
  if (!pooled.empty()) {
    r.mae = mae(pooled);
    r.mse = mse(pooled);
  }
  if (!records.empty()) r.cls_acc = static_cast<double>(correct) / static_cast<double>(records.size());
  r.records = std::move(records);
  return r;
}

StageReport evaluate_samples(const ModelState& model, std::span<const Sample> samples, int stage) {
  std::vector<EvalRecord> records;
  records.reserve(samples.size());
  for (const auto& s : samples) {
    const auto pred = predict_count(model, s.image);
    records.push_back({s.seed, s.class_id, pred.class_id, static_cast<double>(s.count), pred.count});
  }
  return summarize(stage, std::move(records));
}

StageReport evaluate_stage(const ModelState& model, std::span<const StageDataset> benchmark, int t) {
  if (t < 1 || static_cast<std::size_t>(t) > benchmark.size())
    throw std::out_of_range("evaluate_stage: stage " + std::to_string(t) + " not in benchmark");
  std::vector<Sample> pool;
  for (int k = 0; k < t; ++k) {
    const auto& test = benchmark[static_cast<std::size_t>(k)].test;
    pool.insert(pool.end(), test.begin(), test.end());
  }
  return evaluate_samples(model, pool, t);
}

std::vector<std::pair<int, double>> forgetting_curve(std::span<const StageReport> reports, int class_id) {
  std::vector<std::pair<int, double>> curve;
  for (const auto& r : reports)
    for (const auto& c : r.per_class)
      if (c.class_id == class_id) curve.emplace_back(r.stage, c.mae);
  if (curve.empty()) throw std::invalid_argument("class " + std::to_string(class_id) + " was never learned");
  return curve;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_report_csv(std::ostream& os, std::span<const StageReport> reports) {
  os << "stage,class_id,N,MAE,MSE,cls_acc\n";
  for (const auto& r : reports)
    for (const auto& c : r.per_class)
      os << r.stage << ',' << c.class_id << ',' << c.n << ',' << num(c.mae) << ',' << num(c.mse) << ','
         << num(c.cls_acc) << '\n';
}

void write_pairs_csv(std::ostream& os, std::span<const StageReport> reports) {
  os << "stage,sample_id,class_id,predicted_class,Z,Z_hat\n";
  for (const auto& r : reports)
    for (const auto& rec : r.records)
      os << r.stage << ',' << rec.sample_id << ',' << rec.class_id << ',' << rec.predicted_class << ','
         << num(rec.truth) << ',' << num(rec.predicted) << '\n';
}

std::string summary_json(const std::map<std::string, std::vector<StageReport>>& methods) {
  nlohmann::ordered_json root;
  for (const auto& [name, reports] : methods) {
    nlohmann::ordered_json m;
    m["stages"] = nlohmann::json::array();
    m["MAE"] = nlohmann::json::array();
    m["MSE"] = nlohmann::json::array();
    m["cls_acc"] = nlohmann::json::array();
    for (const auto& r : reports) {
      m["stages"].push_back(r.stage);
      m["MAE"].push_back(r.mae);
      m["MSE"].push_back(r.mse);
      m["cls_acc"].push_back(r.cls_acc);
    }
    root["methods"][name] = m;
  }
  return root.dump(2);
}

}  // namespace eoc
