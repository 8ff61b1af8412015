#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eocount/model.hpp"
#include "eocount/scenegen.hpp"

namespace eoc {

struct CountPair {
  double truth = 0.0;      // Z, >= 0
  double predicted = 0.0;  // Z-hat, not rounded
};

/// Mean absolute count error. Throws on an empty set.
double mae(std::span<const CountPair> pairs);
/// Root of the mean squared count error (reported as "MSE" by convention).
double mse(std::span<const CountPair> pairs);

struct EvalRecord {
  std::uint64_t sample_id = 0;
  int class_id = 0;
  std::size_t predicted_class = 0;
  double truth = 0.0;
  double predicted = 0.0;
};

struct ClassMetrics {
  int class_id = 0;
  std::size_t n = 0;
  double mae = 0.0;
  double mse = 0.0;
  double cls_acc = 0.0;
};

/// Evaluation of one model over the test splits of every class seen by stage t.
/// Aggregate MAE/MSE pool the counting-class samples (background excluded);
/// aggregate accuracy pools every sample including background.
struct StageReport {
  int stage = 0;
  std::vector<ClassMetrics> per_class;  // ascending class_id, background first
  double mae = 0.0;
  double mse = 0.0;
  double cls_acc = 0.0;
  std::vector<EvalRecord> records;

  const ClassMetrics& for_class(int class_id) const;
};

StageReport summarize(int stage, std::vector<EvalRecord> records);
StageReport evaluate_samples(const ModelState& model, std::span<const Sample> samples, int stage);
/// Test splits of stages 1..t (stage 1 carries the background samples).
StageReport evaluate_stage(const ModelState& model, std::span<const StageDataset> benchmark, int t);

/// (stage, MAE) for class c from the first report that covers it onward.
std::vector<std::pair<int, double>> forgetting_curve(std::span<const StageReport> reports, int class_id);

/// Rows "stage,class_id,N,MAE,MSE,cls_acc", one per class per report.
void write_report_csv(std::ostream& os, std::span<const StageReport> reports);
/// Rows "stage,sample_id,class_id,predicted_class,Z,Z_hat".
void write_pairs_csv(std::ostream& os, std::span<const StageReport> reports);
/// Method x stage grid of pooled MAE/MSE/accuracy as JSON text.
std::string summary_json(const std::map<std::string, std::vector<StageReport>>& methods);

}  // namespace eoc
