#include "eocount/commands.hpp"

#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <ostream>

#include "eocount/io.hpp"
#include "eocount/metrics.hpp"
#include "eocount/model.hpp"
#include "eocount/trainer.hpp"

namespace eoc {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

void write_text(const fs::path& out, const fs::path& rel, const std::string& text, Manifest& m) {
  auto os = open_out(out / rel);
  os << text;
  m.add(rel);
}

Manifest start(const std::string& command, const ExperimentConfig& cfg) {
  Manifest m;
  m.command = command;
  m.config_hash = cfg.hash();
  m.seed = cfg.train.seed;
  return m;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_reports(const fs::path& out, const std::string& method, const std::vector<StageReport>& reports,
                   Manifest& m) {
  {
    auto os = open_out(out / "report.csv");
    write_report_csv(os, reports);
    m.add("report.csv");
  }
  write_text(out, "report.json", summary_json({{method, reports}}) + "\n", m);
  {
    auto os = open_out(out / "pairs.csv");
    write_pairs_csv(os, reports);
    m.add("pairs.csv");
  }
}

void write_bank(const fs::path& path, const SupportSampleBank& bank) {
  auto os = open_out(path);
  os << "class_id,sample_id,distance\n";
  for (const auto& [id, entries] : bank.classes())
    for (const auto& e : entries) os << id << ',' << e.sample.seed << ',' << fmt(e.distance) << '\n';
}

ModelState load_model(const fs::path& checkpoint) {
  if (!fs::is_regular_file(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
  try {
    return load_checkpoint(checkpoint);
  } catch (const FormatError& e) {
    throw DataError(e.what());
  }
}

void check_consistent(const ModelState& model, std::span<const StageDataset> bench) {
  if (static_cast<std::size_t>(model.stage) > bench.size())
    throw DataError("checkpoint is at stage " + std::to_string(model.stage) + " but the dataset has only " +
                    std::to_string(bench.size()) + " counting classes");
  for (int k = 0; k < model.stage; ++k)
    if (bench[static_cast<std::size_t>(k)].class_id != k + 1)
      throw DataError("dataset stage " + std::to_string(k + 1) + " holds class " +
                      std::to_string(bench[static_cast<std::size_t>(k)].class_id));
  const auto& img = bench.front().test.empty() ? bench.front().train.front().image : bench.front().test.front().image;
  if (img.dim(1) % kOutputStride != 0 || img.dim(2) % kOutputStride != 0)
    throw DataError("dataset image size is not a multiple of " + std::to_string(kOutputStride));
}

}  // namespace

void Manifest::write(const fs::path& out) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  artifacts.push_back("manifest.json");
  j["artifacts"] = artifacts;
  auto os = open_out(out / "manifest.json");
  os << j.dump(2) << "\n";
}

void prepare_out_dir(const fs::path& out) {
  if (out.empty()) throw UsageError("an output directory is required (--out)");
  fs::path target = fs::absolute(out).lexically_normal();
  if (!target.has_filename()) target = target.parent_path();  // trailing slash
  if (!fs::is_directory(target.parent_path()))
    throw UsageError("parent of the output directory does not exist: " + target.parent_path().string());
  fs::create_directories(target);
}

std::vector<StageDataset> build_benchmark(const ExperimentConfig& cfg) {
  const auto specs = cfg.class_specs();
  return make_benchmark(specs, cfg.bench.sizes, cfg.bench.base_seed, cfg.scene_params());
}

std::vector<StageDataset> load_benchmark(const ExperimentConfig& cfg, const std::optional<fs::path>& data) {
  if (!data) return build_benchmark(cfg);
  if (!fs::is_directory(*data)) throw DataError("dataset directory not found: " + data->string());
  try {
    return import_benchmark(*data, cfg.train.delta);
  } catch (const FormatError& e) {
    throw DataError(e.what());
  }
}

Manifest cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out) {
  prepare_out_dir(out);
  Manifest m = start("gen-data", cfg);
  m.seed = cfg.bench.base_seed;
  const auto bench = build_benchmark(cfg);
  for (const auto& p : export_benchmark(out, bench)) m.add(p);
  write_text(out, "config.txt", cfg.to_text(), m);
  m.write(out);
  return m;
}

Manifest cmd_train(const ExperimentConfig& cfg, const fs::path& out, const std::optional<fs::path>& data,
                   std::ostream* log) {
  cfg.validate();
  prepare_out_dir(out);
  Manifest m = start("train", cfg);
  const auto bench = load_benchmark(cfg, data);
  write_text(out, "config.txt", cfg.to_text(), m);

  auto save_stage = [&](int stage, const RunResult& r) {
    const fs::path dir = "stage_" + std::to_string(stage);
    fs::create_directories(out / dir);
    save_checkpoint(out / dir / "checkpoint.eocm1", r.models.back());
    m.add(dir / "checkpoint.eocm1");
    {
      auto os = open_out(out / dir / "history.csv");
      write_history_csv(os, r.histories.back());
      m.add(dir / "history.csv");
    }
    if (!r.banks.empty() && r.banks.size() == r.models.size()) {
      write_bank(out / dir / "bank.csv", r.banks.back());
      m.add(dir / "bank.csv");
    }
    if (log) {
      const auto& rep = r.reports.back();
      char buf[160];
      std::snprintf(buf, sizeof buf, "stage %d: MAE %.4f MSE %.4f cls_acc %.4f\n", stage, rep.mae, rep.mse,
                    rep.cls_acc);
      *log << buf << std::flush;
    }
  };

  RunResult result;
  const auto& ms = cfg.method;
  if (ms.ablation) {
    result = run_ablation_mask(bench, cfg.arch, cfg.train, ms.variant, save_stage);
  } else if (ms.method == Method::joint) {
    result = run_baseline_joint(bench, cfg.arch, cfg.train);
    save_stage(result.models.back().stage, result);
  } else {
    result = run_incremental(bench, cfg.arch, cfg.train, ms.method, save_stage);
  }
  write_reports(out, ms.to_string(), result.reports, m);
  m.write(out);
  return m;
}

Manifest cmd_eval(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& out,
                  const std::optional<fs::path>& data) {
  cfg.validate();
  const ModelState model = load_model(checkpoint);
  const auto bench = load_benchmark(cfg, data);
  check_consistent(model, bench);
  prepare_out_dir(out);
  Manifest m = start("eval", cfg);
  const std::vector<StageReport> reports{evaluate_stage(model, bench, model.stage)};
  write_reports(out, "eval", reports, m);
  m.write(out);
  return m;
}

Manifest cmd_export_maps(const ExperimentConfig& cfg, const fs::path& checkpoint,
                         const std::vector<std::uint64_t>& ids, const fs::path& out,
                         const std::optional<fs::path>& data) {
  cfg.validate();
  if (ids.empty()) throw UsageError("export-maps needs at least one sample id");
  const ModelState model = load_model(checkpoint);
  const auto bench = load_benchmark(cfg, data);
  check_consistent(model, bench);

  std::vector<const Sample*> picked;
  for (auto id : ids) {
    const Sample* found = nullptr;
    for (const auto& stage : bench)
      for (const auto* split : {&stage.train, &stage.val, &stage.test})
        for (const auto& s : *split)
          if (s.seed == id && !found) found = &s;
    if (!found) throw DataError("unknown sample id " + std::to_string(id));
    picked.push_back(found);
  }

  prepare_out_dir(out);
  Manifest m = start("export-maps", cfg);
  for (const Sample* s : picked) {
    NoGradGuard no_grad;
    const auto fwd = forward(model, s->image);
    const auto sel = select_density(fwd);
    double count = 0.0;
    for (double v : sel.density.data()) count += v;
    const std::string id = std::to_string(s->seed);
    const fs::path dir = "maps";
    fs::create_directories(out / dir);
    write_eocd1(out / dir / (id + "_density.eocd1"), sel.density);
    m.add(dir / (id + "_density.eocd1"));
    if (fwd.mask_prob.defined()) {
      write_eocd1(out / dir / (id + "_mask.eocd1"), fwd.mask_prob);
      m.add(dir / (id + "_mask.eocd1"));
    }
    write_text(out, dir / (id + ".txt"),
               "sample_id=" + id + "\npredicted_class=" + std::to_string(sel.class_id) + "\ncount=" + fmt(count) +
                   "\ntrue_class=" + std::to_string(s->class_id) + "\ntrue_count=" + std::to_string(s->count) + "\n",
               m);
  }
  m.write(out);
  return m;
}

int cmd_grad_check(const GradSuiteOptions& options, std::ostream& os, const std::optional<fs::path>& out) {
  const auto rows = run_grad_suite(options);
  print_grad_table(os, rows, options.tolerance);
  const bool ok = all_passed(rows);
  os << (ok ? "all gradients agree\n" : "gradient check FAILED\n");
  if (out) {
    prepare_out_dir(*out);
    Manifest m;
    m.command = "grad-check";
    m.seed = options.base_seed;
    auto f = open_out(*out / "grad_check.csv");
    f << "op,seeds,checked,skipped_kinks,skipped_small,max_rel_error,passed\n";
    for (const auto& r : rows)
      f << r.op << ',' << r.seeds << ',' << r.checked << ',' << r.skipped_kinks << ',' << r.skipped_small << ','
        << fmt(r.max_rel_error) << ',' << (r.passed ? 1 : 0) << '\n';
    m.add("grad_check.csv");
    m.write(*out);
  }
  return ok ? kExitOk : kExitFailure;
}

Manifest cmd_memory_sweep(const ExperimentConfig& cfg, const std::vector<std::size_t>& sizes, const fs::path& out,
                          std::ostream* log) {
  cfg.validate();
  if (sizes.empty()) throw UsageError("memory-sweep needs at least one size");
  for (auto k : sizes)
    if (k == 0) throw UsageError("memory sizes must be >= 1");
  prepare_out_dir(out);
  Manifest m = start("memory-sweep", cfg);
  const auto bench = build_benchmark(cfg);
  write_text(out, "config.txt", cfg.to_text(), m);
  auto os = open_out(out / "memory_sweep.csv");
  os << "memory,seed,stage,MAE,MSE,cls_acc\n";
  for (auto k : sizes) {
    TrainConfig tc = cfg.train;
    tc.memory = k;
    const auto r = run_incremental(bench, cfg.arch, tc, Method::full);
    const auto& rep = r.reports.back();
    os << k << ',' << tc.seed << ',' << rep.stage << ',' << fmt(rep.mae) << ',' << fmt(rep.mse) << ','
       << fmt(rep.cls_acc) << '\n'
       << std::flush;
    if (log) *log << "memory " << k << ": MAE " << rep.mae << " MSE " << rep.mse << "\n" << std::flush;
  }
  m.add("memory_sweep.csv");
  m.write(out);
  return m;
}

int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace eoc
