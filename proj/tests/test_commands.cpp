#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <sys/wait.h>

#include "eocount/commands.hpp"
#include "eocount/config.hpp"
#include "eocount/io.hpp"
#include "eocount/metrics.hpp"

using namespace eoc;
namespace fs = std::filesystem;

namespace {

const char* kTiny =
    "bench.classes=2\nbench.train=4\nbench.val=2\nbench.test=3\nbench.image_size=32\n"
    "train.epochs=1\ntrain.batch_size=4\ntrain.memory=4\n"
    "arch.backbone=3,4,4,4\narch.trunk=4\narch.mask=3\narch.feedback=3\n";

ExperimentConfig tiny() { return make_config(parse_key_values(kTiny)); }

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> row;
    std::istringstream f(line);
    for (std::string cell; std::getline(f, cell, ',');) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

int guarded(const std::function<void()>& body) {
  std::ostringstream err;
  return run_guarded(
      [&] {
        body();
        return static_cast<int>(kExitOk);
      },
      err);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(EOCOUNT_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsPerProfile) {
  auto desk = make_config({});
  EXPECT_EQ(desk.profile, "desk");
  EXPECT_EQ(desk.train.epochs, 60);
  EXPECT_EQ(desk.bench.classes, 4);
  EXPECT_EQ(desk.bench.sizes.train, 200u);
  EXPECT_EQ(desk.bench.sizes.test, 50u);
  EXPECT_EQ(desk.bench.image_size, 64u);
  auto paper = make_config({}, std::string("paper"));
  EXPECT_EQ(paper.train.epochs, 300);
  EXPECT_EQ(paper.train.lr, 1e-5);
  EXPECT_EQ(paper.arch.backbone, (std::vector<std::size_t>{16, 32, 64, 64}));
  EXPECT_EQ(make_config({{"profile", "paper"}}).train.epochs, 300);
}

TEST(Config, ParsesKeys) {
  auto c = make_config(parse_key_values("# comment\ntrain.lr = 2e-4  # inline\nmethod=ablation:no-feedback\n"
                                        "train.gate_with_truth=true\narch.backbone=4,5,6,7\n"));
  EXPECT_EQ(c.train.lr, 2e-4);
  EXPECT_TRUE(c.method.ablation);
  EXPECT_EQ(c.method.variant, MaskVariant::no_feedback);
  EXPECT_TRUE(c.train.gate_with_truth);
  EXPECT_EQ(c.arch.backbone, (std::vector<std::size_t>{4, 5, 6, 7}));
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(make_config({{"train.learning_rate", "1"}}), ConfigError);
  EXPECT_THROW(make_config({{"train.lambda", "1.5"}}), ConfigError);
  EXPECT_THROW(make_config({{"bench.image_size", "30"}}), ConfigError);
  EXPECT_THROW(make_config({{"bench.image_size", "28"}}), ConfigError);
  EXPECT_THROW(make_config({{"bench.classes", "6"}}), ConfigError);
  EXPECT_THROW(make_config({{"train.epochs", "ten"}}), ConfigError);
  EXPECT_THROW(make_config({{"method", "icarl"}}), ConfigError);
  EXPECT_THROW(make_config({{"method", "ablation:nothing"}}), ConfigError);
  EXPECT_THROW(make_config({{"arch.backbone", "4,4"}}), ConfigError);
  EXPECT_THROW(make_config({}, std::string("laptop")), ConfigError);
  EXPECT_THROW(parse_key_values("a=1\na=2\n"), ConfigError);
  EXPECT_THROW(parse_key_values("just a line\n"), ConfigError);
}

TEST(Config, TextRoundTripAndHash) {
  auto c = tiny();
  auto back = make_config(parse_key_values(c.to_text()));
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(c.hash().size(), 16u);
  auto d = c;
  d.train.seed = 1;
  EXPECT_NE(d.hash(), c.hash());
  for (const auto& s : {"full", "ft", "joint", "ablation:unsupervised-mask"})
    EXPECT_EQ(MethodSpec::parse(s).to_string(), s);
}

TEST(Commands, OutDirParentMustExist) {
  EXPECT_THROW(prepare_out_dir("/nonexistent_parent_dir/out"), UsageError);
  EXPECT_EQ(guarded([] { cmd_gen_data(tiny(), "/nonexistent_parent_dir/out"); }), kExitUsage);
}

TEST(Commands, GenDataIsByteIdentical) {
  TempDir a("eocount_gen_a"), b("eocount_gen_b");
  auto cfg = tiny();
  auto ma = cmd_gen_data(cfg, a.path / "d");
  auto mb = cmd_gen_data(cfg, b.path / "d");
  EXPECT_EQ(ma.artifacts, mb.artifacts);
  EXPECT_EQ(ma.artifacts.back(), "manifest.json");
  for (const auto& rel : ma.artifacts) EXPECT_EQ(slurp(a.path / "d" / rel), slurp(b.path / "d" / rel)) << rel;

  auto count_lines = [&](const std::string& rel) { return read_csv(a.path / "d" / rel).size(); };
  EXPECT_EQ(count_lines("stage_1/train_index.txt"), 8u);  // class 1 + background
  EXPECT_EQ(count_lines("stage_2/train_index.txt"), 4u);
  EXPECT_EQ(count_lines("stage_2/val_index.txt"), 2u);
  EXPECT_EQ(count_lines("stage_2/test_index.txt"), 3u);

  auto j = nlohmann::json::parse(slurp(a.path / "d" / "manifest.json"));
  EXPECT_EQ(j["command"], "gen-data");
  EXPECT_EQ(j["config_hash"], cfg.hash());
}

TEST(Commands, TrainEvalExport) {
  TempDir dir("eocount_train");
  auto cfg = tiny();
  std::ostringstream log;
  auto m = cmd_train(cfg, dir.path / "full", std::nullopt, &log);
  for (int k = 1; k <= 2; ++k) {
    const auto stage = dir.path / "full" / ("stage_" + std::to_string(k));
    EXPECT_TRUE(fs::exists(stage / "checkpoint.eocm1"));
    EXPECT_TRUE(fs::exists(stage / "bank.csv"));
    auto hist = read_csv(stage / "history.csv");
    EXPECT_EQ(hist.size(), 2u);  // header + 1 epoch
  }
  EXPECT_FALSE(fs::exists(dir.path / "full" / "stage_3"));
  auto bank = read_csv(dir.path / "full" / "stage_2" / "bank.csv");
  EXPECT_EQ(bank[0], (std::vector<std::string>{"class_id", "sample_id", "distance"}));
  EXPECT_LE(bank.size() - 1, 4u);
  EXPECT_NE(log.str().find("stage 2"), std::string::npos);

  // ft keeps no bank
  auto ftcfg = cfg;
  ftcfg.method = MethodSpec::parse("ft");
  cmd_train(ftcfg, dir.path / "ft");
  EXPECT_FALSE(fs::exists(dir.path / "ft" / "stage_1" / "bank.csv"));
  EXPECT_FALSE(fs::exists(dir.path / "ft" / "stage_2" / "bank.csv"));

  // report columns and pairs self-consistency
  auto rep = read_csv(dir.path / "full" / "report.csv");
  EXPECT_EQ(rep[0], (std::vector<std::string>{"stage", "class_id", "N", "MAE", "MSE", "cls_acc"}));
  auto pairs = read_csv(dir.path / "full" / "pairs.csv");
  for (std::size_t r = 1; r < rep.size(); ++r) {
    std::vector<CountPair> p;
    for (std::size_t i = 1; i < pairs.size(); ++i)
      if (pairs[i][0] == rep[r][0] && pairs[i][2] == rep[r][1]) p.push_back({std::stod(pairs[i][4]), std::stod(pairs[i][5])});
    ASSERT_EQ(p.size(), std::stoul(rep[r][2]));
    EXPECT_NEAR(mae(p), std::stod(rep[r][3]), 1e-12);
    EXPECT_NEAR(mse(p), std::stod(rep[r][4]), 1e-12);
    EXPECT_GE(std::stod(rep[r][4]) + 1e-12, std::stod(rep[r][3]));
  }

  // eval of the stage-2 checkpoint
  const auto ckpt = dir.path / "full" / "stage_2" / "checkpoint.eocm1";
  cmd_eval(cfg, ckpt, dir.path / "eval");
  auto ev = read_csv(dir.path / "eval" / "report.csv");
  EXPECT_EQ(ev.size(), 1u + 3u);  // background + 2 classes, one stage
  EXPECT_EQ(slurp(dir.path / "eval" / "report.csv"), [&] {
    std::ostringstream os;
    auto all = read_csv(dir.path / "full" / "report.csv");
    os << "stage,class_id,N,MAE,MSE,cls_acc\n";
    for (const auto& row : all)
      if (row[0] == "2") os << row[0] << ',' << row[1] << ',' << row[2] << ',' << row[3] << ',' << row[4] << ',' << row[5] << '\n';
    return os.str();
  }());

  // stage/class mismatch and a missing checkpoint are data errors
  auto one = cfg;
  one.bench.classes = 1;
  EXPECT_EQ(guarded([&] { cmd_eval(one, ckpt, dir.path / "bad"); }), kExitData);
  EXPECT_EQ(guarded([&] { cmd_eval(cfg, dir.path / "nope.eocm1", dir.path / "bad"); }), kExitData);

  // export maps
  auto bench = build_benchmark(cfg);
  const auto bg = bench[0].test.back();  // background sample
  ASSERT_EQ(bg.class_id, 0);
  const auto fg = bench[1].test.front();
  cmd_export_maps(cfg, ckpt, {fg.seed, bg.seed}, dir.path / "maps");
  for (auto id : {fg.seed, bg.seed}) {
    const auto base = dir.path / "maps" / "maps" / std::to_string(id);
    const auto dens = fs::path(base.string() + "_density.eocd1");
    EXPECT_EQ(slurp(dens).substr(0, 5), "EOCD1");
    EXPECT_EQ(slurp(fs::path(base.string() + "_mask.eocd1")).substr(0, 5), "EOCD1");
    double s = 0;
    const auto dmap = read_eocd1(dens);
    for (double v : dmap.data()) s += v;
    std::ifstream side(base.string() + ".txt");
    std::map<std::string, std::string> kv;
    for (std::string line; std::getline(side, line);) kv[line.substr(0, line.find('='))] = line.substr(line.find('=') + 1);
    EXPECT_NEAR(std::stod(kv["count"]), s, 1e-9);
    const auto pred = predict_count(load_checkpoint(ckpt), id == bg.seed ? bg.image : fg.image);
    EXPECT_EQ(kv["predicted_class"], std::to_string(pred.class_id));
  }
  EXPECT_EQ(guarded([&] { cmd_export_maps(cfg, ckpt, {12345}, dir.path / "maps2"); }), kExitData);
}

TEST(Commands, SidecarShowsBackgroundClass) {
  TempDir dir("eocount_bgside");
  auto cfg = tiny();
  auto model = build_initial(cfg.arch, 1);
  model.classifier_bias[0] = 100.0;  // always predicts background
  save_checkpoint(dir.path / "bg.eocm1", model);
  const auto id = build_benchmark(cfg)[0].test.front().seed;
  cmd_export_maps(cfg, dir.path / "bg.eocm1", {id}, dir.path / "out");
  EXPECT_NE(slurp(dir.path / "out" / "maps" / (std::to_string(id) + ".txt")).find("predicted_class=0"),
            std::string::npos);
}

TEST(Commands, TrainRerunIsBitwise) {
  TempDir dir("eocount_rerun");
  auto cfg = tiny();
  cmd_train(cfg, dir.path / "a");
  cmd_train(cfg, dir.path / "b");
  EXPECT_EQ(slurp(dir.path / "a" / "stage_2" / "checkpoint.eocm1"),
            slurp(dir.path / "b" / "stage_2" / "checkpoint.eocm1"));
  EXPECT_EQ(slurp(dir.path / "a" / "report.csv"), slurp(dir.path / "b" / "report.csv"));
}

TEST(Commands, JointWritesSingleStage) {
  TempDir dir("eocount_joint");
  auto cfg = tiny();
  cfg.method = MethodSpec::parse("joint");
  cmd_train(cfg, dir.path / "j");
  EXPECT_TRUE(fs::exists(dir.path / "j" / "stage_2" / "checkpoint.eocm1"));
  EXPECT_FALSE(fs::exists(dir.path / "j" / "stage_1"));
  auto rep = read_csv(dir.path / "j" / "report.csv");
  for (std::size_t r = 1; r < rep.size(); ++r) EXPECT_EQ(rep[r][0], "2");
}

TEST(Commands, GenDataImportFeedsTraining) {
  TempDir dir("eocount_import");
  auto cfg = tiny();
  cmd_gen_data(cfg, dir.path / "data");
  cmd_train(cfg, dir.path / "from_disk", dir.path / "data");
  cmd_train(cfg, dir.path / "generated");
  EXPECT_EQ(slurp(dir.path / "from_disk" / "stage_2" / "checkpoint.eocm1"),
            slurp(dir.path / "generated" / "stage_2" / "checkpoint.eocm1"));
  EXPECT_EQ(guarded([&] { cmd_train(cfg, dir.path / "x", dir.path / "missing"); }), kExitData);
}

TEST(Commands, GradCheckExitCodes) {
  GradSuiteOptions o;
  o.seeds = 2;
  std::ostringstream os;
  EXPECT_EQ(cmd_grad_check(o, os), kExitOk);
  EXPECT_NE(os.str().find("all gradients agree"), std::string::npos);
  for (const auto& op : grad_suite_ops()) EXPECT_NE(os.str().find(op), std::string::npos) << op;
  o.fault = GradFault::conv2d_weight;
  std::ostringstream bad;
  EXPECT_EQ(cmd_grad_check(o, bad), kExitFailure);
}

TEST(Commands, MemorySweepRows) {
  TempDir dir("eocount_sweep");
  auto cfg = tiny();
  cfg.train.seed = 17;
  cmd_memory_sweep(cfg, {2, 6}, dir.path / "s");
  auto rows = read_csv(dir.path / "s" / "memory_sweep.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"memory", "seed", "stage", "MAE", "MSE", "cls_acc"}));
  EXPECT_EQ(rows[1][0], "2");
  EXPECT_EQ(rows[2][0], "6");
  EXPECT_EQ(rows[1][1], "17");
  EXPECT_THROW(cmd_memory_sweep(cfg, {}, dir.path / "t"), UsageError);
}

TEST(Cli, ExitCodes) {
  TempDir dir("eocount_cli");
  const auto cfg = dir.path / "tiny.cfg";
  {
    std::ofstream f(cfg);
    f << kTiny;
  }
  const std::string c = "--config " + cfg.string() + " ";
  EXPECT_EQ(run_cli(c + "--out " + (dir.path / "d").string() + " gen-data"), 0);
  EXPECT_EQ(run_cli(c + "--out /nonexistent_parent_dir/x gen-data"), 2);
  EXPECT_EQ(run_cli(c + "--out " + (dir.path / "t").string() + " train --method sgd"), 2);
  EXPECT_EQ(run_cli("--out " + (dir.path / "t").string() + " --profile laptop gen-data"), 2);
  EXPECT_EQ(run_cli("bogus-command"), 2);
  {
    std::ofstream f(dir.path / "bad.cfg");
    f << "train.lambda=2\n";
  }
  EXPECT_EQ(run_cli("--config " + (dir.path / "bad.cfg").string() + " --out " + (dir.path / "t").string() +
                    " gen-data"),
            2);
  EXPECT_EQ(run_cli(c + "--out " + (dir.path / "e").string() + " eval --checkpoint " +
                    (dir.path / "none.eocm1").string()),
            3);
  EXPECT_EQ(run_cli("grad-check --seeds 1"), 0);
  EXPECT_EQ(run_cli("grad-check --seeds 1 --inject-fault"), 1);
}
