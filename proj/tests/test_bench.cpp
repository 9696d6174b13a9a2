#include <gtest/gtest.h>

#include <fstream>
#include <map>

#include "pecad/bench/bench.hpp"
#include "pecad/core/io.hpp"
#include "pecad/metrics/metrics.hpp"
#include "test_util.hpp"

using namespace pecad;
using namespace pecad::bench;

namespace {

json tiny_experiment(const fs::path& out) {
  json j = json::parse(R"({
    "name": "tiny",
    "seeds": 3,
    "data": {"synth": {"n_exams": 24, "image_size": 48, "slices_min": 3, "slices_max": 4, "lesion_probability": 0.6},
             "synth_seed": 2, "preprocess": {"out_size": 32}, "n_test": 8, "val_fraction": 0.2},
    "arms": [
      {"label": "plain", "model": {"family": "residual"}, "train": {"epochs": 1, "batch_size": 16},
       "exam_heads": [{"name": "mp", "head": {"kind": "mil", "mode": "MP"}, "train": {"epochs": 2, "batch_size": 4}}]},
      {"label": "se", "model": {"family": "residual", "with_se": true, "se_ratio": 4},
       "train": {"epochs": 1, "batch_size": 16}}
    ],
    "tests": [{"a": "se", "b": "plain", "metric": "image_auc"}],
    "report": {"gradcam_samples": 2, "scatter": ["val_auc", "image_auc"]}
  })");
  j["out"] = out.string();
  return j;
}

std::map<std::string, std::string> read_tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = io::read_text(e.path());
  return out;
}

void expect_config_error(const std::string& yaml, const std::string& fragment) {
  try {
    parse_experiment(yaml_to_json(yaml));
    ADD_FAILURE() << "no error for: " << yaml;
  } catch (const Error& e) {
    EXPECT_TRUE(is_config_error(e.kind())) << e.what();
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

const char* kBase = R"(
name: t
data: {synth: {n_exams: 20}, n_test: 5}
arms:
  - label: a
    model: {family: residual}
)";

}  // namespace

TEST(Yaml, ScalarsAndStructure) {
  const auto j = yaml_to_json("a: 1\nb: 1.5\nc: true\nd: '7'\ne: ~\nf: [x, 2]\ng: {h: -3e-2}\ni: yes\n");
  EXPECT_EQ(j["a"], 1);
  EXPECT_TRUE(j["a"].is_number_integer());
  EXPECT_EQ(j["b"], 1.5);
  EXPECT_EQ(j["c"], true);
  EXPECT_EQ(j["d"], "7");
  EXPECT_TRUE(j["e"].is_null());
  EXPECT_EQ(j["f"], json::array({"x", 2}));
  EXPECT_EQ(j["g"]["h"], -0.03);
  EXPECT_EQ(j["i"], "yes");
}

TEST(Config, DefaultsAndPaths) {
  const auto c = parse_experiment(yaml_to_json(kBase), "/base");
  EXPECT_EQ(c.seeds.size(), 10u);
  EXPECT_EQ(c.seeds[9], 9u);
  EXPECT_EQ(c.arms[0].train.epochs, image::TrainConfig{}.epochs);
  EXPECT_TRUE(c.out.empty());
  const auto d = parse_experiment(yaml_to_json(std::string(kBase) + "seeds: [4, 9]\nout: res\n"), "/base");
  EXPECT_EQ(d.seeds, (std::vector<std::uint64_t>{4, 9}));
  EXPECT_EQ(d.out, fs::path("/base/res"));
  // Round trip through the canonical JSON.
  EXPECT_EQ(to_json(parse_experiment(to_json(d), "/base")), to_json(d));
}

TEST(Config, FieldPathErrors) {
  const std::string b = kBase;
  expect_config_error(b + "colour: red\n", "colour: unknown field");
  expect_config_error(R"(
name: t
data: {synth: {n_exams: 20}, n_test: 5}
arms:
  - {label: a, model: {family: residual}}
  - {label: b, model: {family: residual}, train: {lr: -1}}
)", "arms[1].train.lr");
  expect_config_error(R"(
name: t
data: {synth: {n_exams: 20, bogus: 1}, n_test: 5}
arms: [{label: a, model: {family: residual}}]
)", "data.synth.bogus");
  expect_config_error(R"(
name: t
data: {n_test: 5}
arms: [{label: a, model: {family: residual}}]
)", "data");
  expect_config_error(R"(
name: t
data: {synth: {n_exams: 20}, n_test: 5}
arms: [{label: a, model: {family: residual}}, {label: a, model: {family: xception}}]
)", "arms[1].label");
  expect_config_error(b + "tests: [{a: a, b: zz, metric: image_auc}]\n", "tests[0]: unknown arm");
  expect_config_error(b + "tests: [{a: a, b: a, metric: exam_cc_mean}]\n", "tests[0].metric");
  expect_config_error(R"(
name: t
data: {synth: {n_exams: 20}, n_test: 5}
arms: [{label: a, model: {family: residual}, train: {init: checkpoint}}]
)", "arms[0].train");
  expect_config_error(R"(
name: t
data: {synth: {n_exams: 20}, n_test: 5, preprocess: {out_size: 48}}
arms: [{label: v, model: {family: vit, vit: {image_size: 64, patch: 16}}}]
)", "arms[0].model.vit.image_size");
  expect_config_error(R"(
name: t
data: {synth: {n_exams: 20}, n_test: 5, preprocess: {out_size: 48}}
arms: [{label: v, model: {family: vit, vit: {image_size: 48, patch: 10}}}]
)", "arms[0].model");
}

TEST(Config, MetricNames) {
  const auto c = parse_experiment(tiny_experiment("/tmp/x"));
  const auto names = metric_names(c.arms[0]);
  ASSERT_EQ(names.size(), 2u + 10u);
  EXPECT_EQ(names[0], "image_auc");
  EXPECT_EQ(names[1], "val_auc");
  EXPECT_EQ(names[2], "exam_mp_mean");
  EXPECT_EQ(names[3], "exam_mp_negative_exam_for_pe");
  EXPECT_EQ(metric_names(c.arms[1]).size(), 2u);
}

TEST(FormatNumber, ShortestRoundTrip) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(std::nan("")), "nan");
  for (double v : {1.0 / 3, 0.9634, 1e-300, 123456.789}) EXPECT_EQ(std::stod(format_number(v)), v);
}

class BenchRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = testkit::scratch_dir("bench_run");
    cfg_ = parse_experiment(tiny_experiment(dir_ / "out"));
    first_ = run_experiment(cfg_, {1, false});
  }
  static inline fs::path dir_;
  static inline ExperimentConfig cfg_;
  static inline RunResult first_;
};

TEST_F(BenchRun, GridBookkeeping) {
  EXPECT_EQ(first_.cells.size(), 6u);
  EXPECT_EQ(first_.computed, 6);
  EXPECT_EQ(first_.failed, 0);
  const auto runs = io::read_csv(cfg_.out / "runs.csv");
  ASSERT_EQ(runs.size(), 7u);
  EXPECT_EQ(runs[0][0], "arm");
  EXPECT_EQ(runs[0].size(), 3u + 12u);  // union of both arms' metrics
  for (std::size_t i = 1; i < runs.size(); ++i) EXPECT_EQ(runs[i][2], "ok");
  // The head-less arm leaves exam columns empty.
  for (std::size_t i = 1; i < runs.size(); ++i)
    if (runs[i][0] == "se") EXPECT_EQ(runs[i][5], "");
  for (const auto& c : first_.cells) {
    const auto d = cfg_.out / "cells" / c.arm / std::to_string(c.seed);
    EXPECT_TRUE(fs::exists(d / "metrics.json"));
    EXPECT_TRUE(fs::exists(d / "model.f64"));
    EXPECT_EQ(fs::exists(d / "exam_preds_mp.csv"), c.arm == "plain");
  }
  const auto m = io::read_json(cfg_.out / "manifest.json");
  EXPECT_EQ(m["cells"].size(), 6u);
}

TEST_F(BenchRun, SummaryAndTestsMatchDirectComputation) {
  std::map<std::string, std::vector<double>> by_arm;
  for (const auto& c : first_.cells) by_arm[c.arm].push_back(c.metrics.at("image_auc"));
  const auto summary = io::read_csv(cfg_.out / "summary.csv");
  std::map<std::string, metrics::RunAggregate> agg;
  for (const auto& [arm, v] : by_arm) agg[arm] = metrics::aggregate_runs(v);
  int seen = 0;
  for (const auto& row : summary) {
    if (row[1] != "image_auc") continue;
    EXPECT_EQ(std::stod(row[2]), agg[row[0]].mean);
    EXPECT_EQ(std::stod(row[3]), agg[row[0]].std);
    EXPECT_EQ(row[4], "3");
    ++seen;
  }
  EXPECT_EQ(seen, 2);
  const auto tests = io::read_csv(cfg_.out / "tests.csv");
  ASSERT_EQ(tests.size(), 2u);
  const auto& a = agg["se"];
  const auto& b = agg["plain"];
  const auto t = metrics::ttest_from_summary(a.mean, a.std, a.n, b.mean, b.std, b.n, true);
  EXPECT_EQ(std::stod(tests[1][11]), t.p);
  EXPECT_EQ(std::stod(tests[1][9]), t.t);
  const auto deltas = io::read_csv(cfg_.out / "deltas.csv");
  EXPECT_EQ(deltas.size(), 4u);
}

TEST_F(BenchRun, RerunIsCachedAndIdentical) {
  const auto before = read_tree(cfg_.out / "cells");
  const auto summary = io::read_text(cfg_.out / "summary.csv");
  const auto again = run_experiment(cfg_, {1, false});
  EXPECT_EQ(again.computed, 0);
  EXPECT_EQ(again.cached, 6);
  EXPECT_EQ(read_tree(cfg_.out / "cells"), before);
  EXPECT_EQ(io::read_text(cfg_.out / "summary.csv"), summary);
}

TEST_F(BenchRun, ChangedArmRecomputesOnlyThatArm) {
  auto cfg = cfg_;
  cfg.out = dir_ / "changed";
  fs::copy(cfg_.out, cfg.out, fs::copy_options::recursive);
  cfg.arms[1].train.lr = 2e-3;
  const auto r = run_experiment(cfg, {1, false});
  EXPECT_EQ(r.cached, 3);
  EXPECT_EQ(r.computed, 3);
}

TEST_F(BenchRun, ParallelJobsGiveIdenticalTables) {
  auto cfg = cfg_;
  cfg.out = dir_ / "parallel";
  run_experiment(cfg, {2, false});
  for (const char* f : {"runs.csv", "summary.csv", "tests.csv", "deltas.csv"})
    EXPECT_EQ(io::read_text(cfg.out / f), io::read_text(cfg_.out / f)) << f;
}

TEST_F(BenchRun, ReportSidecarsMatchTables) {
  const auto res = report(cfg_.out, false);
  EXPECT_GE(res.figures.size(), 3u);
  for (const auto& f : res.figures) EXPECT_TRUE(fs::exists(f)) << f;
  const auto summary = io::read_csv(cfg_.out / "summary.csv");
  const auto bar = io::read_json(cfg_.out / "figures" / "bar_image_auc.json");
  for (const auto& b : bar["bars"])
    for (const auto& row : summary)
      if (row[0] == b["arm"] && row[1] == "image_auc") EXPECT_EQ(b["mean"].get<double>(), std::stod(row[2]));

  const auto sc = io::read_json(cfg_.out / "figures" / "scatter.json");
  std::vector<double> x, y;
  for (const auto& p : sc["points"]) {
    x.push_back(p["x"]);
    y.push_back(p["y"]);
  }
  ASSERT_EQ(x.size(), 2u);
  const auto corr = io::read_csv(cfg_.out / "correlation.csv");
  EXPECT_EQ(std::stod(corr[1][3]), metrics::pearson_r(x, y));

  const auto cam = io::read_csv(cfg_.out / "gradcam.csv");
  EXPECT_EQ(cam.size(), 3u);
  EXPECT_GE(res.gradcam_hit_rate, 0.0);
  EXPECT_LE(res.gradcam_hit_rate, 1.0);
}

TEST(Report, EmptyDirectoryIsDataError) {
  const auto dir = testkit::scratch_dir("bench_empty");
  EXPECT_ERROR_KIND(report(dir, false), ErrorKind::kData);
}

TEST(BenchFailure, IncompatibleCheckpointFailsOnlyItsCells) {
  const auto dir = testkit::scratch_dir("bench_fail");
  // A checkpoint from a different architecture.
  backbones::ModelSpec vit;
  vit.family = "vit";
  vit.vit.image_size = 32;
  vit.vit.patch = 8;
  image::save_checkpoint(image::make_checkpoint(backbones::build_backbone(vit, 0)), dir / "vit");
  auto j = tiny_experiment(dir / "out");
  j["seeds"] = 2;
  j["arms"][1]["train"]["init"] = "checkpoint";
  j["arms"][1]["train"]["checkpoint"] = (dir / "vit").string();
  j.erase("report");
  const auto r = run_experiment(parse_experiment(j), {1, false});
  EXPECT_EQ(r.failed, 2);
  for (const auto& c : r.cells) {
    EXPECT_EQ(c.status, c.arm == "se" ? "failed" : "ok");
    if (c.arm == "se") {
      EXPECT_NE(c.error.find("incompatible"), std::string::npos) << c.error;
      EXPECT_TRUE(fs::exists(dir / "out" / "cells" / "se" / std::to_string(c.seed) / "failed.json"));
    }
  }
  const auto tests = io::read_csv(dir / "out" / "tests.csv");
  ASSERT_EQ(tests.size(), 2u);
  EXPECT_EQ(tests[1][11], "nan");
}
