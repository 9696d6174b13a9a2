#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pecad/backbones/backbones.hpp"
#include "pecad/data/synth.hpp"
#include "pecad/exam/exam_level.hpp"
#include "pecad/image/image_level.hpp"
#include "pecad/preprocess/preprocess.hpp"

namespace pecad::bench {

namespace fs = std::filesystem;
using nlohmann::json;

// Bumped whenever a change alters cell results; part of every cell hash.
inline constexpr const char* kCodeVersion = "pecad-0.4";

// Parses a YAML or JSON file into JSON. Quoted YAML scalars stay strings;
// plain scalars become null, bool, integer or float when they parse as such.
json load_config_file(const fs::path& path);
json yaml_to_json(const std::string& text);

struct DataConfig {
  std::optional<data::SynthConfig> synth;  // exactly one of synth / manifest
  std::uint64_t synth_seed = 0;
  fs::path manifest;
  preprocess::PreprocConfig preprocess;
  int n_test = 0;
  std::uint64_t split_seed = 0;
  double val_fraction = 0.1;
};

struct HeadArm {
  std::string name;
  exam::ExamHeadConfig head;
  image::TrainConfig train;
};

struct ArmConfig {
  std::string label;
  backbones::ModelSpec model;
  image::TrainConfig train;  // init=checkpoint without a path uses the experiment's pretrain
  std::vector<HeadArm> exam_heads;
};

// Source-task pretraining shared by every arm that asks for it.
struct PretrainConfig {
  DataConfig data;  // n_test unused
  backbones::ModelSpec model;
  image::TrainConfig train;
};

struct TestSpec {
  std::string a, b, metric;
  bool one_tailed = true;
};

struct ReportConfig {
  int gradcam_samples = 4;
  std::vector<std::string> scatter;  // empty or two metric names
};

struct ExperimentConfig {
  std::string name;
  std::vector<std::uint64_t> seeds;
  DataConfig data;
  std::optional<PretrainConfig> pretrain;
  std::vector<ArmConfig> arms;
  std::vector<TestSpec> tests;
  ReportConfig report;
  fs::path out;
};

// Field-path errors (kConfig), e.g. "arms[1].train.lr: must be > 0".
// Relative paths resolve against base_dir.
ExperimentConfig parse_experiment(const json& j, const fs::path& base_dir = {});
ExperimentConfig load_experiment(const fs::path& path);
json to_json(const ExperimentConfig& c);
json to_json(const DataConfig& c);

// Preprocessed data for a (data config): the train pool and the held-out test
// split. Synthetic truth is kept for the test split when available.
struct PreparedData {
  std::vector<image::LabeledExam> train_pool;
  std::vector<image::LabeledExam> test;
  std::vector<data::SynthTruth> test_truth;
  std::string fingerprint;
};

PreparedData prepare_data(const DataConfig& c, bool split);

// Metric names of one cell, in CSV column order.
std::vector<std::string> metric_names(const ArmConfig& arm);

struct CellOutcome {
  std::string arm;
  std::uint64_t seed = 0;
  std::string hash;
  std::string status;  // ok | failed
  bool cached = false;
  std::string error;
  std::map<std::string, double> metrics;
};

struct RunOptions {
  int jobs = 1;
  bool verbose = true;
};

struct RunResult {
  fs::path dir;
  std::vector<CellOutcome> cells;
  int computed = 0;
  int cached = 0;
  int failed = 0;
};

// Trains and evaluates every (arm, seed) cell, reusing cells whose content
// hash is unchanged. Writes cells/<arm>/<seed>/, runs.csv, summary.csv,
// tests.csv, deltas.csv, config.json and manifest.json under cfg.out.
RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

// Bar charts with std whiskers, the optional scatter with Pearson R, and
// Grad-CAM++ overlays, each PNG with a JSON sidecar of the plotted values.
// Throws kData when dir holds no results.
struct ReportResult {
  std::vector<fs::path> figures;
  double gradcam_hit_rate = -1;  // fraction of argmaxes inside a lesion box; -1 if not computed
};
ReportResult report(const fs::path& dir, bool verbose = true);

// Shared CSV number format: shortest round-trip decimal, "nan" for NaN.
std::string format_number(double v);

}  // namespace pecad::bench
