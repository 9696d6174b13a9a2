// pecad: command-line front end for the synthetic PE CAD pipeline.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything else.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <functional>
#include <iostream>

#include <CLI11.hpp>

#include "pecad/bench/bench.hpp"
#include "pecad/core/io.hpp"
#include "pecad/data/exam_io.hpp"
#include "pecad/data/synth.hpp"

namespace fs = std::filesystem;
using namespace pecad;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
  std::string out;
};

// A config file either holds the section directly or nests it under `key`.
json section(const std::string& path, const std::string& key) {
  if (path.empty()) return json::object();
  json j = bench::load_config_file(path);
  if (j.is_object() && j.contains(key) && j.size() == 1) return j[key];
  return j;
}

json config_object(const std::string& path) {
  if (path.empty()) return json::object();
  json j = bench::load_config_file(path);
  if (!j.is_object()) throw Error(ErrorKind::kConfig, path + ": expected a mapping");
  return j;
}

void need_out(const Common& c) {
  if (c.out.empty()) throw Error(ErrorKind::kConfig, "--out is required");
}

// Runs fn(i) for i in [0, n) across up to `jobs` worker processes.
void parallel_over(int n, int jobs, const std::function<void(int)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::fflush(nullptr);
  const int workers = std::min(jobs, n);
  std::vector<pid_t> pids;
  for (int w = 0; w < workers; ++w) {
    const pid_t pid = ::fork();
    if (pid < 0) throw Error(ErrorKind::kIo, "fork failed");
    if (pid == 0) {
      int rc = 0;
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (const std::exception& e) {
        std::fprintf(stderr, "worker %d: %s\n", w, e.what());
        rc = 1;
      }
      std::fflush(nullptr);
      ::_exit(rc);
    }
    pids.push_back(pid);
  }
  bool ok = true;
  for (pid_t p : pids) {
    int status = 0;
    ::waitpid(p, &status, 0);
    ok = ok && WIFEXITED(status) && WEXITSTATUS(status) == 0;
  }
  if (!ok) throw Error(ErrorKind::kData, "a worker process failed");
}

std::vector<data::ExamRecord> load_records(const data::DatasetManifest& m) {
  std::vector<data::ExamRecord> out;
  for (const auto& e : m.entries) out.push_back(data::load_exam(e.path).second);
  return out;
}

int cmd_synth(const Common& c) {
  need_out(c);
  data::SynthConfig sc = section(c.config, "synth").get<data::SynthConfig>();
  data::validate(sc);
  const fs::path out = c.out;
  auto exams = data::synth_generate(sc, c.seed);
  std::vector<data::ManifestEntry> entries;
  std::vector<data::ExamRecord> records;
  json truth = json::object();
  for (const auto& e : exams) {
    const fs::path dir = out / "exams" / e.record.exam_id;
    data::save_exam(e.volume, e.record, dir);
    entries.push_back({e.record.exam_id, dir});
    records.push_back(e.record);
    json lesions = json::array();
    for (const auto& l : e.truth.lesions) {
      lesions.push_back({{"cx", l.cx}, {"cy", l.cy}, {"cz", l.cz}, {"radius", l.radius}, {"radius_z", l.radius_z},
                         {"region", l.region}, {"chronic", l.chronic}, {"slice_boxes", l.slice_boxes}});
    }
    truth[e.record.exam_id] = {
        {"lung_box", {e.truth.lung_y0, e.truth.lung_y1, e.truth.lung_x0, e.truth.lung_x1}}, {"lesions", lesions}};
  }
  data::write_manifest(data::make_manifest(entries), out / "manifest.csv");
  data::write_exam_labels(records, out / "exam_labels.csv");
  io::write_text_atomic(out / "truth.json", truth.dump(1) + "\n");
  io::write_text_atomic(out / "synth.json", json{{"synth", sc}, {"seed", c.seed}}.dump(2) + "\n");
  std::printf("wrote %zu exams to %s\n", exams.size(), out.string().c_str());
  return 0;
}

int cmd_preprocess(const Common& c, const std::string& manifest_path) {
  need_out(c);
  const auto pc = section(c.config, "preprocess").get<preprocess::PreprocConfig>();
  pc.validate();
  const auto m = data::read_manifest(manifest_path);
  fs::create_directories(c.out);
  parallel_over(static_cast<int>(m.entries.size()), c.jobs, [&](int i) {
    const auto [volume, record] = data::load_exam(m.entries[i].path);
    const auto p = preprocess::preprocess_exam(volume, pc);
    if (p.fallback) std::fprintf(stderr, "%s: no lung found, used the full frame\n", p.exam_id.c_str());
    preprocess::save_prep(p, c.out);
  });
  std::printf("preprocessed %zu exams into %s\n", m.entries.size(), c.out.c_str());
  return 0;
}

std::vector<image::LabeledExam> labeled(const data::DatasetManifest& m, const fs::path& prep_dir) {
  std::vector<image::LabeledExam> out;
  for (const auto& r : load_records(m)) out.push_back({preprocess::load_prep(prep_dir, r.exam_id), r});
  return out;
}

int cmd_train_image(const Common& c, const std::string& manifest_path, const std::string& prep_dir) {
  need_out(c);
  const json j = config_object(c.config);
  for (const auto& [k, v] : j.items()) {
    if (k != "model" && k != "train" && k != "val_fraction") throw Error(ErrorKind::kConfig, k + ": unknown field");
  }
  const auto spec = j.value("model", json::object()).get<backbones::ModelSpec>();
  spec.validate();
  auto tc = j.value("train", json::object()).get<image::TrainConfig>();
  if (c.seed_set) tc.seed = c.seed;
  tc.validate();
  const double vf = j.value("val_fraction", 0.1);
  const auto exams = labeled(data::read_manifest(manifest_path), prep_dir);
  auto [train, val] = image::split_validation(exams, vf, tc.seed);
  auto model = backbones::build_backbone(spec, tc.seed);
  const auto r = image::train_image_classifier(train, val, model, tc);
  const fs::path out = c.out;
  image::save_checkpoint(r.checkpoint, out / "model");
  io::write_text_atomic(out / "history.json", json(r.history).dump(2) + "\n");
  std::printf("best epoch %d, validation AUC %s; checkpoint %s\n", r.history.best_epoch,
              r.history.best_epoch >= 0 ? bench::format_number(r.history.val_auc[r.history.best_epoch]).c_str() : "nan",
              (out / "model").string().c_str());
  return 0;
}

int cmd_extract(const Common& c, const std::string& checkpoint, const std::string& manifest_path,
                const std::string& prep_dir) {
  need_out(c);
  if (checkpoint.empty()) throw Error(ErrorKind::kConfig, "--checkpoint is required");
  const auto model = image::model_from_checkpoint(image::load_checkpoint(checkpoint));
  const auto m = data::read_manifest(manifest_path);
  fs::create_directories(c.out);
  parallel_over(static_cast<int>(m.entries.size()), c.jobs, [&](int i) {
    const auto p = preprocess::load_prep(prep_dir, m.entries[i].exam_id);
    image::save_features(image::extract_exam_features(model, p), c.out);
  });
  std::printf("extracted features for %zu exams into %s\n", m.entries.size(), c.out.c_str());
  return 0;
}

int cmd_train_exam(const Common& c, const std::string& manifest_path, const std::string& feat_dir,
                   const std::string& test_manifest) {
  need_out(c);
  const json j = config_object(c.config);
  for (const auto& [k, v] : j.items()) {
    if (k != "head" && k != "train" && k != "val_fraction") throw Error(ErrorKind::kConfig, k + ": unknown field");
  }
  const auto hc = j.value("head", json::object()).get<exam::ExamHeadConfig>();
  hc.validate();
  auto tc = j.value("train", json::object()).get<image::TrainConfig>();
  if (c.seed_set) tc.seed = c.seed;
  tc.validate();
  const double vf = j.value("val_fraction", 0.1);
  auto samples = [&](const data::DatasetManifest& m) {
    std::vector<exam::ExamSample> s;
    for (const auto& r : load_records(m)) s.push_back({image::load_features(feat_dir, r.exam_id), r.labels});
    return s;
  };
  auto all = samples(data::read_manifest(manifest_path));
  if (all.size() < 2) throw Error(ErrorKind::kData, "need at least two training exams");
  // Same seeded exam-level hold-out rule as the image stage.
  std::vector<int> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return all[a].features.exam_id < all[b].features.exam_id; });
  std::mt19937_64 rng(tc.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const int n_val = std::clamp(static_cast<int>(std::ceil(vf * all.size())), 1, static_cast<int>(all.size()) - 1);
  std::vector<exam::ExamSample> train, val;
  for (int k = 0; k < static_cast<int>(order.size()); ++k) (k < n_val ? val : train).push_back(all[order[k]]);
  exam::ExamHead<float> head(hc, train.front().features.m, tc.seed);
  const auto hist = exam::train_exam_classifier(head, train, val, tc);
  const fs::path out = c.out;
  exam::save_head(head, json(hist), out / "head");
  std::printf("best epoch %d; head %s\n", hist.best_epoch, (out / "head").string().c_str());
  if (!test_manifest.empty()) {
    const auto test = samples(data::read_manifest(test_manifest));
    const auto preds = exam::predict_exams(head, test);
    const auto ev = exam::evaluate_predictions(preds, test);
    exam::write_exam_preds(preds, out / "exam_preds.csv");
    json per_label = json::object();
    for (int l = 0; l < data::kNumLabels; ++l) {
      per_label[std::string(data::kLabelNames[l])] = std::isnan(ev.auc[l]) ? json(nullptr) : json(ev.auc[l]);
    }
    io::write_text_atomic(out / "metrics.json",
                          json{{"mean_auc", ev.mean}, {"auc", per_label}, {"warnings", ev.warnings}}.dump(2) + "\n");
    for (const auto& w : ev.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    std::printf("test mean AUC %s\n", bench::format_number(ev.mean).c_str());
  }
  return 0;
}

int cmd_run(const Common& c) {
  if (c.config.empty()) throw Error(ErrorKind::kConfig, "--config is required");
  auto cfg = bench::load_experiment(c.config);
  if (!c.out.empty()) cfg.out = c.out;
  if (c.seed_set) cfg.seeds = {c.seed};
  const auto r = bench::run_experiment(cfg, {c.jobs, true});
  std::printf("%s: %d computed, %d cached, %d failed -> %s\n", cfg.name.c_str(), r.computed, r.cached, r.failed,
              r.dir.string().c_str());
  return r.failed ? 3 : 0;
}

int cmd_report(const Common& c, const std::string& dir) {
  const std::string target = !dir.empty() ? dir : c.out;
  if (target.empty()) throw Error(ErrorKind::kConfig, "results directory required (--out or positional)");
  const auto r = bench::report(target);
  for (const auto& f : r.figures) std::printf("%s\n", f.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pecad: synthetic CTPA pulmonary-embolism CAD pipeline"};
  app.require_subcommand(1);
  Common c;
  std::string manifest, prep, checkpoint, features, test_manifest, results;

  auto common = [&](CLI::App* s, bool with_jobs) {
    s->add_option("--config", c.config, "YAML or JSON config file");
    s->add_option("--seed", c.seed, "Seed")->each([&](const std::string&) { c.seed_set = true; });
    if (with_jobs) s->add_option("--jobs", c.jobs, "Parallel worker processes")->check(CLI::PositiveNumber);
    s->add_option("--out", c.out, "Output directory");
  };

  auto* synth = app.add_subcommand("synth", "Generate synthetic exams, manifest.csv and exam_labels.csv");
  common(synth, false);
  auto* pre = app.add_subcommand("preprocess", "Window, localize lungs, crop/resize, build triplets");
  common(pre, true);
  pre->add_option("--manifest", manifest, "manifest.csv")->required();
  auto* ti = app.add_subcommand("train-image", "Train an image-level classifier");
  common(ti, false);
  ti->add_option("--manifest", manifest, "manifest.csv")->required();
  ti->add_option("--prep", prep, "Preprocessed exam directory")->required();
  auto* ex = app.add_subcommand("extract", "Extract per-image feature sequences");
  common(ex, true);
  ex->add_option("--checkpoint", checkpoint, "Checkpoint stem (without .json/.f64)")->required();
  ex->add_option("--manifest", manifest, "manifest.csv")->required();
  ex->add_option("--prep", prep, "Preprocessed exam directory")->required();
  auto* te = app.add_subcommand("train-exam", "Train an exam-level head over extracted features");
  common(te, false);
  te->add_option("--manifest", manifest, "Training manifest.csv")->required();
  te->add_option("--features", features, "Feature directory")->required();
  te->add_option("--test-manifest", test_manifest, "Optional held-out manifest to evaluate");
  auto* run = app.add_subcommand("run", "Run an experiment grid (arms x seeds)");
  common(run, true);
  auto* rep = app.add_subcommand("report", "Render figures for a results directory");
  common(rep, false);
  rep->add_option("dir", results, "Results directory (defaults to --out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(c);
    if (*pre) return cmd_preprocess(c, manifest);
    if (*ti) return cmd_train_image(c, manifest, prep);
    if (*ex) return cmd_extract(c, checkpoint, manifest, prep);
    if (*te) return cmd_train_exam(c, manifest, features, test_manifest);
    if (*run) return cmd_run(c);
    if (*rep) return cmd_report(c, results);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return is_config_error(e.kind()) ? 2 : 3;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
