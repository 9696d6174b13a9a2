#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <limits>
#include <set>
#include <sstream>

#include <opencv2/core.hpp>

#include "pecad/bench/bench.hpp"
#include "pecad/core/io.hpp"
#include "pecad/data/exam_io.hpp"
#include "pecad/metrics/metrics.hpp"

namespace pecad::bench {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_json_atomic(const fs::path& path, const json& j) { io::write_text_atomic(path, j.dump(2) + "\n"); }

std::string data_fingerprint(const DataConfig& c) {
  json j = to_json(c);
  if (!c.manifest.empty()) {
    j.erase("manifest");
    j["manifest_fingerprint"] = data::read_manifest(c.manifest).fingerprint;
  }
  return io::sha256_hex(j.dump());
}

std::string pretrain_hash(const PretrainConfig& p) {
  const json j = {{"version", kCodeVersion},
                  {"data", data_fingerprint(p.data)},
                  {"val_fraction", p.data.val_fraction},
                  {"model", p.model},
                  {"train", p.train}};
  return io::sha256_hex(j.dump());
}

json arm_json(const ArmConfig& a) {
  json heads = json::array();
  for (const auto& h : a.exam_heads) heads.push_back({{"name", h.name}, {"head", h.head}, {"train", h.train}});
  return {{"label", a.label}, {"model", a.model}, {"train", a.train}, {"exam_heads", heads}};
}

json metrics_to_json(const std::map<std::string, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = std::isnan(v) ? json(nullptr) : json(v);
  return j;
}

std::map<std::string, double> metrics_from_json(const json& j) {
  std::map<std::string, double> m;
  for (const auto& [k, v] : j.items()) m[k] = v.is_null() ? kNaN : v.get<double>();
  return m;
}

std::vector<exam::ExamSample> features_of(const image::ModelHandle& model, const std::vector<image::LabeledExam>& v) {
  std::vector<exam::ExamSample> out;
  out.reserve(v.size());
  for (const auto& e : v) out.push_back({image::extract_exam_features(model, e.prep), e.record.labels});
  return out;
}

// One (arm, seed) cell. The seed drives the validation split, shuffling and
// every initialization in the cell.
std::map<std::string, double> run_cell(const ExperimentConfig& cfg, const PreparedData& d, const ArmConfig& arm,
                                       std::uint64_t seed, const fs::path& dir, const fs::path& pretrain_stem) {
  std::map<std::string, double> m;
  auto [train, val] = image::split_validation(d.train_pool, cfg.data.val_fraction, seed);
  image::TrainConfig tc = arm.train;
  tc.seed = seed;
  if (tc.init == "checkpoint" && tc.checkpoint.empty()) tc.checkpoint = pretrain_stem;
  auto model = backbones::build_backbone(arm.model, seed);
  const auto r = image::train_image_classifier(train, val, model, tc);
  m["image_auc"] = image::evaluate_image_level(model, d.test);
  m["val_auc"] = r.history.best_epoch >= 0 ? r.history.val_auc[r.history.best_epoch] : kNaN;
  image::save_checkpoint(r.checkpoint, dir / "model");
  write_json_atomic(dir / "history.json", json(r.history));

  if (arm.exam_heads.empty()) return m;
  const auto ftrain = features_of(model, train);
  const auto fval = features_of(model, val);
  const auto ftest = features_of(model, d.test);
  for (const auto& h : arm.exam_heads) {
    exam::ExamHead<float> head(h.head, model.feature_dim(), seed);
    image::TrainConfig ht = h.train;
    ht.seed = seed;
    const auto hist = exam::train_exam_classifier(head, ftrain, fval, ht);
    const auto preds = exam::predict_exams(head, ftest);
    const auto ev = exam::evaluate_predictions(preds, ftest);
    const std::string p = "exam_" + h.name + "_";
    m[p + "mean"] = ev.mean;
    for (int l = 0; l < data::kNumLabels; ++l) m[p + std::string(data::kLabelNames[l])] = ev.auc[l];
    exam::write_exam_preds(preds, dir / ("exam_preds_" + h.name + ".csv"));
    exam::save_head(head, json(hist), dir / ("head_" + h.name));
  }
  return m;
}

struct Cell {
  const ArmConfig* arm;
  std::uint64_t seed;
  fs::path dir;
  std::string hash;
  bool cached = false;
};

bool cell_cached(const Cell& c) {
  const fs::path p = c.dir / "metrics.json";
  if (!fs::exists(p)) return false;
  try {
    const json j = io::read_json(p);
    return j.value("hash", "") == c.hash && j.value("status", "") == "ok";
  } catch (const std::exception&) {
    return false;
  }
}

void write_csv(const fs::path& path, const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream out;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << "\n";
  }
  io::write_text_atomic(path, out.str());
}

void write_tables(const ExperimentConfig& cfg, const std::vector<CellOutcome>& cells, const fs::path& out) {
  std::vector<std::string> columns;
  for (const auto& a : cfg.arms) {
    for (const auto& n : metric_names(a)) {
      if (std::find(columns.begin(), columns.end(), n) == columns.end()) columns.push_back(n);
    }
  }
  std::vector<std::vector<std::string>> runs = {{"arm", "seed", "status"}};
  runs[0].insert(runs[0].end(), columns.begin(), columns.end());
  for (const auto& c : cells) {
    std::vector<std::string> row = {c.arm, std::to_string(c.seed), c.status};
    for (const auto& n : columns) {
      auto it = c.metrics.find(n);
      row.push_back(it == c.metrics.end() ? "" : format_number(it->second));
    }
    runs.push_back(std::move(row));
  }
  write_csv(out / "runs.csv", runs);

  // Per-arm, per-metric values over successful seeds (NaN entries skipped).
  auto values = [&](const std::string& arm, const std::string& metric) {
    std::vector<std::pair<std::uint64_t, double>> v;
    for (const auto& c : cells) {
      if (c.arm != arm || c.status != "ok") continue;
      auto it = c.metrics.find(metric);
      if (it != c.metrics.end() && !std::isnan(it->second)) v.emplace_back(c.seed, it->second);
    }
    return v;
  };
  auto aggregate = [&](const std::string& arm, const std::string& metric) {
    std::vector<double> x;
    for (const auto& [s, v] : values(arm, metric)) x.push_back(v);
    if (x.empty()) return metrics::RunAggregate{kNaN, kNaN, 0};
    return metrics::aggregate_runs(x);
  };

  std::vector<std::vector<std::string>> summary = {{"arm", "metric", "mean", "std", "n"}};
  for (const auto& a : cfg.arms) {
    for (const auto& n : metric_names(a)) {
      const auto g = aggregate(a.label, n);
      summary.push_back({a.label, n, format_number(g.mean), format_number(g.std), std::to_string(g.n)});
    }
  }
  write_csv(out / "summary.csv", summary);

  std::vector<std::vector<std::string>> tests = {
      {"a", "b", "metric", "mean_a", "std_a", "n_a", "mean_b", "std_b", "n_b", "t", "df", "p", "one_tailed", "note"}};
  std::vector<std::vector<std::string>> deltas = {{"a", "b", "metric", "seed", "value_a", "value_b", "delta"}};
  for (const auto& t : cfg.tests) {
    const auto ga = aggregate(t.a, t.metric), gb = aggregate(t.b, t.metric);
    std::vector<std::string> row = {t.a,
                                    t.b,
                                    t.metric,
                                    format_number(ga.mean),
                                    format_number(ga.std),
                                    std::to_string(ga.n),
                                    format_number(gb.mean),
                                    format_number(gb.std),
                                    std::to_string(gb.n)};
    try {
      const auto r = metrics::ttest_from_summary(ga.mean, ga.std, ga.n, gb.mean, gb.std, gb.n, t.one_tailed);
      row.insert(row.end(), {format_number(r.t), format_number(r.df), format_number(r.p), t.one_tailed ? "1" : "0", ""});
    } catch (const Error& e) {
      row.insert(row.end(), {"nan", "nan", "nan", t.one_tailed ? "1" : "0", std::string(to_string(e.kind()))});
    }
    tests.push_back(std::move(row));
    const auto va = values(t.a, t.metric), vb = values(t.b, t.metric);
    for (const auto& [sa, xa] : va) {
      for (const auto& [sb, xb] : vb) {
        if (sa == sb) {
          deltas.push_back({t.a, t.b, t.metric, std::to_string(sa), format_number(xa), format_number(xb),
                            format_number(xa - xb)});
        }
      }
    }
  }
  write_csv(out / "tests.csv", tests);
  write_csv(out / "deltas.csv", deltas);
}

}  // namespace

PreparedData prepare_data(const DataConfig& c, bool split) {
  PreparedData d;
  std::vector<image::LabeledExam> all;
  std::vector<data::SynthTruth> truth;
  if (c.synth) {
    for (auto& e : data::synth_generate(*c.synth, c.synth_seed)) {
      all.push_back({preprocess::preprocess_exam(e.volume, c.preprocess), std::move(e.record)});
      truth.push_back(std::move(e.truth));
    }
  } else {
    for (const auto& entry : data::read_manifest(c.manifest).entries) {
      auto [volume, record] = data::load_exam(entry.path);
      all.push_back({preprocess::preprocess_exam(volume, c.preprocess), std::move(record)});
    }
  }
  d.fingerprint = data_fingerprint(c);
  if (!split) {
    d.train_pool = std::move(all);
    return d;
  }
  std::vector<data::ManifestEntry> entries;
  for (const auto& e : all) entries.push_back({e.prep.exam_id, e.prep.exam_id});
  const auto [train_m, test_m] = data::split_dataset(data::make_manifest(entries), {c.split_seed, c.n_test});
  std::set<std::string> test_ids;
  for (const auto& e : test_m.entries) test_ids.insert(e.exam_id);
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (test_ids.count(all[i].prep.exam_id)) {
      if (!truth.empty()) d.test_truth.push_back(truth[i]);
      d.test.push_back(std::move(all[i]));
    } else {
      d.train_pool.push_back(std::move(all[i]));
    }
  }
  return d;
}

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  if (cfg.out.empty()) throw Error(ErrorKind::kConfig, "out: output directory required");
  if (opts.jobs < 1) throw Error(ErrorKind::kConfig, "jobs must be >= 1");
  const fs::path out = fs::absolute(cfg.out);
  fs::create_directories(out / "cells");
  const std::string started = utc_now();
  auto log = [&](const std::string& s) {
    if (opts.verbose) std::fprintf(stderr, "[%s] %s\n", cfg.name.c_str(), s.c_str());
  };
  cv::setNumThreads(0);

  const std::string data_fp = data_fingerprint(cfg.data);
  std::string pre_hash;
  const fs::path pretrain_stem = out / "pretrain" / "model";
  if (cfg.pretrain) pre_hash = pretrain_hash(*cfg.pretrain);

  std::vector<Cell> cells;
  for (const auto& arm : cfg.arms) {
    const bool uses_pretrain = arm.train.init == "checkpoint" && arm.train.checkpoint.empty();
    for (auto seed : cfg.seeds) {
      Cell c{&arm, seed, out / "cells" / arm.label / std::to_string(seed), "", false};
      const json key = {{"version", kCodeVersion},     {"data", data_fp},
                        {"val_fraction", cfg.data.val_fraction}, {"pretrain", uses_pretrain ? pre_hash : ""},
                        {"arm", arm_json(arm)},        {"seed", seed}};
      json k = key;
      if (arm.train.init == "checkpoint" && !uses_pretrain) {
        k["checkpoint"] = io::sha256_hex(io::read_text(fs::path(arm.train.checkpoint.string() + ".f64")));
      }
      c.hash = io::sha256_hex(k.dump());
      c.cached = cell_cached(c);
      cells.push_back(std::move(c));
    }
  }
  const bool need_compute = std::any_of(cells.begin(), cells.end(), [](const Cell& c) { return !c.cached; });

  bool pretrain_cached = true;
  if (cfg.pretrain && need_compute) {
    const fs::path done = out / "pretrain" / "done.json";
    pretrain_cached = fs::exists(done) && io::read_json(done).value("hash", "") == pre_hash;
    if (!pretrain_cached) {
      log("pretraining on the source task");
      fs::remove_all(out / "pretrain");
      const auto src = prepare_data(cfg.pretrain->data, false);
      auto [train, val] = image::split_validation(src.train_pool, cfg.pretrain->data.val_fraction, cfg.pretrain->train.seed);
      auto model = backbones::build_backbone(cfg.pretrain->model, cfg.pretrain->train.seed);
      const auto r = image::train_image_classifier(train, val, model, cfg.pretrain->train);
      image::save_checkpoint(r.checkpoint, pretrain_stem);
      write_json_atomic(done, {{"hash", pre_hash}, {"history", r.history}});
    }
  }

  PreparedData d;
  if (need_compute) {
    log("preparing data");
    d = prepare_data(cfg.data, true);
  }

  std::fflush(nullptr);
  std::map<pid_t, std::size_t> running;
  auto reap_one = [&] {
    int status = 0;
    const pid_t pid = ::waitpid(-1, &status, 0);
    if (pid < 0) throw Error(ErrorKind::kIo, "waitpid failed");
    const Cell& c = cells[running.at(pid)];
    running.erase(pid);
    const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
    if (!ok && !fs::exists(c.dir / "failed.json")) {
      const std::string why = WIFSIGNALED(status) ? "killed by signal " + std::to_string(WTERMSIG(status))
                                                  : "exit status " + std::to_string(WEXITSTATUS(status));
      write_json_atomic(c.dir / "failed.json", {{"hash", c.hash}, {"error", why}});
    }
    log("cell " + c.arm->label + "/" + std::to_string(c.seed) + (ok ? " done" : " FAILED"));
  };
  for (std::size_t i = 0; i < cells.size(); ++i) {
    Cell& c = cells[i];
    if (c.cached) continue;
    while (static_cast<int>(running.size()) >= opts.jobs) reap_one();
    fs::remove_all(c.dir);
    fs::create_directories(c.dir);
    const pid_t pid = ::fork();
    if (pid < 0) throw Error(ErrorKind::kIo, "fork failed");
    if (pid == 0) {
      int rc = 0;
      try {
        const auto t0 = std::chrono::steady_clock::now();
        const auto m = run_cell(cfg, d, *c.arm, c.seed, c.dir, pretrain_stem);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_json_atomic(c.dir / "timing.json", {{"seconds", secs}});
        write_json_atomic(c.dir / "metrics.json", {{"hash", c.hash},
                                                   {"arm", c.arm->label},
                                                   {"seed", c.seed},
                                                   {"status", "ok"},
                                                   {"metrics", metrics_to_json(m)}});
      } catch (const std::exception& e) {
        try {
          write_json_atomic(c.dir / "failed.json", {{"hash", c.hash}, {"error", e.what()}});
        } catch (...) {
        }
        rc = 1;
      }
      std::fflush(nullptr);
      ::_exit(rc);
    }
    running[pid] = i;
  }
  while (!running.empty()) reap_one();

  RunResult res;
  res.dir = out;
  for (const auto& c : cells) {
    CellOutcome o{c.arm->label, c.seed, c.hash, "failed", c.cached, "", {}};
    const fs::path mp = c.dir / "metrics.json";
    if (fs::exists(mp)) {
      const json j = io::read_json(mp);
      if (j.value("hash", "") == c.hash && j.value("status", "") == "ok") {
        o.status = "ok";
        o.metrics = metrics_from_json(j.at("metrics"));
      }
    }
    if (o.status != "ok") {
      const fs::path fp = c.dir / "failed.json";
      o.error = fs::exists(fp) ? io::read_json(fp).value("error", "") : "no result";
      ++res.failed;
      log("cell " + o.arm + "/" + std::to_string(o.seed) + " failed: " + o.error);
    } else if (o.cached) {
      ++res.cached;
    } else {
      ++res.computed;
    }
    res.cells.push_back(std::move(o));
  }

  write_tables(cfg, res.cells, out);
  json cfg_json = to_json(cfg);
  cfg_json["out"] = out.string();
  write_json_atomic(out / "config.json", cfg_json);
  json cell_list = json::array();
  for (const auto& o : res.cells) {
    cell_list.push_back({{"arm", o.arm}, {"seed", o.seed}, {"hash", o.hash}, {"status", o.status}, {"cached", o.cached}});
  }
  json manifest = {{"name", cfg.name},
                   {"code_version", kCodeVersion},
                   {"config_hash", io::sha256_hex(to_json(cfg).dump())},
                   {"data_fingerprint", data_fp},
                   {"compiler", __VERSION__},
                   {"opencv", CV_VERSION},
                   {"started_at", started},
                   {"finished_at", utc_now()},
                   {"jobs", opts.jobs},
                   {"computed", res.computed},
                   {"cached", res.cached},
                   {"failed", res.failed},
                   {"cells", cell_list}};
  if (cfg.pretrain) manifest["pretrain"] = {{"hash", pre_hash}, {"cached", pretrain_cached}};
  write_json_atomic(out / "manifest.json", manifest);
  log(std::to_string(res.computed) + " computed, " + std::to_string(res.cached) + " cached, " +
      std::to_string(res.failed) + " failed");
  return res;
}

}  // namespace pecad::bench
