#include <charconv>
#include <cmath>
#include <cstdio>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pecad/bench/bench.hpp"
#include "pecad/core/io.hpp"
#include "pecad/metrics/metrics.hpp"

namespace pecad::bench {

namespace {

double parse_number(const std::string& s) {
  if (s == "nan" || s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw Error(ErrorKind::kData, "bad number '" + s + "'");
  return v;
}

struct SummaryRow {
  std::string arm, metric;
  double mean, std;
  int n;
};

std::vector<SummaryRow> read_summary(const fs::path& csv) {
  const auto rows = io::read_csv(csv);
  if (rows.empty() || rows[0] != std::vector<std::string>{"arm", "metric", "mean", "std", "n"}) {
    throw Error(ErrorKind::kData, csv.string() + ": unexpected header");
  }
  std::vector<SummaryRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 5) throw Error(ErrorKind::kData, csv.string() + ": malformed row " + std::to_string(i));
    out.push_back({r[0], r[1], parse_number(r[2]), parse_number(r[3]), std::stoi(r[4])});
  }
  return out;
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

const cv::Scalar kInk(40, 40, 40), kGrid(220, 220, 220), kBar(180, 120, 60), kWhisker(30, 30, 160);

void put(cv::Mat& img, const std::string& text, cv::Point at, double scale = 0.45, bool centered = false) {
  int base = 0;
  const cv::Size sz = cv::getTextSize(text, cv::FONT_HERSHEY_SIMPLEX, scale, 1, &base);
  if (centered) at.x -= sz.width / 2;
  cv::putText(img, text, at, cv::FONT_HERSHEY_SIMPLEX, scale, kInk, 1, cv::LINE_AA);
}

// Bars of mean with +-std whiskers on a fixed [0, 1] axis.
json bar_chart(const std::string& metric, const std::vector<SummaryRow>& rows, const fs::path& png) {
  const int n = static_cast<int>(rows.size());
  const int left = 50, right = 20, top = 50, bottom = 70, slot = 110;
  const int W = std::max(380, left + right + slot * n), H = 420;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  const int y0 = H - bottom, y1 = top;
  auto ypix = [&](double v) { return static_cast<int>(std::lround(y0 - std::clamp(v, 0.0, 1.0) * (y0 - y1))); };
  for (int k = 0; k <= 4; ++k) cv::line(img, {left, ypix(k / 4.0)}, {W - right, ypix(k / 4.0)}, kGrid, 1);
  cv::line(img, {left, y0}, {left, y1}, kInk, 1);
  put(img, metric + " (axis 0 to 1, mean +- std)", {left, 25}, 0.5);
  json bars = json::array();
  for (int i = 0; i < n; ++i) {
    const auto& r = rows[i];
    const int cx = left + slot * i + slot / 2;
    if (!std::isnan(r.mean)) {
      cv::rectangle(img, {cx - 30, ypix(r.mean)}, {cx + 30, y0}, kBar, cv::FILLED);
      if (!std::isnan(r.std)) {
        const int lo = ypix(r.mean - r.std), hi = ypix(r.mean + r.std);
        cv::line(img, {cx, lo}, {cx, hi}, kWhisker, 2);
        cv::line(img, {cx - 10, lo}, {cx + 10, lo}, kWhisker, 2);
        cv::line(img, {cx - 10, hi}, {cx + 10, hi}, kWhisker, 2);
      }
      put(img, fixed4(r.mean), {cx, ypix(r.mean + (std::isnan(r.std) ? 0 : r.std)) - 6}, 0.4, true);
    }
    put(img, r.arm, {cx, y0 + 20}, 0.4, true);
    put(img, "n=" + std::to_string(r.n), {cx, y0 + 40}, 0.4, true);
    bars.push_back({{"arm", r.arm},
                    {"mean", std::isnan(r.mean) ? json(nullptr) : json(r.mean)},
                    {"std", std::isnan(r.std) ? json(nullptr) : json(r.std)},
                    {"n", r.n}});
  }
  cv::imwrite(png.string(), img);
  return {{"type", "bar"}, {"metric", metric}, {"source", "summary.csv"}, {"bars", bars}};
}

json scatter_plot(const std::string& mx, const std::string& my, const std::vector<std::string>& arms,
                  const std::vector<double>& x, const std::vector<double>& y, double r, const fs::path& png) {
  const int W = 520, H = 460, left = 60, right = 30, top = 50, bottom = 60;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  auto range = [](const std::vector<double>& v) {
    double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
    const double pad = hi > lo ? 0.1 * (hi - lo) : 0.05;
    return std::pair{lo - pad, hi + pad};
  };
  const auto [xl, xh] = range(x);
  const auto [yl, yh] = range(y);
  auto px = [&](double v) { return static_cast<int>(std::lround(left + (v - xl) / (xh - xl) * (W - left - right))); };
  auto py = [&](double v) { return static_cast<int>(std::lround(H - bottom - (v - yl) / (yh - yl) * (H - top - bottom))); };
  cv::rectangle(img, {left, top}, {W - right, H - bottom}, kInk, 1);
  json points = json::array();
  for (std::size_t i = 0; i < x.size(); ++i) {
    cv::circle(img, {px(x[i]), py(y[i])}, 5, kBar, cv::FILLED, cv::LINE_AA);
    put(img, arms[i], {px(x[i]) + 8, py(y[i]) - 6}, 0.4);
    points.push_back({{"arm", arms[i]}, {"x", x[i]}, {"y", y[i]}});
  }
  put(img, mx, {W / 2, H - 20}, 0.45, true);
  put(img, my, {8, 30}, 0.45);
  if (!std::isnan(r)) put(img, "R = " + fixed4(r), {W - 140, top + 20}, 0.5);
  cv::imwrite(png.string(), img);
  return {{"type", "scatter"},
          {"x_metric", mx},
          {"y_metric", my},
          {"source", "summary.csv"},
          {"points", points},
          {"pearson_r", std::isnan(r) ? json(nullptr) : json(r)},
          {"pearson_source", "correlation.csv"}};
}

cv::Mat overlay(const float* image, const image::Heatmap& hm, int S) {
  cv::Mat gray(S, S, CV_8UC1), heat(S, S, CV_8UC1);
  const float* mid = image + static_cast<std::size_t>(S) * S;  // centre slice of the triplet
  for (int i = 0; i < S * S; ++i) {
    gray.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(mid[i], 0.0f, 1.0f) * 255));
    heat.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(hm.values[i], 0.0f, 1.0f) * 255));
  }
  cv::Mat g3, h3, out;
  cv::cvtColor(gray, g3, cv::COLOR_GRAY2BGR);
  cv::applyColorMap(heat, h3, cv::COLORMAP_JET);
  cv::addWeighted(g3, 0.6, h3, 0.4, 0.0, out);
  return out;
}

// Is the heatmap argmax of slice `image` inside a painted lesion box (1 px slack)?
bool argmax_in_lesion(const image::Heatmap& hm, const preprocess::CropBox& box, const data::SynthTruth& truth,
                      int slice, int& ay, int& ax) {
  const auto it = std::max_element(hm.values.begin(), hm.values.end());
  const int idx = static_cast<int>(it - hm.values.begin());
  ay = idx / hm.width;
  ax = idx % hm.width;
  const double ry = box.y0 + (ay + 0.5) * box.height() / hm.height - 0.5;
  const double rx = box.x0 + (ax + 0.5) * box.width() / hm.width - 0.5;
  for (const auto& les : truth.lesions) {
    for (const auto& b : les.slice_boxes) {
      if (b[0] == slice && ry >= b[1] - 1 && ry < b[2] + 1 && rx >= b[3] - 1 && rx < b[4] + 1) return true;
    }
  }
  return false;
}

}  // namespace

ReportResult report(const fs::path& dir, bool verbose) {
  const fs::path summary_csv = dir / "summary.csv";
  if (!fs::exists(summary_csv) || !fs::exists(dir / "config.json")) {
    throw Error(ErrorKind::kData, dir.string() + ": no experiment results (summary.csv, config.json)");
  }
  const auto rows = read_summary(summary_csv);
  if (rows.empty()) throw Error(ErrorKind::kData, dir.string() + ": summary.csv has no rows");
  const ExperimentConfig cfg = parse_experiment(io::read_json(dir / "config.json"));
  const fs::path fig = dir / "figures";
  fs::create_directories(fig);
  ReportResult res;
  auto log = [&](const std::string& s) {
    if (verbose) std::fprintf(stderr, "[report] %s\n", s.c_str());
  };

  // One bar chart per summary metric that is not a per-label exam AUC.
  std::vector<std::string> metric_order;
  for (const auto& r : rows) {
    if (std::find(metric_order.begin(), metric_order.end(), r.metric) == metric_order.end()) metric_order.push_back(r.metric);
  }
  for (const auto& m : metric_order) {
    const bool per_label = m.rfind("exam_", 0) == 0 && m.size() > 5 && m.substr(m.size() - 5) != "_mean";
    if (per_label) continue;
    std::vector<SummaryRow> sel;
    for (const auto& r : rows) {
      if (r.metric == m) sel.push_back(r);
    }
    const fs::path png = fig / ("bar_" + m + ".png");
    const json side = bar_chart(m, sel, png);
    io::write_text_atomic(fig / ("bar_" + m + ".json"), side.dump(2) + "\n");
    res.figures.push_back(png);
  }

  if (cfg.report.scatter.size() == 2) {
    const auto& mx = cfg.report.scatter[0];
    const auto& my = cfg.report.scatter[1];
    std::vector<std::string> arms;
    std::vector<double> x, y;
    for (const auto& a : cfg.arms) {
      auto find = [&](const std::string& m) {
        for (const auto& r : rows) {
          if (r.arm == a.label && r.metric == m) return r.mean;
        }
        return std::numeric_limits<double>::quiet_NaN();
      };
      const double vx = find(mx), vy = find(my);
      if (!std::isnan(vx) && !std::isnan(vy)) {
        arms.push_back(a.label);
        x.push_back(vx);
        y.push_back(vy);
      }
    }
    if (!x.empty()) {
      double r = std::numeric_limits<double>::quiet_NaN();
      std::string note;
      try {
        r = metrics::pearson_r(x, y);
      } catch (const Error& e) {
        note = std::string(to_string(e.kind()));
      }
      io::write_text_atomic(dir / "correlation.csv", "x_metric,y_metric,n,r,note\n" + mx + "," + my + "," +
                                                         std::to_string(x.size()) + "," + format_number(r) + "," +
                                                         note + "\n");
      const fs::path png = fig / "scatter.png";
      const json side = scatter_plot(mx, my, arms, x, y, r, png);
      io::write_text_atomic(fig / "scatter.json", side.dump(2) + "\n");
      res.figures.push_back(png);
    }
  }

  if (cfg.report.gradcam_samples > 0) {
    // First convolutional arm with a finished cell.
    const ArmConfig* arm = nullptr;
    std::uint64_t seed = 0;
    for (const auto& a : cfg.arms) {
      if (!a.model.is_cnn()) continue;
      for (auto s : cfg.seeds) {
        const fs::path stem = dir / "cells" / a.label / std::to_string(s) / "model";
        if (fs::exists(fs::path(stem.string() + ".json")) && fs::exists(dir / "cells" / a.label / std::to_string(s) / "metrics.json")) {
          arm = &a;
          seed = s;
          break;
        }
      }
      if (arm) break;
    }
    if (!arm) {
      log("no convolutional arm with results; skipping Grad-CAM++ overlays");
    } else {
      const fs::path cell = dir / "cells" / arm->label / std::to_string(seed);
      const auto model = image::model_from_checkpoint(image::load_checkpoint(cell / "model"));
      const auto d = prepare_data(cfg.data, true);
      std::vector<cv::Mat> tiles;
      std::string csv = "arm,seed,exam_id,image,argmax_y,argmax_x,inside_lesion_box\n";
      int hits = 0;
      json files = json::array();
      for (std::size_t e = 0; e < d.test.size() && static_cast<int>(tiles.size()) < cfg.report.gradcam_samples; ++e) {
        const auto& ex = d.test[e];
        for (int i = 0; i < ex.prep.num_images && static_cast<int>(tiles.size()) < cfg.report.gradcam_samples; ++i) {
          if (!ex.record.image_labels[i]) continue;
          const int S = ex.prep.size;
          const auto hm = image::gradcam_pp(model, ex.prep.image(i), S);
          cv::Mat tile = overlay(ex.prep.image(i), hm, S);
          const std::string name = "gradcam_" + arm->label + "_" + std::to_string(tiles.size()) + ".png";
          cv::imwrite((fig / name).string(), tile);
          files.push_back(name);
          tiles.push_back(tile);
          std::string inside = "";
          int ay = 0, ax = 0;
          if (!d.test_truth.empty()) {
            const bool hit = argmax_in_lesion(hm, ex.prep.box, d.test_truth[e], i, ay, ax);
            hits += hit;
            inside = hit ? "1" : "0";
          }
          csv += arm->label + "," + std::to_string(seed) + "," + ex.prep.exam_id + "," + std::to_string(i) + "," +
                 std::to_string(ay) + "," + std::to_string(ax) + "," + inside + "\n";
        }
      }
      if (!tiles.empty()) {
        cv::Mat panel;
        cv::hconcat(tiles, panel);
        const fs::path png = fig / ("gradcam_" + arm->label + ".png");
        cv::imwrite(png.string(), panel);
        io::write_text_atomic(dir / "gradcam.csv", csv);
        json side = {{"type", "gradcam_pp_overlay"},
                     {"arm", arm->label},
                     {"seed", seed},
                     {"tiles", files},
                     {"tile_size", tiles[0].rows},
                     {"source", "gradcam.csv"}};
        io::write_text_atomic(fig / ("gradcam_" + arm->label + ".json"), side.dump(2) + "\n");
        res.figures.push_back(png);
        if (!d.test_truth.empty()) {
          res.gradcam_hit_rate = static_cast<double>(hits) / static_cast<double>(tiles.size());
          log("Grad-CAM++ argmax inside a lesion box for " + std::to_string(hits) + " of " +
              std::to_string(tiles.size()) + " positive test images");
        }
      }
    }
  }
  log("wrote " + std::to_string(res.figures.size()) + " figures to " + fig.string());
  return res;
}

}  // namespace pecad::bench
