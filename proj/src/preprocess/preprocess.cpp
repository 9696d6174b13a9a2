#include "pecad/preprocess/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgproc.hpp>

#include "pecad/core/error.hpp"
#include "pecad/core/io.hpp"

namespace pecad::preprocess {

using io::Json;

void WindowSpec::validate() const {
  if (!(width > 0)) throw Error(ErrorKind::kConfig, "window.width must be > 0");
}

void PreprocConfig::validate() const {
  window.validate();
  if (out_size < 32) throw Error(ErrorKind::kConfig, "preprocess.out_size must be >= 32");
  if (!(lung_threshold < 0)) throw Error(ErrorKind::kConfig, "preprocess.lung_threshold must be < 0");
  if (!(min_lung_area > 0 && min_lung_area < 1)) {
    throw Error(ErrorKind::kConfig, "preprocess.min_lung_area must lie in (0, 1)");
  }
  if (margin < 0) throw Error(ErrorKind::kConfig, "preprocess.margin must be >= 0");
}

void to_json(Json& j, const PreprocConfig& c) {
  j = {{"window_level", c.window.level}, {"window_width", c.window.width},
       {"out_size", c.out_size},         {"lung_threshold", c.lung_threshold},
       {"min_lung_area", c.min_lung_area}, {"margin", c.margin}};
}

void from_json(const Json& j, PreprocConfig& c) {
  if (!j.is_object()) throw Error(ErrorKind::kConfig, "preprocess: expected an object");
  for (const auto& [k, v] : j.items()) {
    try {
      if (k == "window_level") c.window.level = v.get<double>();
      else if (k == "window_width") c.window.width = v.get<double>();
      else if (k == "out_size") c.out_size = v.get<int>();
      else if (k == "lung_threshold") c.lung_threshold = v.get<double>();
      else if (k == "min_lung_area") c.min_lung_area = v.get<double>();
      else if (k == "margin") c.margin = v.get<int>();
      else throw Error(ErrorKind::kConfig, "preprocess." + k + ": unknown field");
    } catch (const Json::exception&) {
      throw Error(ErrorKind::kConfig, "preprocess." + k + ": wrong type");
    }
  }
}

float window_value(int hu, const WindowSpec& w) {
  const double v = std::clamp(static_cast<double>(hu), w.lo(), w.hi());
  return static_cast<float>((v - w.lo()) / w.width);
}

WindowedVolume apply_window(const data::HuVolume& volume, const WindowSpec& w) {
  w.validate();
  WindowedVolume out{volume.num_slices, volume.height, volume.width, {}};
  out.values.resize(volume.voxels.size());
  // Tabulate once; every int16 HU maps through the same closed form.
  std::vector<float> table(data::kMaxHu - data::kMinHu + 1);
  for (int hu = data::kMinHu; hu <= data::kMaxHu; ++hu) table[hu - data::kMinHu] = window_value(hu, w);
  for (std::size_t i = 0; i < volume.voxels.size(); ++i) {
    const int hu = std::clamp<int>(volume.voxels[i], data::kMinHu, data::kMaxHu);
    out.values[i] = table[hu - data::kMinHu];
  }
  return out;
}

void check_box(const CropBox& b, int height, int width) {
  if (b.y0 < 0 || b.x0 < 0 || b.y1 > height || b.x1 > width || b.y0 >= b.y1 || b.x0 >= b.x1) {
    throw Error(ErrorKind::kInvalidBox, "box [" + std::to_string(b.y0) + "," + std::to_string(b.y1) + ")x[" +
                                            std::to_string(b.x0) + "," + std::to_string(b.x1) +
                                            ") invalid for " + std::to_string(height) + "x" +
                                            std::to_string(width));
  }
}

namespace {

// Grow [lo, hi) symmetrically to at least `need`, staying inside [0, limit).
void grow(int& lo, int& hi, int need, int limit) {
  need = std::min(need, limit);
  while (hi - lo < need) {
    if (lo > 0) --lo;
    if (hi - lo < need && hi < limit) ++hi;
  }
}

}  // namespace

CropBox localize_lungs(const data::HuVolume& volume, const PreprocConfig& cfg) {
  data::check_volume(volume);
  const int H = volume.height, W = volume.width;
  const double min_area = cfg.min_lung_area * H * W;
  CropBox box{H, 0, W, 0};
  bool found = false;
  cv::Mat mask(H, W, CV_8U), labels, stats, centroids;
  for (int s = 0; s < volume.num_slices; ++s) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) mask.at<std::uint8_t>(y, x) = volume.at(s, y, x) < cfg.lung_threshold ? 1 : 0;
    const int n = cv::connectedComponentsWithStats(mask, labels, stats, centroids, 4, CV_32S);
    for (int c = 1; c < n; ++c) {
      const int x0 = stats.at<int>(c, cv::CC_STAT_LEFT), y0 = stats.at<int>(c, cv::CC_STAT_TOP);
      const int x1 = x0 + stats.at<int>(c, cv::CC_STAT_WIDTH), y1 = y0 + stats.at<int>(c, cv::CC_STAT_HEIGHT);
      // Components reaching the frame are ambient air, not lung.
      if (x0 == 0 || y0 == 0 || x1 == W || y1 == H) continue;
      if (stats.at<int>(c, cv::CC_STAT_AREA) < min_area) continue;
      found = true;
      box.y0 = std::min(box.y0, y0);
      box.y1 = std::max(box.y1, y1);
      box.x0 = std::min(box.x0, x0);
      box.x1 = std::max(box.x1, x1);
    }
  }
  if (!found) throw Error(ErrorKind::kNoLungFound, volume.exam_id + ": no lung component found");
  box.y0 = std::max(0, box.y0 - cfg.margin);
  box.x0 = std::max(0, box.x0 - cfg.margin);
  box.y1 = std::min(H, box.y1 + cfg.margin);
  box.x1 = std::min(W, box.x1 + cfg.margin);
  grow(box.y0, box.y1, 16, H);
  grow(box.x0, box.x1, 16, W);
  return box;
}

std::vector<float> crop_resize(const float* slice, int height, int width, const CropBox& box, int out_size) {
  check_box(box, height, width);
  if (out_size < 1) throw Error(ErrorKind::kConfig, "crop_resize: out_size must be >= 1");
  struct Tap {
    int i0, i1;
    double f;
  };
  auto taps = [&](int lo, int extent) {
    std::vector<Tap> t(out_size);
    const double scale = static_cast<double>(extent) / out_size;
    for (int o = 0; o < out_size; ++o) {
      const double p = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(extent - 1));
      const int i0 = static_cast<int>(std::floor(p));
      const int i1 = std::min(i0 + 1, extent - 1);
      t[o] = {lo + i0, lo + i1, p - i0};
    }
    return t;
  };
  const auto ty = taps(box.y0, box.height());
  const auto tx = taps(box.x0, box.width());
  std::vector<float> out(static_cast<std::size_t>(out_size) * out_size);
  for (int oy = 0; oy < out_size; ++oy) {
    const float* r0 = slice + static_cast<std::size_t>(ty[oy].i0) * width;
    const float* r1 = slice + static_cast<std::size_t>(ty[oy].i1) * width;
    const double fy = ty[oy].f;
    for (int ox = 0; ox < out_size; ++ox) {
      const auto& t = tx[ox];
      const double top = r0[t.i0] + t.f * (r0[t.i1] - r0[t.i0]);
      const double bot = r1[t.i0] + t.f * (r1[t.i1] - r1[t.i0]);
      out[static_cast<std::size_t>(oy) * out_size + ox] = static_cast<float>(top + fy * (bot - top));
    }
  }
  return out;
}

std::vector<float> make_triplet(const std::vector<float>& planes, int num_slices, int size, int i) {
  if (i < 0 || i >= num_slices) {
    throw Error(ErrorKind::kIndex, "slice " + std::to_string(i) + " outside [0, " + std::to_string(num_slices) + ")");
  }
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  if (planes.size() != plane * num_slices) throw Error(ErrorKind::kShape, "make_triplet: plane stack size");
  std::vector<float> out(3 * plane);
  const int src[3] = {std::max(i - 1, 0), i, std::min(i + 1, num_slices - 1)};
  for (int c = 0; c < 3; ++c) std::copy_n(planes.data() + src[c] * plane, plane, out.data() + c * plane);
  return out;
}

PreprocessedExam preprocess_exam(const data::HuVolume& volume, const PreprocConfig& cfg) {
  cfg.validate();
  data::check_volume(volume);
  PreprocessedExam out;
  out.exam_id = volume.exam_id;
  out.num_images = volume.num_slices;
  out.size = cfg.out_size;
  out.window = cfg.window;

  const WindowedVolume windowed = apply_window(volume, cfg.window);
  try {
    out.box = localize_lungs(volume, cfg);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNoLungFound) throw;
    out.box = {0, volume.height, 0, volume.width};
    out.fallback = true;
  }

  const std::size_t plane = static_cast<std::size_t>(cfg.out_size) * cfg.out_size;
  std::vector<float> planes(plane * volume.num_slices);
  for (int s = 0; s < volume.num_slices; ++s) {
    const auto r = crop_resize(windowed.slice(s), volume.height, volume.width, out.box, cfg.out_size);
    std::copy(r.begin(), r.end(), planes.begin() + s * plane);
  }
  out.images.resize(3 * plane * volume.num_slices);
  for (int i = 0; i < volume.num_slices; ++i) {
    const auto t = make_triplet(planes, volume.num_slices, cfg.out_size, i);
    std::copy(t.begin(), t.end(), out.images.begin() + i * 3 * plane);
  }
  return out;
}

void save_prep(const PreprocessedExam& exam, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_f32(dir / ("prep_" + exam.exam_id + ".f32"), exam.images);
  io::write_json(dir / ("prep_" + exam.exam_id + ".json"),
                 Json{{"exam_id", exam.exam_id},
                      {"N", exam.num_images},
                      {"S", exam.size},
                      {"window_level", exam.window.level},
                      {"window_width", exam.window.width},
                      {"crop_box", {exam.box.y0, exam.box.y1, exam.box.x0, exam.box.x1}},
                      {"fallback", exam.fallback}});
}

PreprocessedExam load_prep(const std::filesystem::path& dir, const std::string& exam_id) {
  const auto meta_path = dir / ("prep_" + exam_id + ".json");
  if (!std::filesystem::exists(meta_path)) throw Error(ErrorKind::kData, "missing " + meta_path.string());
  const Json meta = io::read_json(meta_path);
  PreprocessedExam out;
  try {
    out.exam_id = meta.at("exam_id").get<std::string>();
    out.num_images = meta.at("N").get<int>();
    out.size = meta.at("S").get<int>();
    out.window.level = meta.at("window_level").get<double>();
    out.window.width = meta.at("window_width").get<double>();
    const auto b = meta.at("crop_box").get<std::vector<int>>();
    if (b.size() != 4) throw Error(ErrorKind::kData, meta_path.string() + ": crop_box needs 4 values");
    out.box = {b[0], b[1], b[2], b[3]};
    out.fallback = meta.at("fallback").get<bool>();
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::kData, meta_path.string() + ": " + e.what());
  }
  out.images = io::read_f32(dir / ("prep_" + exam_id + ".f32"));
  if (out.images.size() != out.image_size() * out.num_images) {
    throw Error(ErrorKind::kData, exam_id + ": prep payload size does not match N x 3 x S x S");
  }
  return out;
}

}  // namespace pecad::preprocess
