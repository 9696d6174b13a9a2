#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pecad/data/types.hpp"

namespace pecad::preprocess {

// Level/width window. Defaults clip to [-250, 450] HU.
struct WindowSpec {
  double level = 100;
  double width = 700;

  double lo() const { return level - width / 2; }
  double hi() const { return level + width / 2; }
  void validate() const;
};

// Half-open pixel box.
struct CropBox {
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;

  int height() const { return y1 - y0; }
  int width() const { return x1 - x0; }
  bool operator==(const CropBox&) const = default;
};

struct PreprocConfig {
  WindowSpec window;
  int out_size = 576;
  double lung_threshold = -320;  // raw HU
  double min_lung_area = 0.005;  // fraction of one slice
  int margin = 8;

  void validate() const;
};

void to_json(nlohmann::json& j, const PreprocConfig& c);
void from_json(const nlohmann::json& j, PreprocConfig& c);

// Windowed exam, values in [0, 1], same layout as the HU volume.
struct WindowedVolume {
  int num_slices = 0, height = 0, width = 0;
  std::vector<float> values;

  const float* slice(int s) const { return values.data() + static_cast<std::size_t>(s) * height * width; }
};

float window_value(int hu, const WindowSpec& w);
WindowedVolume apply_window(const data::HuVolume& volume, const WindowSpec& w);

// One box per exam: union over slices of the non-border low-HU components,
// padded by cfg.margin, grown to at least 16x16 where the image allows.
// Throws kNoLungFound when no slice has a component of min_lung_area.
CropBox localize_lungs(const data::HuVolume& volume, const PreprocConfig& cfg);

void check_box(const CropBox& box, int height, int width);

// Bilinear resample of box within a height x width slice to out_size^2.
// Pixel centres are aligned (half-pixel convention), edges clamp.
std::vector<float> crop_resize(const float* slice, int height, int width, const CropBox& box, int out_size);

// Channels (i-1, i, i+1) of a stack of square planes, edges replicated.
std::vector<float> make_triplet(const std::vector<float>& planes, int num_slices, int size, int i);

struct PreprocessedExam {
  std::string exam_id;
  int num_images = 0;
  int size = 0;
  std::vector<float> images;  // N x 3 x S x S
  WindowSpec window;
  CropBox box;
  bool fallback = false;  // full-frame box used because no lung was found

  std::size_t image_size() const { return 3ull * size * size; }
  const float* image(int i) const { return images.data() + static_cast<std::size_t>(i) * image_size(); }
};

PreprocessedExam preprocess_exam(const data::HuVolume& volume, const PreprocConfig& cfg);

// prep_<exam_id>.f32 + prep_<exam_id>.json inside dir.
void save_prep(const PreprocessedExam& exam, const std::filesystem::path& dir);
PreprocessedExam load_prep(const std::filesystem::path& dir, const std::string& exam_id);

}  // namespace pecad::preprocess
