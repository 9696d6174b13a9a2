#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "pecad/data/types.hpp"

namespace pecad::data {

// Desk-scale CTPA-like exam generator. Body is a soft-tissue ellipse in air,
// lungs are two low-HU ellipsoids; PE lesions are hyperdense blobs painted
// only inside lung tissue. Exam labels are tied to visible evidence:
//   - laterality from lesion centroid x within the lung span (thirds)
//   - rv_lv_ratio_gte_1 exams carry more, larger lesions (clot burden)
//   - chronic lesions are brighter than acute ones; acute_and_chronic mixes both
//   - indeterminate exams have raised soft-tissue attenuation (poor bolus)
struct SynthConfig {
  int n_exams = 100;
  int slices_min = 6;
  int slices_max = 10;
  int image_size = 96;
  double lesion_probability = 0.5;
  // Acute lesion HU range; chronic lesions use [chronic_hu_min, chronic_hu_max].
  double lesion_hu_min = 170;
  double lesion_hu_max = 260;
  double chronic_hu_min = 360;
  double chronic_hu_max = 450;
  double lung_hu_min = -900;
  double lung_hu_max = -750;
  double body_hu_min = 20;
  double body_hu_max = 60;
  double noise_std = 25;
  // Lesion in-plane radius as a fraction of image_size.
  double lesion_radius_min = 0.035;
  double lesion_radius_max = 0.06;
  double indeterminate_probability = 0.2;
  double indeterminate_hu_shift = 180;
  double rv_lv_gte_probability = 0.4;
  double chronic_probability = 0.25;
  double acute_and_chronic_probability = 0.25;

  bool operator==(const SynthConfig&) const = default;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, SynthConfig& c);

// Throws kConfig for out-of-range fields, kDegenerateConfig when the lesion
// HU range lies entirely inside the lung HU range.
void validate(const SynthConfig& config);

struct LesionTruth {
  double cx = 0, cy = 0, cz = 0;  // centroid (pixels, pixels, slice index)
  double radius = 0;              // in-plane radius, pixels
  double radius_z = 0;            // through-plane radius, slices
  int region = 0;                 // 0 left third, 1 middle third, 2 right third
  bool chronic = false;
  // Per-slice bounding box of painted voxels: {slice, y0, y1, x0, x1}, half-open.
  std::vector<std::array<int, 5>> slice_boxes;
};

struct SynthTruth {
  // Union bounding box of lung tissue over all slices, half-open.
  int lung_y0 = 0, lung_y1 = 0, lung_x0 = 0, lung_x1 = 0;
  std::vector<LesionTruth> lesions;
};

struct SynthExam {
  HuVolume volume;
  ExamRecord record;
  SynthTruth truth;
};

// Exam i is drawn from its own stream seeded by (seed, i), so a fixed
// (config, seed) pair is bit-reproducible and prefixes are stable.
std::vector<SynthExam> synth_generate(const SynthConfig& config, std::uint64_t seed);

}  // namespace pecad::data
