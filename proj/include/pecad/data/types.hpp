#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pecad::data {

inline constexpr std::int16_t kMinHu = -1024;
inline constexpr std::int16_t kMaxHu = 3071;

// Exam-level label order, fixed everywhere (files, heads, reports).
enum class Label : int {
  kNegativeExamForPe = 0,
  kIndeterminate,
  kLeftsidedPe,
  kRightsidedPe,
  kCentralPe,
  kRvLvRatioGte1,
  kRvLvRatioLt1,
  kChronicPe,
  kAcuteAndChronicPe,
};
inline constexpr int kNumLabels = 9;

inline constexpr std::array<std::string_view, kNumLabels> kLabelNames = {
    "negative_exam_for_pe", "indeterminate",     "leftsided_pe",
    "rightsided_pe",        "central_pe",        "rv_lv_ratio_gte_1",
    "rv_lv_ratio_lt_1",     "chronic_pe",        "acute_and_chronic_pe",
};

struct ExamLabels {
  std::array<std::uint8_t, kNumLabels> flags{};

  std::uint8_t& operator[](Label l) { return flags[static_cast<int>(l)]; }
  std::uint8_t operator[](Label l) const { return flags[static_cast<int>(l)]; }
  bool operator==(const ExamLabels&) const = default;
};

// Raw CT exam: slice-major, row-major int16 Hounsfield units.
struct HuVolume {
  std::string exam_id;
  int num_slices = 0;
  int height = 0;
  int width = 0;
  std::vector<std::int16_t> voxels;

  std::size_t slice_size() const { return static_cast<std::size_t>(height) * width; }
  std::int16_t at(int s, int y, int x) const {
    return voxels[static_cast<std::size_t>(s) * slice_size() + static_cast<std::size_t>(y) * width + x];
  }
  std::int16_t& at(int s, int y, int x) {
    return voxels[static_cast<std::size_t>(s) * slice_size() + static_cast<std::size_t>(y) * width + x];
  }
  bool operator==(const HuVolume&) const = default;
};

struct ExamRecord {
  std::string exam_id;
  ExamLabels labels;
  std::vector<std::uint8_t> image_labels;  // one PE flag per slice
  bool operator==(const ExamRecord&) const = default;
};

struct ManifestEntry {
  std::string exam_id;
  std::filesystem::path path;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string fingerprint;  // sha256 over sorted "id,path" lines
};

struct SplitSpec {
  std::uint64_t seed = 0;
  int n_test = 0;
};

// Shape/volume invariants (not labels). Throws ErrorKind::kValidation.
void check_volume(const HuVolume& volume);

}  // namespace pecad::data
