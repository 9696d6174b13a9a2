#include "pecad/data/exam_io.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "pecad/core/error.hpp"
#include "pecad/core/io.hpp"

namespace pecad::data {

namespace fs = std::filesystem;
using io::Json;

void check_volume(const HuVolume& v) {
  if (v.num_slices < 1 || v.height < 8 || v.width < 8) {
    throw Error(ErrorKind::kValidation,
                v.exam_id + ": volume shape (" + std::to_string(v.num_slices) + "," +
                    std::to_string(v.height) + "," + std::to_string(v.width) +
                    ") needs >=1 slice and >=8x8 pixels");
  }
  if (v.voxels.size() != static_cast<std::size_t>(v.num_slices) * v.slice_size()) {
    throw Error(ErrorKind::kValidation, v.exam_id + ": voxel count does not match shape");
  }
  for (auto hu : v.voxels) {
    if (hu < kMinHu || hu > kMaxHu) {
      throw Error(ErrorKind::kValidation, v.exam_id + ": voxel " + std::to_string(hu) +
                                              " outside [-1024, 3071]");
    }
  }
}

std::vector<std::string> validate_labels(const ExamRecord& r) {
  std::vector<std::string> out;
  const ExamLabels& l = r.labels;
  if (l[Label::kNegativeExamForPe] &&
      (l[Label::kLeftsidedPe] || l[Label::kRightsidedPe] || l[Label::kCentralPe])) {
    out.emplace_back("negative_excludes_laterality");
  }
  if (l[Label::kRvLvRatioGte1] && l[Label::kRvLvRatioLt1]) out.emplace_back("rv_lv_exclusive");
  if (l[Label::kChronicPe] && l[Label::kAcuteAndChronicPe]) out.emplace_back("chronicity_exclusive");
  return out;
}

namespace {

void require_valid(const HuVolume& volume, const ExamRecord& record) {
  const auto violations = validate_labels(record);
  if (!violations.empty()) {
    std::string msg = record.exam_id + ": label rule violated:";
    for (const auto& v : violations) msg += " " + v;
    throw Error(ErrorKind::kValidation, msg);
  }
  if (record.image_labels.size() != static_cast<std::size_t>(volume.num_slices)) {
    throw Error(ErrorKind::kValidation, record.exam_id + ": " +
                                            std::to_string(record.image_labels.size()) +
                                            " image labels for " +
                                            std::to_string(volume.num_slices) + " slices");
  }
}

template <typename T>
T field(const Json& j, const char* key, const fs::path& where) {
  if (!j.contains(key)) throw Error(ErrorKind::kIngest, where.string() + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::kIngest, where.string() + ": field '" + key + "': " + e.what());
  }
}

}  // namespace

std::pair<HuVolume, ExamRecord> load_exam(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  const fs::path vol_path = dir / "volume.i16";
  if (!fs::exists(meta_path)) throw Error(ErrorKind::kIngest, "missing file: " + meta_path.string());
  if (!fs::exists(vol_path)) throw Error(ErrorKind::kIngest, "missing file: " + vol_path.string());
  const Json meta = io::read_json(meta_path);

  HuVolume volume;
  ExamRecord record;
  volume.exam_id = record.exam_id = field<std::string>(meta, "exam_id", meta_path);
  volume.num_slices = field<int>(meta, "num_slices", meta_path);
  volume.height = field<int>(meta, "height", meta_path);
  volume.width = field<int>(meta, "width", meta_path);
  if (volume.num_slices < 1 || volume.height < 8 || volume.width < 8) {
    throw Error(ErrorKind::kValidation, meta_path.string() + ": invalid volume shape");
  }
  const Json labels = field<Json>(meta, "labels", meta_path);
  for (int i = 0; i < kNumLabels; ++i) {
    const std::string name(kLabelNames[i]);
    const int v = field<int>(labels, name.c_str(), meta_path);
    if (v != 0 && v != 1) throw Error(ErrorKind::kIngest, meta_path.string() + ": label " + name + " not binary");
    record.labels.flags[i] = static_cast<std::uint8_t>(v);
  }
  for (int v : field<std::vector<int>>(meta, "image_labels", meta_path)) {
    if (v != 0 && v != 1) throw Error(ErrorKind::kIngest, meta_path.string() + ": image label not binary");
    record.image_labels.push_back(static_cast<std::uint8_t>(v));
  }

  const std::uintmax_t expected =
      static_cast<std::uintmax_t>(volume.num_slices) * volume.height * volume.width * 2;
  const std::uintmax_t actual = io::file_size(vol_path);
  if (actual != expected) {
    throw Error(ErrorKind::kCorruptVolume, vol_path.string() + ": " + std::to_string(actual) +
                                               " bytes, expected " + std::to_string(expected));
  }
  volume.voxels = io::read_i16(vol_path);
  for (auto& hu : volume.voxels) hu = std::clamp(hu, kMinHu, kMaxHu);
  require_valid(volume, record);
  return {std::move(volume), std::move(record)};
}

void save_exam(const HuVolume& volume, const ExamRecord& record, const fs::path& dir) {
  check_volume(volume);
  require_valid(volume, record);
  if (volume.exam_id != record.exam_id) {
    throw Error(ErrorKind::kValidation, "volume id " + volume.exam_id + " != record id " + record.exam_id);
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());

  Json labels = Json::object();
  for (int i = 0; i < kNumLabels; ++i) labels[std::string(kLabelNames[i])] = record.labels.flags[i];
  Json meta = {
      {"exam_id", record.exam_id},
      {"num_slices", volume.num_slices},
      {"height", volume.height},
      {"width", volume.width},
      {"labels", labels},
      {"image_labels", std::vector<int>(record.image_labels.begin(), record.image_labels.end())},
  };
  io::write_i16(dir / "volume.i16", volume.voxels);
  io::write_json(dir / "meta.json", meta);
}

std::string manifest_fingerprint(const std::vector<ManifestEntry>& entries) {
  std::vector<std::string> lines;
  for (const auto& e : entries) lines.push_back(e.exam_id + "," + e.path.generic_string());
  std::sort(lines.begin(), lines.end());
  std::string joined;
  for (const auto& l : lines) joined += l + "\n";
  return io::sha256_hex(joined);
}

DatasetManifest make_manifest(std::vector<ManifestEntry> entries) {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.exam_id).second) {
      throw Error(ErrorKind::kData, "duplicate exam_id in manifest: " + e.exam_id);
    }
  }
  DatasetManifest m;
  m.fingerprint = manifest_fingerprint(entries);
  m.entries = std::move(entries);
  return m;
}

DatasetManifest read_manifest(const fs::path& csv) {
  const auto rows = io::read_csv(csv);
  if (rows.empty() || rows[0].size() != 2 || rows[0][0] != "exam_id" || rows[0][1] != "path") {
    throw Error(ErrorKind::kData, csv.string() + ": expected header 'exam_id,path'");
  }
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 2) throw Error(ErrorKind::kData, csv.string() + ": malformed row " + std::to_string(i));
    fs::path p = rows[i][1];
    if (p.is_relative()) p = csv.parent_path() / p;
    entries.push_back({rows[i][0], p});
  }
  return make_manifest(std::move(entries));
}

void write_manifest(const DatasetManifest& manifest, const fs::path& csv) {
  std::ostringstream out;
  out << "exam_id,path\n";
  for (const auto& e : manifest.entries) {
    std::error_code ec;
    fs::path rel = fs::relative(e.path, csv.parent_path(), ec);
    out << e.exam_id << "," << (ec || rel.empty() ? e.path : rel).generic_string() << "\n";
  }
  io::write_text_atomic(csv, out.str());
}

void write_exam_labels(const std::vector<ExamRecord>& records, const fs::path& csv) {
  std::ostringstream out;
  out << "exam_id";
  for (auto name : kLabelNames) out << "," << name;
  out << "\n";
  for (const auto& r : records) {
    out << r.exam_id;
    for (auto f : r.labels.flags) out << "," << static_cast<int>(f);
    out << "\n";
  }
  io::write_text_atomic(csv, out.str());
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          const SplitSpec& spec) {
  const int total = static_cast<int>(manifest.entries.size());
  if (spec.n_test <= 0 || spec.n_test >= total) {
    throw Error(ErrorKind::kInvalidSplit, "n_test=" + std::to_string(spec.n_test) +
                                              " must lie strictly between 0 and " +
                                              std::to_string(total));
  }
  // Shuffle a canonical (id-sorted) order so the split does not depend on
  // manifest row order.
  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return manifest.entries[a].exam_id < manifest.entries[b].exam_id;
  });
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_test(total, false);
  for (int i = 0; i < spec.n_test; ++i) is_test[order[i]] = true;
  std::vector<ManifestEntry> train, test;
  for (int i = 0; i < total; ++i) (is_test[i] ? test : train).push_back(manifest.entries[i]);
  return {make_manifest(std::move(train)), make_manifest(std::move(test))};
}

}  // namespace pecad::data
