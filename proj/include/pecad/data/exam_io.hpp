#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pecad/data/types.hpp"

namespace pecad::data {

// Violated label rules, by name. Empty iff the record is consistent:
//   rv_lv_exclusive              rv_lv_ratio_gte_1 and rv_lv_ratio_lt_1 both set
//   chronicity_exclusive         chronic_pe and acute_and_chronic_pe both set
//   negative_excludes_laterality negative exam with any positional PE flag
std::vector<std::string> validate_labels(const ExamRecord& record);

// Exam directory: meta.json + volume.i16.
std::pair<HuVolume, ExamRecord> load_exam(const std::filesystem::path& dir);
void save_exam(const HuVolume& volume, const ExamRecord& record, const std::filesystem::path& dir);

std::string manifest_fingerprint(const std::vector<ManifestEntry>& entries);
DatasetManifest make_manifest(std::vector<ManifestEntry> entries);

// manifest.csv: header `exam_id,path`. Relative paths resolve against the
// manifest's directory.
DatasetManifest read_manifest(const std::filesystem::path& csv);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& csv);

// exam_labels.csv: header `exam_id,` + the nine label names.
void write_exam_labels(const std::vector<ExamRecord>& records, const std::filesystem::path& csv);

// Disjoint exam-level split; test size = spec.n_test. Deterministic in seed.
std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          const SplitSpec& spec);

}  // namespace pecad::data
