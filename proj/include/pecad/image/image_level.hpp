#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pecad/backbones/backbones.hpp"
#include "pecad/data/types.hpp"
#include "pecad/preprocess/preprocess.hpp"

namespace pecad::image {

using backbones::ModelHandle;

// One exam ready for image-level work: preprocessed triplets + labels.
struct LabeledExam {
  preprocess::PreprocessedExam prep;
  data::ExamRecord record;
};

struct TrainConfig {
  std::string init = "random";  // random | checkpoint
  std::filesystem::path checkpoint;
  double lr = 1e-3;
  int epochs = 5;
  int batch_size = 32;
  std::uint64_t seed = 0;
  int patience = 3;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_auc;  // NaN where undefined
  int best_epoch = -1;
};

void to_json(nlohmann::json& j, const TrainHistory& h);

// Learned parameters (then BN buffers) as f64 plus provenance.
struct Checkpoint {
  std::string fingerprint;
  nlohmann::json spec;
  std::uint64_t seed = 0;
  long long param_count = 0;
  std::vector<double> values;
  nlohmann::json history;
};

Checkpoint make_checkpoint(const ModelHandle& h, const nlohmann::json& history = {});
// <stem>.f64 + <stem>.json
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& stem);
Checkpoint load_checkpoint(const std::filesystem::path& stem);
// Throws kIncompatibleCheckpoint on fingerprint or size mismatch.
void apply_checkpoint(ModelHandle& h, const Checkpoint& c);
ModelHandle model_from_checkpoint(const Checkpoint& c);

// Exam-level hold-out of ceil(fraction * n) exams (at least one), seeded.
std::pair<std::vector<LabeledExam>, std::vector<LabeledExam>> split_validation(std::vector<LabeledExam> exams,
                                                                               double fraction, std::uint64_t seed);

struct TrainResult {
  Checkpoint checkpoint;
  TrainHistory history;
};

// BCE on the single PE logit, Adam, early stopping on validation AUC. The
// model is left holding the best-epoch parameters.
TrainResult train_image_classifier(const std::vector<LabeledExam>& train, const std::vector<LabeledExam>& val,
                                   ModelHandle& model, const TrainConfig& cfg);

// Eval-mode logits for every image of every exam, in order.
std::vector<double> image_scores(const ModelHandle& model, const std::vector<LabeledExam>& exams);

// AUC over every slice's logit vs its image label. kUndefinedAuc on one class.
double evaluate_image_level(const ModelHandle& model, const std::vector<LabeledExam>& exams);

// N x M pooled features of an exam.
struct FeatureSequence {
  std::string exam_id;
  int n = 0;
  int m = 0;
  std::vector<float> values;
  std::string model_fingerprint;

  const float* row(int i) const { return values.data() + static_cast<std::size_t>(i) * m; }
};

FeatureSequence extract_exam_features(const ModelHandle& model, const preprocess::PreprocessedExam& exam);

// feat_<exam_id>.f32 + feat_<exam_id>.json inside dir.
void save_features(const FeatureSequence& f, const std::filesystem::path& dir);
FeatureSequence load_features(const std::filesystem::path& dir, const std::string& exam_id);

struct Heatmap {
  int height = 0, width = 0;
  std::vector<float> values;
};

// Grad-CAM++ from a feature map A [C, h, w] and dS/dA of the same shape,
// upsampled to out_size x out_size and max-normalized.
Heatmap gradcam_pp_from(const std::vector<double>& activations, const std::vector<double>& grads, int channels,
                        int h, int w, int out_size);

// image: 3 x S x S. Target layer: last convolutional feature map.
Heatmap gradcam_pp(const ModelHandle& model, const float* image, int size);

}  // namespace pecad::image
