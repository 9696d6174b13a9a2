#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pecad/data/types.hpp"
#include "pecad/image/image_level.hpp"
#include "pecad/nn/gru.hpp"

namespace pecad::exam {

using image::FeatureSequence;
using image::TrainConfig;
using image::TrainHistory;
using nn::Graph;
using nn::Tensor;
using nn::Var;

// Linear interpolation along the slice axis at positions j (N-1)/(K-1).
template <typename T>
std::vector<T> resample_to_k(const T* rows, int n, int m, int k) {
  if (k < 2) throw Error(ErrorKind::kConfig, "resample_to_k: K must be >= 2");
  if (n < 1 || m < 1) throw Error(ErrorKind::kShape, "resample_to_k: empty feature sequence");
  std::vector<T> out(static_cast<std::size_t>(k) * m);
  if (n == k) {
    std::copy(rows, rows + out.size(), out.begin());
    return out;
  }
  for (int j = 0; j < k; ++j) {
    const double pos = n == 1 ? 0.0 : static_cast<double>(j) * (n - 1) / (k - 1);
    const int i0 = std::min(static_cast<int>(std::floor(pos)), n - 1);
    const int i1 = std::min(i0 + 1, n - 1);
    const T f = static_cast<T>(pos - i0);
    const T* a = rows + static_cast<std::size_t>(i0) * m;
    const T* b = rows + static_cast<std::size_t>(i1) * m;
    T* o = out.data() + static_cast<std::size_t>(j) * m;
    // x0 + f (x1 - x0) keeps constant columns exact.
    for (int c = 0; c < m; ++c) o[c] = a[c] + f * (b[c] - a[c]);
  }
  return out;
}

struct ExamHeadConfig {
  std::string kind = "cc";  // cc | mil
  int k = 192;              // cc: resampled length
  int hidden = 32;          // cc: GRU hidden size per direction
  std::string mode = "AMP"; // mil: MP | AP | AMP
  int attn_hidden = 64;     // mil: L

  void validate() const;
  bool operator==(const ExamHeadConfig&) const = default;
};

void to_json(nlohmann::json& j, const ExamHeadConfig& c);
void from_json(const nlohmann::json& j, ExamHeadConfig& c);

// MIL pooling over a bag h [N, M]. MP: element-wise max; AP: attention
// weighted sum; AMP: [MP || AP]. `attention` is set for AP/AMP.
template <typename T>
Var mil_pool(Graph<T>& g, Var h, const std::string& mode, Var V, Var w, Var* attention = nullptr) {
  if (mode != "MP" && mode != "AP" && mode != "AMP") throw Error(ErrorKind::kConfig, "mil mode: " + mode);
  if (mode != "MP" && (!V.valid() || !w.valid())) {
    throw Error(ErrorKind::kConfig, "mil " + mode + " pooling needs attention parameters V and w");
  }
  Var mp, ap;
  if (mode != "AP") mp = nn::ops::max_over_time(g, h);
  if (mode != "MP") {
    Var a = nn::ops::attention_weights(g, h, V, w);
    if (attention) *attention = a;
    ap = nn::ops::weighted_sum(g, a, h);
  }
  if (mode == "MP") return mp;
  if (mode == "AP") return ap;
  return nn::ops::concat_last(g, mp, ap);
}

// Nine-logit exam head over frozen features. Input features are
// standardized with statistics fitted on the training set (stored as buffers).
template <typename T>
class ExamHead {
 public:
  ExamHead(const ExamHeadConfig& cfg, int feature_dim, std::uint64_t seed);
  ExamHead(const ExamHead&) = delete;
  ExamHead& operator=(const ExamHead&) = delete;

  const ExamHeadConfig& config() const { return cfg_; }
  int feature_dim() const { return m_; }
  std::uint64_t seed() const { return seed_; }
  nn::ParameterStore<T>& store() { return store_; }
  const nn::ParameterStore<T>& store() const { return store_; }

  void fit_standardization(const std::vector<const FeatureSequence*>& train);

  // Standardized input: [K, M] for cc (resampled), [N, M] for mil.
  Tensor<T> prepare(const FeatureSequence& f) const;

  // cc: x [B, K, M] or [K, M] -> [B, 9]. mil: bag [N, M] -> [1, 9].
  Var logits(Graph<T>& g, Var x, Var* attention = nullptr) const;

  nn::Parameter<T>& fc_weight() { return *fc_w_; }
  nn::Parameter<T>& fc_bias() { return *fc_b_; }

 private:
  ExamHeadConfig cfg_;
  int m_;
  std::uint64_t seed_;
  nn::ParameterStore<T> store_;
  Tensor<T>* mean_ = nullptr;
  Tensor<T>* scale_ = nullptr;
  // cc
  std::array<nn::Parameter<T>*, 4> fwd_{}, bwd_{};  // w_ih, w_hh, b_ih, b_hh
  // mil
  nn::Parameter<T>* V_ = nullptr;
  nn::Parameter<T>* w_ = nullptr;
  nn::Parameter<T>* fc_w_ = nullptr;
  nn::Parameter<T>* fc_b_ = nullptr;
};

struct ExamSample {
  FeatureSequence features;
  data::ExamLabels labels;
};

struct ExamEval {
  std::array<double, data::kNumLabels> auc{};  // NaN where undefined
  double mean = 0;
  std::vector<std::string> warnings;
};

struct ExamPrediction {
  std::string exam_id;
  std::array<double, data::kNumLabels> prob{};
  std::vector<double> attention;
};

std::vector<ExamPrediction> predict_exams(const ExamHead<float>& head, const std::vector<ExamSample>& samples);

// Per-label AUC; single-class labels are undefined and excluded from the mean.
ExamEval evaluate_predictions(const std::vector<ExamPrediction>& preds, const std::vector<ExamSample>& samples);
ExamEval evaluate_exam_level(const ExamHead<float>& head, const std::vector<ExamSample>& samples);

// Mean BCE over the nine labels; keeps the epoch with the best mean
// validation AUC and leaves the head holding it.
TrainHistory train_exam_classifier(ExamHead<float>& head, const std::vector<ExamSample>& train,
                                   const std::vector<ExamSample>& val, const TrainConfig& cfg);

// Header `exam_id,` + nine label names + attn_<i> columns when present.
void write_exam_preds(const std::vector<ExamPrediction>& preds, const std::filesystem::path& csv);

// <stem>.f64 + <stem>.json
void save_head(const ExamHead<float>& head, const nlohmann::json& history, const std::filesystem::path& stem);
void load_head_values(ExamHead<float>& head, const std::filesystem::path& stem);

}  // namespace pecad::exam
