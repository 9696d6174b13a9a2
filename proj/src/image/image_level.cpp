#include "pecad/image/image_level.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "pecad/core/io.hpp"
#include "pecad/metrics/metrics.hpp"

namespace pecad::image {

using io::Json;
namespace fs = std::filesystem;
using nn::Graph;
using nn::Tensor;
using nn::Var;

void TrainConfig::validate() const {
  if (init != "random" && init != "checkpoint") throw Error(ErrorKind::kConfig, "train.init: random or checkpoint");
  if (init == "checkpoint" && checkpoint.empty()) throw Error(ErrorKind::kConfig, "train.checkpoint: path required");
  if (!(lr > 0)) throw Error(ErrorKind::kConfig, "train.lr must be > 0");
  if (epochs < 1) throw Error(ErrorKind::kConfig, "train.epochs must be >= 1");
  if (batch_size < 2) throw Error(ErrorKind::kConfig, "train.batch_size must be >= 2");
  if (patience < 1) throw Error(ErrorKind::kConfig, "train.patience must be >= 1");
}

void to_json(Json& j, const TrainConfig& c) {
  j = {{"init", c.init},   {"lr", c.lr},     {"epochs", c.epochs},
       {"batch_size", c.batch_size}, {"seed", c.seed}, {"patience", c.patience}};
  if (!c.checkpoint.empty()) j["checkpoint"] = c.checkpoint.string();
}

void from_json(const Json& j, TrainConfig& c) {
  if (!j.is_object()) throw Error(ErrorKind::kConfig, "train: expected an object");
  for (const auto& [k, v] : j.items()) {
    try {
      if (k == "init") c.init = v.get<std::string>();
      else if (k == "checkpoint") c.checkpoint = v.get<std::string>();
      else if (k == "lr") c.lr = v.get<double>();
      else if (k == "epochs") c.epochs = v.get<int>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "patience") c.patience = v.get<int>();
      else throw Error(ErrorKind::kConfig, "train." + k + ": unknown field");
    } catch (const Json::exception&) {
      throw Error(ErrorKind::kConfig, "train." + k + ": wrong type");
    }
  }
}

void to_json(Json& j, const TrainHistory& h) {
  auto nan_to_null = [](const std::vector<double>& v) {
    Json a = Json::array();
    for (double x : v) a.push_back(std::isnan(x) ? Json(nullptr) : Json(x));
    return a;
  };
  j = {{"train_loss", nan_to_null(h.train_loss)}, {"val_auc", nan_to_null(h.val_auc)}, {"best_epoch", h.best_epoch}};
}

Checkpoint make_checkpoint(const ModelHandle& h, const Json& history) {
  Checkpoint c;
  c.fingerprint = h.fingerprint;
  c.spec = h.spec;
  c.seed = h.seed;
  c.param_count = backbones::count_params(*h.model);
  c.values = h.model->store().flatten();
  c.history = history;
  return c;
}

void save_checkpoint(const Checkpoint& c, const fs::path& stem) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  io::write_f64(fs::path(stem.string() + ".f64"), c.values);
  io::write_json(fs::path(stem.string() + ".json"), Json{{"fingerprint", c.fingerprint},
                                                        {"spec", c.spec},
                                                        {"seed", c.seed},
                                                        {"param_count", c.param_count},
                                                        {"value_count", c.values.size()},
                                                        {"history", c.history}});
}

Checkpoint load_checkpoint(const fs::path& stem) {
  const fs::path meta_path(stem.string() + ".json");
  if (!fs::exists(meta_path)) throw Error(ErrorKind::kConfig, "checkpoint not found: " + meta_path.string());
  const Json meta = io::read_json(meta_path);
  Checkpoint c;
  try {
    c.fingerprint = meta.at("fingerprint").get<std::string>();
    c.spec = meta.at("spec");
    c.seed = meta.at("seed").get<std::uint64_t>();
    c.param_count = meta.at("param_count").get<long long>();
    c.history = meta.value("history", Json{});
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::kIncompatibleCheckpoint, meta_path.string() + ": " + e.what());
  }
  c.values = io::read_f64(fs::path(stem.string() + ".f64"));
  if (c.values.size() != meta.value("value_count", std::size_t{0})) {
    throw Error(ErrorKind::kIncompatibleCheckpoint, stem.string() + ": payload size does not match sidecar");
  }
  return c;
}

void apply_checkpoint(ModelHandle& h, const Checkpoint& c) {
  if (c.fingerprint != h.fingerprint) {
    throw Error(ErrorKind::kIncompatibleCheckpoint,
                "checkpoint architecture " + c.spec.dump() + " does not match model " + Json(h.spec).dump());
  }
  h.model->store().unflatten(c.values);
}

ModelHandle model_from_checkpoint(const Checkpoint& c) {
  backbones::ModelSpec spec;
  try {
    spec = c.spec.get<backbones::ModelSpec>();
  } catch (const Error& e) {
    throw Error(ErrorKind::kIncompatibleCheckpoint, std::string("checkpoint spec: ") + e.what());
  }
  ModelHandle h = backbones::build_backbone(spec, c.seed);
  apply_checkpoint(h, c);
  return h;
}

std::pair<std::vector<LabeledExam>, std::vector<LabeledExam>> split_validation(std::vector<LabeledExam> exams,
                                                                               double fraction, std::uint64_t seed) {
  if (exams.size() < 2) throw Error(ErrorKind::kData, "need at least 2 exams to hold out validation");
  const std::size_t n_val =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(fraction * exams.size())), 1, exams.size() - 1);
  std::sort(exams.begin(), exams.end(),
            [](const LabeledExam& a, const LabeledExam& b) { return a.record.exam_id < b.record.exam_id; });
  std::mt19937_64 rng(seed);
  std::shuffle(exams.begin(), exams.end(), rng);
  std::vector<LabeledExam> val(std::make_move_iterator(exams.begin()),
                               std::make_move_iterator(exams.begin() + static_cast<long>(n_val)));
  std::vector<LabeledExam> train(std::make_move_iterator(exams.begin() + static_cast<long>(n_val)),
                                 std::make_move_iterator(exams.end()));
  return {std::move(train), std::move(val)};
}

namespace {

struct ImageRef {
  const LabeledExam* exam;
  int index;
};

std::vector<ImageRef> flatten_images(const std::vector<LabeledExam>& exams) {
  std::vector<ImageRef> out;
  for (const auto& e : exams) {
    if (e.prep.num_images != static_cast<int>(e.record.image_labels.size())) {
      throw Error(ErrorKind::kData, e.record.exam_id + ": image count does not match image labels");
    }
    for (int i = 0; i < e.prep.num_images; ++i) out.push_back({&e, i});
  }
  return out;
}

Tensor<float> gather(const std::vector<ImageRef>& refs, std::size_t begin, std::size_t end) {
  const int S = refs[begin].exam->prep.size;
  Tensor<float> x({static_cast<int>(end - begin), 3, S, S});
  const std::size_t per = 3ull * S * S;
  for (std::size_t k = begin; k < end; ++k) {
    const auto& prep = refs[k].exam->prep;
    if (prep.size != S) throw Error(ErrorKind::kShape, "mixed image sizes in one batch");
    std::copy_n(prep.image(refs[k].index), per, x.data() + (k - begin) * per);
  }
  return x;
}

std::vector<std::uint8_t> labels_of(const std::vector<ImageRef>& refs) {
  std::vector<std::uint8_t> y;
  y.reserve(refs.size());
  for (const auto& r : refs) y.push_back(r.exam->record.image_labels[r.index]);
  return y;
}

std::vector<double> score_refs(const ModelHandle& model, const std::vector<ImageRef>& refs) {
  constexpr std::size_t kBatch = 64;
  std::vector<double> scores;
  scores.reserve(refs.size());
  for (std::size_t b = 0; b < refs.size(); b += kBatch) {
    const auto z = backbones::forward_logits(model, gather(refs, b, std::min(refs.size(), b + kBatch)));
    scores.insert(scores.end(), z.begin(), z.end());
  }
  return scores;
}

}  // namespace

std::vector<double> image_scores(const ModelHandle& model, const std::vector<LabeledExam>& exams) {
  return score_refs(model, flatten_images(exams));
}

double evaluate_image_level(const ModelHandle& model, const std::vector<LabeledExam>& exams) {
  const auto refs = flatten_images(exams);
  if (refs.empty()) throw Error(ErrorKind::kData, "evaluate_image_level: no images");
  const auto scores = score_refs(model, refs);
  const auto labels = labels_of(refs);
  return metrics::roc_auc(scores, labels);
}

TrainResult train_image_classifier(const std::vector<LabeledExam>& train, const std::vector<LabeledExam>& val,
                                   ModelHandle& model, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw Error(ErrorKind::kData, "train_image_classifier: empty training set");
  if (cfg.init == "checkpoint") {
    apply_checkpoint(model, load_checkpoint(cfg.checkpoint));
    model.model->reset_head(cfg.seed);
  }
  const auto refs = flatten_images(train);
  const auto val_refs = flatten_images(val);
  if (refs.size() < 2) throw Error(ErrorKind::kData, "train_image_classifier: need at least 2 images");
  const auto val_labels = labels_of(val_refs);

  auto& store = model.model->store();
  nn::Adam<float> opt(store, cfg.lr);
  std::mt19937_64 rng(cfg.seed ^ 0x747261696e000000ull);
  std::vector<std::size_t> order(refs.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  TrainHistory& hist = result.history;
  std::vector<double> best_values = store.flatten();
  double best_auc = -std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size();) {
      std::size_t e = std::min(order.size(), b + cfg.batch_size);
      // Batch norm needs two samples; fold a trailing singleton in.
      if (order.size() - e == 1) e = order.size();
      std::vector<ImageRef> batch;
      Tensor<float> targets({static_cast<int>(e - b), 1});
      for (std::size_t k = b; k < e; ++k) {
        batch.push_back(refs[order[k]]);
        targets[k - b] = refs[order[k]].exam->record.image_labels[refs[order[k]].index];
      }
      Graph<float> g(true);
      Var z = model.model->forward(g, g.input(gather(batch, 0, batch.size())));
      Var loss = nn::ops::bce_with_logits(g, z, targets);
      opt.zero_grad();
      g.backward(loss);
      opt.step();
      loss_sum += g.value(loss)[0] * static_cast<double>(e - b);
      seen += e - b;
      b = e;
    }
    hist.train_loss.push_back(loss_sum / static_cast<double>(seen));

    double auc = std::numeric_limits<double>::quiet_NaN();
    if (!val_refs.empty()) {
      try {
        auc = metrics::roc_auc(score_refs(model, val_refs), val_labels);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kUndefinedAuc) throw;
      }
    }
    hist.val_auc.push_back(auc);
    if (std::isnan(auc)) {
      // Without a defined validation AUC the latest epoch is kept.
      hist.best_epoch = epoch;
      best_values = store.flatten();
      continue;
    }
    if (auc > best_auc) {
      best_auc = auc;
      hist.best_epoch = epoch;
      best_values = store.flatten();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  store.unflatten(best_values);
  result.checkpoint = make_checkpoint(model, Json(hist));
  return result;
}

FeatureSequence extract_exam_features(const ModelHandle& model, const preprocess::PreprocessedExam& exam) {
  if (exam.num_images < 1) throw Error(ErrorKind::kShape, exam.exam_id + ": no images");
  if (!model.spec.is_cnn() && exam.size != model.spec.vit.image_size) {
    throw Error(ErrorKind::kShape, exam.exam_id + ": image size " + std::to_string(exam.size) +
                                       " does not match model input " + std::to_string(model.spec.vit.image_size));
  }
  FeatureSequence f;
  f.exam_id = exam.exam_id;
  f.n = exam.num_images;
  f.m = model.feature_dim();
  f.model_fingerprint = model.fingerprint;
  Tensor<float> x({exam.num_images, 3, exam.size, exam.size}, exam.images);
  f.values = backbones::forward_features(model, x);
  return f;
}

void save_features(const FeatureSequence& f, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_f32(dir / ("feat_" + f.exam_id + ".f32"), f.values);
  io::write_json(dir / ("feat_" + f.exam_id + ".json"),
                 Json{{"exam_id", f.exam_id}, {"N", f.n}, {"M", f.m}, {"model_fingerprint", f.model_fingerprint}});
}

FeatureSequence load_features(const fs::path& dir, const std::string& exam_id) {
  const fs::path meta_path = dir / ("feat_" + exam_id + ".json");
  if (!fs::exists(meta_path)) throw Error(ErrorKind::kData, "missing " + meta_path.string());
  const Json meta = io::read_json(meta_path);
  FeatureSequence f;
  try {
    f.exam_id = meta.at("exam_id").get<std::string>();
    f.n = meta.at("N").get<int>();
    f.m = meta.at("M").get<int>();
    f.model_fingerprint = meta.at("model_fingerprint").get<std::string>();
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::kData, meta_path.string() + ": " + e.what());
  }
  f.values = io::read_f32(dir / ("feat_" + exam_id + ".f32"));
  if (f.n < 1 || f.m < 1 || f.values.size() != static_cast<std::size_t>(f.n) * f.m) {
    throw Error(ErrorKind::kData, exam_id + ": feature payload does not match N x M");
  }
  return f;
}

Heatmap gradcam_pp_from(const std::vector<double>& A, const std::vector<double>& G, int C, int h, int w,
                        int out_size) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  if (A.size() != hw * C || G.size() != A.size()) throw Error(ErrorKind::kShape, "gradcam_pp: activation/gradient size");
  std::vector<double> cam(hw, 0.0);
  for (int c = 0; c < C; ++c) {
    const double* a = A.data() + c * hw;
    const double* g = G.data() + c * hw;
    const double sum_a = std::accumulate(a, a + hw, 0.0);
    double weight = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double g2 = g[i] * g[i], g3 = g2 * g[i];
      const double denom = 2 * g2 + sum_a * g3;
      const double alpha = std::abs(denom) < 1e-12 ? 0.0 : g2 / denom;
      weight += alpha * std::max(g[i], 0.0);
    }
    for (std::size_t i = 0; i < hw; ++i) cam[i] += weight * a[i];
  }
  std::vector<float> low(hw);
  for (std::size_t i = 0; i < hw; ++i) low[i] = static_cast<float>(std::max(cam[i], 0.0));
  Heatmap out;
  out.height = out.width = out_size;
  out.values = preprocess::crop_resize(low.data(), h, w, {0, h, 0, w}, out_size);
  const float mx = *std::max_element(out.values.begin(), out.values.end());
  for (float& v : out.values) v = mx > 0 ? std::clamp(v / mx, 0.0f, 1.0f) : 0.0f;
  return out;
}

Heatmap gradcam_pp(const ModelHandle& model, const float* image, int size) {
  if (!model.spec.is_cnn()) {
    throw Error(ErrorKind::kUnsupportedArchitecture, "Grad-CAM++ needs a convolutional backbone");
  }
  Graph<float> g(false, true);
  Tensor<float> x({1, 3, size, size}, std::vector<float>(image, image + 3ull * size * size));
  Var fmap;
  Var feats = model.model->features(g, g.input(std::move(x)), &fmap);
  Var logit = model.model->head(g, feats);
  g.backward(logit);
  const auto& av = g.value(fmap);
  const int C = av.dim(1), h = av.dim(2), w = av.dim(3);
  std::vector<double> A(av.values().begin(), av.values().end());
  std::vector<double> G(A.size(), 0.0);
  if (g.has_grad(fmap)) {
    const auto& gv = g.grad(fmap);
    std::copy(gv.values().begin(), gv.values().end(), G.begin());
  }
  Heatmap hm = gradcam_pp_from(A, G, C, h, w, size);
  // Parameter gradients were only a by-product.
  model.model->store().zero_grad();
  return hm;
}

}  // namespace pecad::image
