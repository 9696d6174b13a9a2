#include "pecad/exam/exam_level.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "pecad/core/io.hpp"
#include "pecad/metrics/metrics.hpp"
#include "pecad/nn/optim.hpp"

namespace pecad::exam {

using io::Json;
namespace fs = std::filesystem;
namespace ops = nn::ops;

void ExamHeadConfig::validate() const {
  if (kind != "cc" && kind != "mil") throw Error(ErrorKind::kConfig, "head.kind: cc or mil");
  if (k < 2) throw Error(ErrorKind::kConfig, "head.k must be >= 2");
  if (hidden < 1) throw Error(ErrorKind::kConfig, "head.hidden must be >= 1");
  if (mode != "MP" && mode != "AP" && mode != "AMP") throw Error(ErrorKind::kConfig, "head.mode: MP, AP or AMP");
  if (attn_hidden < 1) throw Error(ErrorKind::kConfig, "head.attn_hidden must be >= 1");
}

void to_json(Json& j, const ExamHeadConfig& c) {
  if (c.kind == "cc") j = {{"kind", c.kind}, {"k", c.k}, {"hidden", c.hidden}};
  else j = {{"kind", c.kind}, {"mode", c.mode}, {"attn_hidden", c.attn_hidden}};
}

void from_json(const Json& j, ExamHeadConfig& c) {
  if (!j.is_object()) throw Error(ErrorKind::kConfig, "head: expected an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "kind") c.kind = v.get<std::string>();
      else if (key == "k") c.k = v.get<int>();
      else if (key == "hidden") c.hidden = v.get<int>();
      else if (key == "mode") c.mode = v.get<std::string>();
      else if (key == "attn_hidden") c.attn_hidden = v.get<int>();
      else throw Error(ErrorKind::kConfig, "head." + key + ": unknown field");
    } catch (const Json::exception&) {
      throw Error(ErrorKind::kConfig, "head." + key + ": wrong type");
    }
  }
}

template <typename T>
ExamHead<T>::ExamHead(const ExamHeadConfig& cfg, int feature_dim, std::uint64_t seed)
    : cfg_(cfg), m_(feature_dim), seed_(seed) {
  cfg_.validate();
  if (m_ < 1) throw Error(ErrorKind::kConfig, "exam head: feature_dim must be >= 1");
  std::mt19937_64 rng(seed);
  auto uniform = [&](const std::string& name, nn::Shape shape, double bound) {
    auto& p = store_.add(name, std::move(shape));
    nn::init::uniform(p.value, bound, rng);
    return &p;
  };
  int fc_in = 0;
  if (cfg_.kind == "cc") {
    const int H = cfg_.hidden;
    const double b = 1.0 / std::sqrt(static_cast<double>(H));
    for (auto [dir, arr] : {std::pair{"gru.fwd", &fwd_}, std::pair{"gru.bwd", &bwd_}}) {
      const std::string d(dir);
      (*arr)[0] = uniform(d + ".w_ih", {3 * H, m_}, b);
      (*arr)[1] = uniform(d + ".w_hh", {3 * H, H}, b);
      (*arr)[2] = uniform(d + ".b_ih", {3 * H}, b);
      (*arr)[3] = uniform(d + ".b_hh", {3 * H}, b);
    }
    fc_in = 4 * H;
  } else {
    if (cfg_.mode != "MP") {
      V_ = uniform("attn.V", {cfg_.attn_hidden, m_}, 1.0 / std::sqrt(static_cast<double>(m_)));
      w_ = uniform("attn.w", {cfg_.attn_hidden}, 1.0 / std::sqrt(static_cast<double>(cfg_.attn_hidden)));
    }
    fc_in = cfg_.mode == "AMP" ? 2 * m_ : m_;
  }
  fc_w_ = uniform("fc.weight", {data::kNumLabels, fc_in}, 1.0 / std::sqrt(static_cast<double>(fc_in)));
  fc_b_ = &store_.add("fc.bias", {data::kNumLabels});
  mean_ = &store_.add_buffer("feature_mean", {m_}, T{0});
  scale_ = &store_.add_buffer("feature_inv_std", {m_}, T{1});
}

template <typename T>
void ExamHead<T>::fit_standardization(const std::vector<const FeatureSequence*>& train) {
  std::vector<double> sum(m_, 0.0), sq(m_, 0.0);
  double count = 0;
  for (const auto* f : train) {
    if (f->m != m_) throw Error(ErrorKind::kData, f->exam_id + ": feature dim " + std::to_string(f->m) +
                                                      " != head dim " + std::to_string(m_));
    for (int i = 0; i < f->n; ++i)
      for (int c = 0; c < m_; ++c) {
        const double v = f->row(i)[c];
        sum[c] += v;
        sq[c] += v * v;
      }
    count += f->n;
  }
  if (count == 0) throw Error(ErrorKind::kData, "fit_standardization: no feature rows");
  for (int c = 0; c < m_; ++c) {
    const double mu = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - mu * mu);
    (*mean_)[c] = static_cast<T>(mu);
    (*scale_)[c] = static_cast<T>(1.0 / std::max(std::sqrt(var), 1e-6));
  }
}

template <typename T>
Tensor<T> ExamHead<T>::prepare(const FeatureSequence& f) const {
  if (f.m != m_) {
    throw Error(ErrorKind::kShape, f.exam_id + ": feature dim " + std::to_string(f.m) + " != head dim " +
                                       std::to_string(m_));
  }
  if (f.n < 1) throw Error(ErrorKind::kShape, f.exam_id + ": empty feature sequence");
  std::vector<T> rows(static_cast<std::size_t>(f.n) * m_);
  for (int i = 0; i < f.n; ++i)
    for (int c = 0; c < m_; ++c) rows[static_cast<std::size_t>(i) * m_ + c] = (static_cast<T>(f.row(i)[c]) - (*mean_)[c]) * (*scale_)[c];
  if (cfg_.kind == "cc") return Tensor<T>({cfg_.k, m_}, resample_to_k(rows.data(), f.n, m_, cfg_.k));
  return Tensor<T>({f.n, m_}, std::move(rows));
}

template <typename T>
Var ExamHead<T>::logits(Graph<T>& g, Var x, Var* attention) const {
  const auto& xv = g.value(x);
  if (xv.dim(-1) != m_) {
    throw Error(ErrorKind::kShape, "exam head input " + nn::shape_str(xv.shape()) + " vs feature dim " +
                                       std::to_string(m_));
  }
  Var pooled;
  if (cfg_.kind == "cc") {
    if (xv.rank() == 2) x = ops::reshape(g, x, {1, xv.dim(0), m_});
    auto p = [&](nn::Parameter<T>* q) { return g.parameter(*q); };
    Var f = ops::gru(g, x, p(fwd_[0]), p(fwd_[1]), p(fwd_[2]), p(fwd_[3]), false);
    Var b = ops::gru(g, x, p(bwd_[0]), p(bwd_[1]), p(bwd_[2]), p(bwd_[3]), true);
    Var states = ops::concat_last(g, f, b);  // [B, K, 2H]
    pooled = ops::concat_last(g, ops::max_over_time(g, states), ops::mean_over_time(g, states));
  } else {
    if (xv.rank() != 2) throw Error(ErrorKind::kShape, "mil head expects one bag [N, M]");
    pooled = mil_pool(g, x, cfg_.mode, V_ ? g.parameter(*V_) : Var{}, w_ ? g.parameter(*w_) : Var{}, attention);
  }
  return ops::linear(g, pooled, g.parameter(*fc_w_), g.parameter(*fc_b_));
}

template class ExamHead<float>;
template class ExamHead<double>;

namespace {

// Logits [B, 9] for a list of samples on one graph.
Var batch_logits(Graph<float>& g, const ExamHead<float>& head, const std::vector<const ExamSample*>& batch,
                 std::vector<Var>* attention = nullptr) {
  if (head.config().kind == "cc") {
    const int K = head.config().k, M = head.feature_dim();
    Tensor<float> x({static_cast<int>(batch.size()), K, M});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto p = head.prepare(batch[b]->features);
      std::copy(p.values().begin(), p.values().end(), x.data() + b * K * M);
    }
    return head.logits(g, g.input(std::move(x)));
  }
  std::vector<Var> rows;
  for (const auto* s : batch) {
    Var a;
    rows.push_back(head.logits(g, g.input(head.prepare(s->features)), &a));
    if (attention) attention->push_back(a);
  }
  return ops::stack_rows(g, rows);
}

double sigmoid(double z) { return z >= 0 ? 1 / (1 + std::exp(-z)) : std::exp(z) / (1 + std::exp(z)); }

}  // namespace

std::vector<ExamPrediction> predict_exams(const ExamHead<float>& head, const std::vector<ExamSample>& samples) {
  std::vector<ExamPrediction> out;
  constexpr std::size_t kBatch = 16;
  for (std::size_t b = 0; b < samples.size(); b += kBatch) {
    std::vector<const ExamSample*> batch;
    for (std::size_t i = b; i < std::min(samples.size(), b + kBatch); ++i) batch.push_back(&samples[i]);
    Graph<float> g(false, false);
    std::vector<Var> attn;
    Var z = batch_logits(g, head, batch, &attn);
    const auto& zv = g.value(z);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ExamPrediction p;
      p.exam_id = batch[i]->features.exam_id;
      for (int l = 0; l < data::kNumLabels; ++l) p.prob[l] = sigmoid(zv[i * data::kNumLabels + l]);
      if (i < attn.size() && attn[i].valid()) {
        const auto& a = g.value(attn[i]);
        p.attention.assign(a.values().begin(), a.values().end());
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

ExamEval evaluate_predictions(const std::vector<ExamPrediction>& preds, const std::vector<ExamSample>& samples) {
  if (preds.size() != samples.size()) throw Error(ErrorKind::kShape, "evaluate: prediction/sample count mismatch");
  ExamEval ev;
  double sum = 0;
  int defined = 0;
  for (int l = 0; l < data::kNumLabels; ++l) {
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      s.push_back(preds[i].prob[l]);
      y.push_back(samples[i].labels.flags[l]);
    }
    try {
      ev.auc[l] = metrics::roc_auc(s, y);
      sum += ev.auc[l];
      ++defined;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kUndefinedAuc) throw;
      ev.auc[l] = std::numeric_limits<double>::quiet_NaN();
      ev.warnings.push_back(std::string(data::kLabelNames[l]) + ": single class, AUC undefined");
    }
  }
  ev.mean = defined ? sum / defined : std::numeric_limits<double>::quiet_NaN();
  return ev;
}

ExamEval evaluate_exam_level(const ExamHead<float>& head, const std::vector<ExamSample>& samples) {
  return evaluate_predictions(predict_exams(head, samples), samples);
}

TrainHistory train_exam_classifier(ExamHead<float>& head, const std::vector<ExamSample>& train,
                                   const std::vector<ExamSample>& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw Error(ErrorKind::kData, "train_exam_classifier: empty training set");
  const int M = train.front().features.m;
  for (const auto* set : {&train, &val})
    for (const auto& s : *set)
      if (s.features.m != M) throw Error(ErrorKind::kData, "mixed feature dims in exam dataset");

  std::vector<const FeatureSequence*> feats;
  for (const auto& s : train) feats.push_back(&s.features);
  head.fit_standardization(feats);

  auto& store = head.store();
  nn::Adam<float> opt(store, cfg.lr);
  std::mt19937_64 rng(cfg.seed ^ 0x6578616d00000000ull);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainHistory hist;
  std::vector<double> best = store.flatten();
  double best_auc = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::vector<const ExamSample*> batch;
      Tensor<float> targets({static_cast<int>(e - b), data::kNumLabels});
      for (std::size_t k = b; k < e; ++k) {
        batch.push_back(&train[order[k]]);
        for (int l = 0; l < data::kNumLabels; ++l) targets[(k - b) * data::kNumLabels + l] = train[order[k]].labels.flags[l];
      }
      Graph<float> g(true);
      Var loss = ops::bce_with_logits(g, batch_logits(g, head, batch), targets);
      opt.zero_grad();
      g.backward(loss);
      opt.step();
      loss_sum += g.value(loss)[0] * static_cast<double>(e - b);
    }
    hist.train_loss.push_back(loss_sum / static_cast<double>(train.size()));
    const double auc = val.empty() ? std::numeric_limits<double>::quiet_NaN() : evaluate_exam_level(head, val).mean;
    hist.val_auc.push_back(auc);
    if (std::isnan(auc)) {
      hist.best_epoch = epoch;
      best = store.flatten();
      continue;
    }
    if (auc > best_auc) {
      best_auc = auc;
      hist.best_epoch = epoch;
      best = store.flatten();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  store.unflatten(best);
  return hist;
}

void write_exam_preds(const std::vector<ExamPrediction>& preds, const fs::path& csv) {
  std::size_t n_attn = 0;
  for (const auto& p : preds) n_attn = std::max(n_attn, p.attention.size());
  std::ostringstream out;
  out.precision(17);
  out << "exam_id";
  for (auto name : data::kLabelNames) out << "," << name;
  for (std::size_t i = 0; i < n_attn; ++i) out << ",attn_" << i;
  out << "\n";
  for (const auto& p : preds) {
    out << p.exam_id;
    for (double v : p.prob) out << "," << v;
    for (std::size_t i = 0; i < n_attn; ++i) {
      out << ",";
      if (i < p.attention.size()) out << p.attention[i];
    }
    out << "\n";
  }
  io::write_text_atomic(csv, out.str());
}

void save_head(const ExamHead<float>& head, const Json& history, const fs::path& stem) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  const auto values = head.store().flatten();
  io::write_f64(fs::path(stem.string() + ".f64"), values);
  io::write_json(fs::path(stem.string() + ".json"), Json{{"head", head.config()},
                                                        {"feature_dim", head.feature_dim()},
                                                        {"seed", head.seed()},
                                                        {"param_count", head.store().count()},
                                                        {"value_count", values.size()},
                                                        {"history", history}});
}

void load_head_values(ExamHead<float>& head, const fs::path& stem) {
  const fs::path meta_path(stem.string() + ".json");
  if (!fs::exists(meta_path)) throw Error(ErrorKind::kConfig, "head checkpoint not found: " + meta_path.string());
  const Json meta = io::read_json(meta_path);
  if (meta.at("head") != Json(head.config()) || meta.at("feature_dim").get<int>() != head.feature_dim()) {
    throw Error(ErrorKind::kIncompatibleCheckpoint, stem.string() + ": head configuration differs");
  }
  head.store().unflatten(io::read_f64(fs::path(stem.string() + ".f64")));
}

}  // namespace pecad::exam
