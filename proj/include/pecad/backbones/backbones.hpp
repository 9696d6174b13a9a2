#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pecad/backbones/layers.hpp"

namespace pecad::backbones {

struct ViTConfig {
  int image_size = 64;
  int patch = 16;
  int dim = 64;
  int depth = 4;
  int heads = 4;

  int num_patches() const { return (image_size / patch) * (image_size / patch); }
  int num_tokens() const { return num_patches() + 1; }
  void validate() const;
  bool operator==(const ViTConfig&) const = default;
};

// family: xception | residual | vit. scale applies to the CNN families.
struct ModelSpec {
  std::string family = "xception";
  std::string scale = "mini";
  bool with_se = false;
  int se_ratio = 16;
  ViTConfig vit;

  bool is_cnn() const { return family != "vit"; }
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

// sha256 over the canonical architecture description.
std::string spec_fingerprint(const ModelSpec& spec);

// Image classifier: backbone producing an M-wide pooled feature, plus a
// single-logit linear head.
template <typename T>
class ImageModel {
 public:
  virtual ~ImageModel() = default;

  // x [B, 3, S, S] -> [B, M]. For CNNs, *last_conv (if given) receives the
  // final convolutional feature map before pooling.
  virtual Var features(Graph<T>& g, Var x, Var* last_conv = nullptr) const = 0;

  // [B, M] -> [B, 1]
  Var head(Graph<T>& g, Var feats) const { return head_(g, feats); }

  Var forward(Graph<T>& g, Var x) const { return head(g, features(g, x)); }

  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }
  int feature_dim() const { return feature_dim_; }
  const Linear<T>& head_layer() const { return head_; }

  // Re-draws the head from its own seeded stream (used after transfer).
  void reset_head(std::uint64_t seed);

 protected:
  void make_head(Builder<T>& b, int feature_dim);

  ParameterStore<T> store_;
  Linear<T> head_;
  int feature_dim_ = 0;
};

template <typename T>
std::unique_ptr<ImageModel<T>> build_model(const ModelSpec& spec, std::uint64_t seed);

// Per-block SE widths that build_model inserts for this spec (with_se on).
std::vector<int> se_block_channels(const ModelSpec& spec);

// Trainable scalar count (running statistics excluded).
template <typename T>
long long count_params(const ImageModel<T>& model) {
  return static_cast<long long>(model.store().count());
}

// Row-major (S/P)^2 patches, each laid out (channel, row, col) = 3P^2 values.
std::vector<float> patchify(const float* image, int size, int patch);
std::vector<float> unpatchify(const std::vector<float>& patches, int size, int patch);
int patch_count(int size, int patch);

// Owning handle: model plus its spec, seed and fingerprint.
struct ModelHandle {
  ModelSpec spec;
  std::uint64_t seed = 0;
  std::string fingerprint;
  std::unique_ptr<ImageModel<float>> model;

  int feature_dim() const { return model->feature_dim(); }
};

ModelHandle build_backbone(const ModelSpec& spec, std::uint64_t seed);

// Eval-mode pooled features / logits for a batch of images [B, 3, S, S].
std::vector<float> forward_features(const ModelHandle& h, const Tensor<float>& images);
std::vector<float> forward_logits(const ModelHandle& h, const Tensor<float>& images);

}  // namespace pecad::backbones
