#include "pecad/backbones/backbones.hpp"

#include <optional>

#include "pecad/core/io.hpp"
#include "pecad/nn/transformer_ops.hpp"

namespace pecad::backbones {

using io::Json;
namespace ops = nn::ops;

void ViTConfig::validate() const {
  if (image_size < 1 || patch < 1) throw Error(ErrorKind::kConfig, "vit.image_size and vit.patch must be >= 1");
  if (image_size % patch != 0) {
    throw Error(ErrorKind::kPatch, "vit.patch " + std::to_string(patch) + " does not divide image_size " +
                                       std::to_string(image_size));
  }
  if (dim < 1 || depth < 1 || heads < 1) throw Error(ErrorKind::kConfig, "vit.dim, depth, heads must be >= 1");
  if (dim % heads != 0) throw Error(ErrorKind::kConfig, "vit.dim must be divisible by vit.heads");
}

void ModelSpec::validate() const {
  if (family != "xception" && family != "residual" && family != "vit") {
    throw Error(ErrorKind::kConfig, "model.family: unknown family '" + family + "'");
  }
  if (scale != "mini" && scale != "full") throw Error(ErrorKind::kConfig, "model.scale: must be mini or full");
  if (family == "vit") {
    if (scale != "mini") throw Error(ErrorKind::kConfig, "model.scale: vit supports mini only");
    if (with_se) throw Error(ErrorKind::kConfig, "model.with_se: not defined for vit");
    vit.validate();
  }
  if (se_ratio < 1) throw Error(ErrorKind::kConfig, "model.se_ratio must be >= 1");
}

void to_json(Json& j, const ModelSpec& s) {
  j = {{"family", s.family}, {"scale", s.scale}, {"with_se", s.with_se}, {"se_ratio", s.se_ratio}};
  if (s.family == "vit") {
    j["vit"] = {{"image_size", s.vit.image_size},
                {"patch", s.vit.patch},
                {"dim", s.vit.dim},
                {"depth", s.vit.depth},
                {"heads", s.vit.heads}};
  }
}

void from_json(const Json& j, ModelSpec& s) {
  if (!j.is_object()) throw Error(ErrorKind::kConfig, "model: expected an object");
  for (const auto& [k, v] : j.items()) {
    try {
      if (k == "family") s.family = v.get<std::string>();
      else if (k == "scale") s.scale = v.get<std::string>();
      else if (k == "with_se") s.with_se = v.get<bool>();
      else if (k == "se_ratio") s.se_ratio = v.get<int>();
      else if (k == "vit") {
        for (const auto& [vk, vv] : v.items()) {
          if (vk == "image_size") s.vit.image_size = vv.get<int>();
          else if (vk == "patch") s.vit.patch = vv.get<int>();
          else if (vk == "dim") s.vit.dim = vv.get<int>();
          else if (vk == "depth") s.vit.depth = vv.get<int>();
          else if (vk == "heads") s.vit.heads = vv.get<int>();
          else throw Error(ErrorKind::kConfig, "model.vit." + vk + ": unknown field");
        }
      } else {
        throw Error(ErrorKind::kConfig, "model." + k + ": unknown field");
      }
    } catch (const Json::exception&) {
      throw Error(ErrorKind::kConfig, "model." + k + ": wrong type");
    }
  }
}

std::string spec_fingerprint(const ModelSpec& spec) { return io::sha256_hex(Json(spec).dump()); }

template <typename T>
void ImageModel<T>::make_head(Builder<T>& b, int feature_dim) {
  feature_dim_ = feature_dim;
  head_ = Linear<T>(b, "head", feature_dim, 1);
  nn::init::uniform(head_.w->value, 1.0 / std::sqrt(static_cast<double>(feature_dim)), b.rng);
}

template <typename T>
void ImageModel<T>::reset_head(std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x6865616400000000ull);
  nn::init::uniform(head_.w->value, 1.0 / std::sqrt(static_cast<double>(feature_dim_)), rng);
  head_.b->value.fill(T{0});
}

namespace {

template <typename T>
void patchify_into(const T* image, int S, int P, T* out) {
  const int g = S / P;
  std::size_t k = 0;
  for (int py = 0; py < g; ++py)
    for (int px = 0; px < g; ++px)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < P; ++y)
          for (int x = 0; x < P; ++x)
            out[k++] = image[(static_cast<std::size_t>(c) * S + py * P + y) * S + px * P + x];
}

// ---------------------------------------------------------------------------
// Xception

template <typename T>
struct XBlock {
  struct Unit {
    bool relu;
    SeparableConv<T> sep;
    BatchNorm<T> bn;
  };
  std::vector<Unit> units;
  std::optional<Conv<T>> skip;
  std::optional<BatchNorm<T>> skip_bn;
  std::optional<SEParams<T>> se;
  int stride = 1;

  XBlock(Builder<T>& b, const std::string& name, int in, int out, int reps, int stride_, bool start_with_relu,
         bool grow_first, int se_ratio)
      : stride(stride_) {
    if (out != in || stride != 1) {
      skip.emplace(b, name + ".skip", in, out, 1, stride, 0);
      skip_bn.emplace(b, name + ".skipbn", out);
    }
    int k = 0;
    auto unit = [&](int ci, int co) {
      const std::string n = name + ".rep" + std::to_string(k++);
      units.push_back({true, SeparableConv<T>(b, n, ci, co), BatchNorm<T>(b, n + ".bn", co)});
    };
    int filters = in;
    if (grow_first) {
      unit(in, out);
      filters = out;
    }
    for (int i = 0; i < reps - 1; ++i) unit(filters, filters);
    if (!grow_first) unit(in, out);
    if (!start_with_relu) units.front().relu = false;
    if (se_ratio > 0) se = make_se(b, name + ".se", out, se_ratio);
  }

  Var operator()(Graph<T>& g, Var inp) const {
    Var x = inp;
    for (const auto& u : units) {
      if (u.relu) x = ops::relu(g, x);
      x = u.bn(g, u.sep(g, x));
    }
    if (stride != 1) x = ops::max_pool2d(g, x, 3, stride, 1);
    if (se) x = se_forward(g, x, *se);
    Var s = skip ? (*skip_bn)(g, (*skip)(g, inp)) : inp;
    return ops::add(g, x, s);
  }
};

struct XBlockSpec {
  int in, out, reps, stride;
  bool start_with_relu, grow_first;
};

std::vector<XBlockSpec> xception_blocks(bool full) {
  if (full) {
    std::vector<XBlockSpec> v = {{64, 128, 2, 2, false, true}, {128, 256, 2, 2, true, true}, {256, 728, 2, 2, true, true}};
    for (int i = 0; i < 8; ++i) v.push_back({728, 728, 3, 1, true, true});
    v.push_back({728, 1024, 2, 2, true, false});
    return v;
  }
  return {{32, 64, 2, 2, false, true},
          {64, 128, 2, 2, true, true},
          {128, 128, 3, 1, true, true},
          {128, 128, 3, 1, true, true},
          {128, 192, 2, 2, true, false}};
}

template <typename T>
class Xception final : public ImageModel<T> {
 public:
  Xception(const ModelSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Builder<T> b{this->store_, rng};
    const bool full = spec.scale == "full";
    const int se_ratio = spec.with_se ? spec.se_ratio : 0;
    const int c1 = full ? 32 : 16, c2 = full ? 64 : 32;
    const int pad = full ? 0 : 1;
    conv1_ = Conv<T>(b, "conv1", 3, c1, 3, 2, pad);
    bn1_ = BatchNorm<T>(b, "bn1", c1);
    conv2_ = Conv<T>(b, "conv2", c1, c2, 3, full ? 1 : 2, pad);
    bn2_ = BatchNorm<T>(b, "bn2", c2);
    int k = 1;
    for (const auto& s : xception_blocks(full)) {
      blocks_.emplace_back(b, "block" + std::to_string(k++), s.in, s.out, s.reps, s.stride, s.start_with_relu,
                           s.grow_first, se_ratio);
    }
    const int e = full ? 1024 : 192, c3 = full ? 1536 : 192, c4 = full ? 2048 : 256;
    conv3_ = SeparableConv<T>(b, "conv3", e, c3);
    bn3_ = BatchNorm<T>(b, "bn3", c3);
    conv4_ = SeparableConv<T>(b, "conv4", c3, c4);
    bn4_ = BatchNorm<T>(b, "bn4", c4);
    this->make_head(b, c4);
  }

  Var features(Graph<T>& g, Var x, Var* last_conv) const override {
    x = ops::relu(g, bn1_(g, conv1_(g, x)));
    x = ops::relu(g, bn2_(g, conv2_(g, x)));
    for (const auto& blk : blocks_) x = blk(g, x);
    x = ops::relu(g, bn3_(g, conv3_(g, x)));
    x = ops::relu(g, bn4_(g, conv4_(g, x)));
    if (last_conv) *last_conv = x;
    return ops::global_avg_pool(g, x);
  }

 private:
  Conv<T> conv1_, conv2_;
  BatchNorm<T> bn1_, bn2_, bn3_, bn4_;
  std::vector<XBlock<T>> blocks_;
  SeparableConv<T> conv3_, conv4_;
};

// ---------------------------------------------------------------------------
// Residual

template <typename T>
struct BasicBlock {
  Conv<T> conv1, conv2;
  BatchNorm<T> bn1, bn2;
  std::optional<Conv<T>> down;
  std::optional<BatchNorm<T>> down_bn;
  std::optional<SEParams<T>> se;

  BasicBlock(Builder<T>& b, const std::string& name, int in, int out, int stride, int se_ratio)
      : conv1(b, name + ".conv1", in, out, 3, stride, 1),
        conv2(b, name + ".conv2", out, out, 3, 1, 1),
        bn1(b, name + ".bn1", out),
        bn2(b, name + ".bn2", out) {
    if (se_ratio > 0) se = make_se(b, name + ".se", out, se_ratio);
    if (stride != 1 || in != out) {
      down.emplace(b, name + ".downsample", in, out, 1, stride, 0);
      down_bn.emplace(b, name + ".downsample_bn", out);
    }
  }

  Var operator()(Graph<T>& g, Var inp) const {
    Var x = ops::relu(g, bn1(g, conv1(g, inp)));
    x = bn2(g, conv2(g, x));
    if (se) x = se_forward(g, x, *se);
    Var s = down ? (*down_bn)(g, (*down)(g, inp)) : inp;
    return ops::relu(g, ops::add(g, x, s));
  }
};

template <typename T>
class Residual final : public ImageModel<T> {
 public:
  Residual(const ModelSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Builder<T> b{this->store_, rng};
    full_ = spec.scale == "full";
    const int se_ratio = spec.with_se ? spec.se_ratio : 0;
    const std::vector<int> widths = full_ ? std::vector<int>{64, 128, 256, 512} : std::vector<int>{16, 32, 64, 96};
    const int per_stage = full_ ? 2 : 1;
    stem_ = full_ ? Conv<T>(b, "conv1", 3, 64, 7, 2, 3) : Conv<T>(b, "conv1", 3, 16, 3, 2, 1);
    stem_bn_ = BatchNorm<T>(b, "bn1", widths[0]);
    int in = widths[0];
    for (std::size_t s = 0; s < widths.size(); ++s)
      for (int r = 0; r < per_stage; ++r) {
        const int stride = (s > 0 && r == 0) ? 2 : 1;
        blocks_.emplace_back(b, "layer" + std::to_string(s + 1) + "." + std::to_string(r), in, widths[s], stride,
                             se_ratio);
        in = widths[s];
      }
    this->make_head(b, in);
  }

  Var features(Graph<T>& g, Var x, Var* last_conv) const override {
    x = ops::relu(g, stem_bn_(g, stem_(g, x)));
    if (full_) x = ops::max_pool2d(g, x, 3, 2, 1);
    for (const auto& blk : blocks_) x = blk(g, x);
    if (last_conv) *last_conv = x;
    return ops::global_avg_pool(g, x);
  }

 private:
  bool full_ = false;
  Conv<T> stem_;
  BatchNorm<T> stem_bn_;
  std::vector<BasicBlock<T>> blocks_;
};

// ---------------------------------------------------------------------------
// ViT

template <typename T>
struct LayerNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  LayerNorm() = default;
  LayerNorm(Builder<T>& b, const std::string& name, int d)
      : gamma(&b.constant(name + ".weight", {d}, T{1})), beta(&b.constant(name + ".bias", {d}, T{0})) {}
  Var operator()(Graph<T>& g, Var x) const {
    return ops::layer_norm(g, x, g.parameter(*gamma), g.parameter(*beta));
  }
};

template <typename T>
Linear<T> vit_linear(Builder<T>& b, const std::string& name, int in, int out) {
  Linear<T> l(b, name, in, out);
  nn::init::normal(l.w->value, 0.02, b.rng);
  return l;
}

template <typename T>
struct EncoderBlock {
  LayerNorm<T> ln1, ln2;
  Linear<T> qkv, proj, fc1, fc2;
  int heads;

  EncoderBlock(Builder<T>& b, const std::string& name, int d, int heads_)
      : ln1(b, name + ".norm1", d),
        ln2(b, name + ".norm2", d),
        qkv(vit_linear(b, name + ".attn.qkv", d, 3 * d)),
        proj(vit_linear(b, name + ".attn.proj", d, d)),
        fc1(vit_linear(b, name + ".mlp.fc1", d, 4 * d)),
        fc2(vit_linear(b, name + ".mlp.fc2", 4 * d, d)),
        heads(heads_) {}

  Var operator()(Graph<T>& g, Var x) const {
    Var a = proj(g, ops::self_attention(g, qkv(g, ln1(g, x)), heads));
    x = ops::add(g, x, a);
    Var m = fc2(g, ops::gelu(g, fc1(g, ln2(g, x))));
    return ops::add(g, x, m);
  }
};

template <typename T>
class ViT final : public ImageModel<T> {
 public:
  ViT(const ModelSpec& spec, std::uint64_t seed) : cfg_(spec.vit) {
    std::mt19937_64 rng(seed);
    Builder<T> b{this->store_, rng};
    const int D = cfg_.dim, P = cfg_.patch;
    embed_ = vit_linear(b, "patch_embed", 3 * P * P, D);
    cls_ = &b.normal("cls_token", {D}, 0.02);
    pos_ = &b.normal("pos_embed", {cfg_.num_tokens(), D}, 0.02);
    for (int i = 0; i < cfg_.depth; ++i) blocks_.emplace_back(b, "blocks." + std::to_string(i), D, cfg_.heads);
    norm_ = LayerNorm<T>(b, "norm", D);
    this->make_head(b, D);
  }

  Var features(Graph<T>& g, Var x, Var* last_conv) const override {
    if (last_conv) throw Error(ErrorKind::kUnsupportedArchitecture, "vit has no convolutional feature map");
    const Tensor<T>& xv = g.value(x);
    const int S = cfg_.image_size, P = cfg_.patch;
    if (xv.rank() != 4 || xv.dim(1) != 3 || xv.dim(2) != S || xv.dim(3) != S) {
      throw Error(ErrorKind::kShape, "vit expects (B,3," + std::to_string(S) + "," + std::to_string(S) + "), got " +
                                         nn::shape_str(xv.shape()));
    }
    const int B = xv.dim(0), Np = cfg_.num_patches(), F = 3 * P * P;
    // Images are graph leaves here, so patches are gathered outside the tape.
    Tensor<T> patches({B, Np, F});
    for (int bi = 0; bi < B; ++bi) {
      patchify_into(xv.data() + static_cast<std::size_t>(bi) * 3 * S * S, S, P,
                    patches.data() + static_cast<std::size_t>(bi) * Np * F);
    }
    Var t = embed_(g, g.input(std::move(patches)));
    t = ops::prepend_token(g, t, g.parameter(*cls_));
    t = ops::add_broadcast(g, t, g.parameter(*pos_));
    for (const auto& blk : blocks_) t = blk(g, t);
    t = norm_(g, t);
    return ops::take_token(g, t, 0);
  }

 private:
  ViTConfig cfg_;
  Linear<T> embed_;
  Parameter<T>* cls_ = nullptr;
  Parameter<T>* pos_ = nullptr;
  std::vector<EncoderBlock<T>> blocks_;
  LayerNorm<T> norm_;
};

}  // namespace

template <typename T>
std::unique_ptr<ImageModel<T>> build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.family == "xception") return std::make_unique<Xception<T>>(spec, seed);
  if (spec.family == "residual") return std::make_unique<Residual<T>>(spec, seed);
  return std::make_unique<ViT<T>>(spec, seed);
}

template std::unique_ptr<ImageModel<float>> build_model(const ModelSpec&, std::uint64_t);
template std::unique_ptr<ImageModel<double>> build_model(const ModelSpec&, std::uint64_t);
template class ImageModel<float>;
template class ImageModel<double>;

std::vector<int> se_block_channels(const ModelSpec& spec) {
  std::vector<int> out;
  if (spec.family == "xception") {
    for (const auto& b : xception_blocks(spec.scale == "full")) out.push_back(b.out);
  } else if (spec.family == "residual") {
    if (spec.scale == "full") out = {64, 64, 128, 128, 256, 256, 512, 512};
    else out = {16, 32, 64, 96};
  }
  return out;
}

int patch_count(int size, int patch) {
  if (patch < 1 || size < 1 || size % patch != 0) {
    throw Error(ErrorKind::kPatch, "patch " + std::to_string(patch) + " does not divide " + std::to_string(size));
  }
  return (size / patch) * (size / patch);
}

std::vector<float> patchify(const float* image, int S, int P) {
  const int n = patch_count(S, P);
  std::vector<float> out(static_cast<std::size_t>(n) * 3 * P * P);
  patchify_into(image, S, P, out.data());
  return out;
}

std::vector<float> unpatchify(const std::vector<float>& patches, int S, int P) {
  const int n = patch_count(S, P), g = S / P;
  if (patches.size() != static_cast<std::size_t>(n) * 3 * P * P) {
    throw Error(ErrorKind::kShape, "unpatchify: patch buffer size");
  }
  std::vector<float> image(3ull * S * S);
  std::size_t k = 0;
  for (int py = 0; py < g; ++py)
    for (int px = 0; px < g; ++px)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < P; ++y)
          for (int x = 0; x < P; ++x)
            image[(static_cast<std::size_t>(c) * S + py * P + y) * S + px * P + x] = patches[k++];
  return image;
}

ModelHandle build_backbone(const ModelSpec& spec, std::uint64_t seed) {
  ModelHandle h;
  h.spec = spec;
  h.seed = seed;
  h.fingerprint = spec_fingerprint(spec);
  h.model = build_model<float>(spec, seed);
  return h;
}

std::vector<float> forward_features(const ModelHandle& h, const Tensor<float>& images) {
  Graph<float> g(false, false);
  Var f = h.model->features(g, g.input(images));
  return g.value(f).storage();
}

std::vector<float> forward_logits(const ModelHandle& h, const Tensor<float>& images) {
  Graph<float> g(false, false);
  Var z = h.model->forward(g, g.input(images));
  return g.value(z).storage();
}

}  // namespace pecad::backbones
