#include <charconv>
#include <set>

#include <yaml-cpp/yaml.h>

#include "pecad/bench/bench.hpp"
#include "pecad/core/io.hpp"

namespace pecad::bench {

namespace {

json scalar_to_json(const YAML::Node& n) {
  const std::string& s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  if (s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL") return nullptr;
  if (s == "true" || s == "True" || s == "TRUE") return true;
  if (s == "false" || s == "False" || s == "FALSE") return false;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  std::int64_t i = 0;
  if (auto r = std::from_chars(b, e, i); r.ec == std::errc() && r.ptr == e) return i;
  double d = 0;
  if (auto r = std::from_chars(b, e, d); r.ec == std::errc() && r.ptr == e) return d;
  return s;
}

json node_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Scalar:
      return scalar_to_json(n);
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (const auto& c : n) a.push_back(node_to_json(c));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = node_to_json(kv.second);
      return o;
    }
  }
  return nullptr;
}

[[noreturn]] void fail(const std::string& path, const std::string& why) {
  throw Error(ErrorKind::kConfig, path + ": " + why);
}

// Object reader that tracks consumed keys so leftovers are reported by path.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) fail(path_, "expected a mapping");
  }

  const std::string& path() const { return path_; }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  const json& need(const std::string& key) {
    const json* v = find(key);
    if (!v) fail(at(key), "required");
    return *v;
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    const json* v = find(key);
    if (!v) return fallback;
    try {
      return v->get<T>();
    } catch (const json::exception&) {
      fail(at(key), "wrong type");
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(at(k), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Runs a library parser/validator and re-raises config errors under `path`.
template <typename F>
void scoped(const std::string& path, F&& f) {
  try {
    f();
  } catch (const Error& e) {
    if (!is_config_error(e.kind())) throw;
    std::string inner = e.what();
    const std::string kind = std::string(to_string(e.kind())) + ": ";
    if (inner.rfind(kind, 0) == 0) inner.erase(0, kind.size());
    // "model.family: ..." under "arms[0].model" becomes "arms[0].model.family: ...".
    const std::string last = path.substr(path.find_last_of('.') == std::string::npos ? 0 : path.find_last_of('.') + 1);
    if (inner.rfind(last + ".", 0) == 0) throw Error(e.kind(), path + inner.substr(last.size()));
    throw Error(e.kind(), path + ": " + inner);
  } catch (const json::exception& e) {
    fail(path, e.what());
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

DataConfig parse_data(const json& j, const std::string& path, const fs::path& base, bool need_test) {
  Fields f(j, path);
  DataConfig c;
  if (const json* s = f.find("synth")) {
    data::SynthConfig sc;
    scoped(f.at("synth"), [&] {
      sc = s->get<data::SynthConfig>();
      data::validate(sc);
    });
    c.synth = sc;
  }
  c.synth_seed = f.get<std::uint64_t>("synth_seed", 0);
  c.manifest = resolve(f.get<std::string>("manifest", ""), base);
  if (c.synth.has_value() == !c.manifest.empty()) fail(path, "give exactly one of synth or manifest");
  if (const json* p = f.find("preprocess")) {
    scoped(f.at("preprocess"), [&] { c.preprocess = p->get<preprocess::PreprocConfig>(); });
  }
  scoped(f.at("preprocess"), [&] { c.preprocess.validate(); });
  c.n_test = f.get<int>("n_test", 0);
  if (need_test && c.n_test < 1) fail(f.at("n_test"), "must be >= 1");
  c.split_seed = f.get<std::uint64_t>("split_seed", 0);
  c.val_fraction = f.get<double>("val_fraction", 0.1);
  if (!(c.val_fraction > 0 && c.val_fraction < 1)) fail(f.at("val_fraction"), "must lie in (0, 1)");
  f.finish();
  return c;
}

image::TrainConfig parse_train(const json* j, const std::string& path, const fs::path& base, bool allow_pretrain) {
  image::TrainConfig t;
  if (j) scoped(path, [&] { t = j->get<image::TrainConfig>(); });
  t.checkpoint = resolve(t.checkpoint, base);
  if (allow_pretrain && t.init == "checkpoint" && t.checkpoint.empty()) return t;  // filled in later
  scoped(path, [&] { t.validate(); });
  return t;
}

backbones::ModelSpec parse_model(const json& j, const std::string& path) {
  backbones::ModelSpec m;
  scoped(path, [&] {
    m = j.get<backbones::ModelSpec>();
    m.validate();
  });
  return m;
}

void check_vit_size(const backbones::ModelSpec& m, const DataConfig& d, const std::string& path) {
  if (m.family == "vit" && m.vit.image_size != d.preprocess.out_size) {
    fail(path + ".vit.image_size", "must equal data.preprocess.out_size (" + std::to_string(d.preprocess.out_size) + ")");
  }
}

}  // namespace

json yaml_to_json(const std::string& text) {
  try {
    return node_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw Error(ErrorKind::kConfig, std::string("yaml: ") + e.what());
  }
}

json load_config_file(const fs::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfig, "cannot read config " + path.string());
  }
  if (path.extension() == ".json") {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kConfig, path.string() + ": " + e.what());
    }
  }
  return yaml_to_json(text);
}

ExperimentConfig parse_experiment(const json& j, const fs::path& base) {
  Fields f(j, "");
  ExperimentConfig c;
  c.name = f.get<std::string>("name", "experiment");
  if (const json* s = f.find("seeds")) {
    if (s->is_number_integer()) {
      const int n = s->get<int>();
      if (n < 1) fail("seeds", "must be >= 1");
      for (int i = 0; i < n; ++i) c.seeds.push_back(static_cast<std::uint64_t>(i));
    } else {
      try {
        c.seeds = s->get<std::vector<std::uint64_t>>();
      } catch (const json::exception&) {
        fail("seeds", "expected a count or a list of non-negative integers");
      }
    }
  } else {
    for (int i = 0; i < 10; ++i) c.seeds.push_back(static_cast<std::uint64_t>(i));
  }
  if (c.seeds.empty()) fail("seeds", "at least one seed required");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) fail("seeds", "duplicate seed");

  c.data = parse_data(f.need("data"), "data", base, true);

  if (const json* p = f.find("pretrain")) {
    Fields pf(*p, "pretrain");
    PretrainConfig pc;
    pc.data = parse_data(pf.need("data"), "pretrain.data", base, false);
    pc.model = parse_model(pf.need("model"), "pretrain.model");
    check_vit_size(pc.model, pc.data, "pretrain.model");
    pc.train = parse_train(pf.find("train"), "pretrain.train", base, false);
    if (pc.train.init != "random") fail("pretrain.train.init", "pretraining starts from random weights");
    pf.finish();
    c.pretrain = pc;
  }

  const json& arms = f.need("arms");
  if (!arms.is_array() || arms.empty()) fail("arms", "expected a non-empty list");
  std::set<std::string> labels;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const std::string path = "arms[" + std::to_string(i) + "]";
    Fields af(arms[i], path);
    ArmConfig a;
    a.label = af.get<std::string>("label", "");
    if (a.label.empty()) fail(af.at("label"), "required");
    if (a.label.find_first_of(",/\\ \t\n") != std::string::npos) fail(af.at("label"), "no commas, slashes or spaces");
    if (!labels.insert(a.label).second) fail(af.at("label"), "duplicate label '" + a.label + "'");
    a.model = parse_model(af.need("model"), af.at("model"));
    check_vit_size(a.model, c.data, af.at("model"));
    a.train = parse_train(af.find("train"), af.at("train"), base, true);
    if (a.train.init == "checkpoint" && a.train.checkpoint.empty()) {
      if (!c.pretrain) fail(af.at("train.checkpoint"), "required when the experiment has no pretrain section");
      if (c.pretrain->model != a.model) fail(af.at("model"), "must match pretrain.model to start from its checkpoint");
    }
    if (const json* heads = af.find("exam_heads")) {
      if (!heads->is_array()) fail(af.at("exam_heads"), "expected a list");
      std::set<std::string> names;
      for (std::size_t h = 0; h < heads->size(); ++h) {
        const std::string hp = af.at("exam_heads") + "[" + std::to_string(h) + "]";
        Fields hf((*heads)[h], hp);
        HeadArm ha;
        ha.name = hf.get<std::string>("name", "");
        if (ha.name.empty() || ha.name.find_first_of(",/\\ \t\n") != std::string::npos) {
          fail(hf.at("name"), "required, no commas, slashes or spaces");
        }
        if (!names.insert(ha.name).second) fail(hf.at("name"), "duplicate head name '" + ha.name + "'");
        scoped(hf.at("head"), [&] {
          ha.head = hf.need("head").get<exam::ExamHeadConfig>();
          ha.head.validate();
        });
        ha.train = parse_train(hf.find("train"), hf.at("train"), base, false);
        if (ha.train.init != "random") fail(hf.at("train.init"), "exam heads start from random weights");
        hf.finish();
        a.exam_heads.push_back(std::move(ha));
      }
    }
    af.finish();
    c.arms.push_back(std::move(a));
  }

  if (const json* tests = f.find("tests")) {
    if (!tests->is_array()) fail("tests", "expected a list");
    for (std::size_t i = 0; i < tests->size(); ++i) {
      const std::string path = "tests[" + std::to_string(i) + "]";
      Fields tf((*tests)[i], path);
      TestSpec t;
      t.a = tf.get<std::string>("a", "");
      t.b = tf.get<std::string>("b", "");
      t.metric = tf.get<std::string>("metric", "image_auc");
      t.one_tailed = tf.get<bool>("one_tailed", true);
      for (const auto* side : {&t.a, &t.b}) {
        if (!labels.count(*side)) fail(path, "unknown arm '" + *side + "'");
      }
      for (const auto* side : {&t.a, &t.b}) {
        const auto& arm = *std::find_if(c.arms.begin(), c.arms.end(), [&](const ArmConfig& x) { return x.label == *side; });
        const auto names = metric_names(arm);
        if (std::find(names.begin(), names.end(), t.metric) == names.end()) {
          fail(tf.at("metric"), "arm '" + *side + "' has no metric '" + t.metric + "'");
        }
      }
      tf.finish();
      c.tests.push_back(t);
    }
  }

  if (const json* r = f.find("report")) {
    Fields rf(*r, "report");
    c.report.gradcam_samples = rf.get<int>("gradcam_samples", 4);
    if (c.report.gradcam_samples < 0) fail("report.gradcam_samples", "must be >= 0");
    c.report.scatter = rf.get<std::vector<std::string>>("scatter", {});
    if (!c.report.scatter.empty() && c.report.scatter.size() != 2) fail("report.scatter", "expected two metric names");
    rf.finish();
  }

  c.out = resolve(f.get<std::string>("out", ""), base);
  f.finish();
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  return parse_experiment(load_config_file(path), fs::absolute(path).parent_path());
}

json to_json(const DataConfig& c) {
  json j = {{"synth_seed", c.synth_seed}, {"preprocess", c.preprocess}, {"n_test", c.n_test},
            {"split_seed", c.split_seed}, {"val_fraction", c.val_fraction}};
  if (c.synth) j["synth"] = *c.synth;
  if (!c.manifest.empty()) j["manifest"] = c.manifest.string();
  return j;
}

json to_json(const ExperimentConfig& c) {
  json j = {{"name", c.name}, {"seeds", c.seeds}, {"data", to_json(c.data)}};
  if (c.pretrain) {
    j["pretrain"] = {{"data", to_json(c.pretrain->data)}, {"model", c.pretrain->model}, {"train", c.pretrain->train}};
  }
  json arms = json::array();
  for (const auto& a : c.arms) {
    json heads = json::array();
    for (const auto& h : a.exam_heads) heads.push_back({{"name", h.name}, {"head", h.head}, {"train", h.train}});
    arms.push_back({{"label", a.label}, {"model", a.model}, {"train", a.train}, {"exam_heads", heads}});
  }
  j["arms"] = arms;
  json tests = json::array();
  for (const auto& t : c.tests) tests.push_back({{"a", t.a}, {"b", t.b}, {"metric", t.metric}, {"one_tailed", t.one_tailed}});
  j["tests"] = tests;
  j["report"] = {{"gradcam_samples", c.report.gradcam_samples}, {"scatter", c.report.scatter}};
  if (!c.out.empty()) j["out"] = c.out.string();
  return j;
}

std::vector<std::string> metric_names(const ArmConfig& arm) {
  std::vector<std::string> names = {"image_auc", "val_auc"};
  for (const auto& h : arm.exam_heads) {
    names.push_back("exam_" + h.name + "_mean");
    for (auto label : data::kLabelNames) names.push_back("exam_" + h.name + "_" + std::string(label));
  }
  return names;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace pecad::bench
