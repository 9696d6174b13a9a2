#include "pecad/data/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "pecad/core/error.hpp"

namespace pecad::data {

using nlohmann::json;

#define PECAD_SYNTH_FIELDS(X)                                                                   \
  X(n_exams) X(slices_min) X(slices_max) X(image_size) X(lesion_probability) X(lesion_hu_min)   \
  X(lesion_hu_max) X(chronic_hu_min) X(chronic_hu_max) X(lung_hu_min) X(lung_hu_max)            \
  X(body_hu_min) X(body_hu_max) X(noise_std) X(lesion_radius_min) X(lesion_radius_max)          \
  X(indeterminate_probability) X(indeterminate_hu_shift) X(rv_lv_gte_probability)               \
  X(chronic_probability) X(acute_and_chronic_probability)

void to_json(json& j, const SynthConfig& c) {
  j = json::object();
#define X(name) j[#name] = c.name;
  PECAD_SYNTH_FIELDS(X)
#undef X
}

void from_json(const json& j, SynthConfig& c) {
  if (!j.is_object()) throw Error(ErrorKind::kConfig, "synth: expected an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
#define X(name)                                                                        \
  if (key == #name) {                                                                  \
    known = true;                                                                      \
    try {                                                                              \
      c.name = value.get<decltype(c.name)>();                                          \
    } catch (const json::exception&) {                                                 \
      throw Error(ErrorKind::kConfig, "synth." #name ": wrong type");                  \
    }                                                                                  \
  }
    PECAD_SYNTH_FIELDS(X)
#undef X
    if (!known) throw Error(ErrorKind::kConfig, "synth." + key + ": unknown field");
  }
}

#undef PECAD_SYNTH_FIELDS

void validate(const SynthConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(ErrorKind::kConfig, "synth." + field + ": " + why);
  };
  auto prob = [&](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) fail(name, "must lie in [0, 1]");
  };
  if (c.n_exams < 1) fail("n_exams", "must be >= 1");
  if (c.slices_min < 1) fail("slices_min", "must be >= 1");
  if (c.slices_min > c.slices_max) fail("slices_max", "must be >= slices_min");
  if (c.image_size < 32) fail("image_size", "must be >= 32");
  prob(c.lesion_probability, "lesion_probability");
  prob(c.indeterminate_probability, "indeterminate_probability");
  prob(c.rv_lv_gte_probability, "rv_lv_gte_probability");
  prob(c.chronic_probability, "chronic_probability");
  prob(c.acute_and_chronic_probability, "acute_and_chronic_probability");
  if (c.chronic_probability + c.acute_and_chronic_probability > 1.0) {
    fail("acute_and_chronic_probability", "chronic + acute_and_chronic probabilities exceed 1");
  }
  if (c.lesion_hu_min > c.lesion_hu_max) fail("lesion_hu_max", "must be >= lesion_hu_min");
  if (c.chronic_hu_min > c.chronic_hu_max) fail("chronic_hu_max", "must be >= chronic_hu_min");
  if (c.lung_hu_min > c.lung_hu_max) fail("lung_hu_max", "must be >= lung_hu_min");
  if (c.body_hu_min > c.body_hu_max) fail("body_hu_max", "must be >= body_hu_min");
  if (c.noise_std < 0) fail("noise_std", "must be >= 0");
  if (!(c.lesion_radius_min > 0) || c.lesion_radius_min > c.lesion_radius_max || c.lesion_radius_max > 0.2) {
    fail("lesion_radius_min", "need 0 < lesion_radius_min <= lesion_radius_max <= 0.2");
  }
  auto inside_lung = [&](double lo, double hi) { return lo >= c.lung_hu_min && hi <= c.lung_hu_max; };
  if (inside_lung(c.lesion_hu_min, c.lesion_hu_max) || inside_lung(c.chronic_hu_min, c.chronic_hu_max)) {
    throw Error(ErrorKind::kDegenerateConfig,
                "lesion HU range lies entirely within the lung HU range; lesions would be invisible");
  }
}

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr std::int16_t kAirHu = -1000;

struct Ellipse {
  double cx, cy, ax, ay;
  bool contains(double x, double y, double scale = 1.0) const {
    const double dx = (x - cx) / (ax * scale), dy = (y - cy) / (ay * scale);
    return dx * dx + dy * dy <= 1.0;
  }
};

// Lung cross-sections shrink towards the apex and base.
double lung_scale(int z, int n) { return 0.7 + 0.3 * std::sin(kPi * (z + 0.5) / n); }

SynthExam generate_one(const SynthConfig& c, std::uint64_t seed, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::mt19937_64 rng(seq);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto chance = [&](double p) { return uni(0.0, 1.0) < p; };
  auto integer = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const int S = c.image_size;
  const int n = integer(c.slices_min, c.slices_max);

  // Anatomy.
  const double bcx = S / 2.0 + uni(-0.01, 0.01) * S, bcy = S / 2.0 + uni(-0.01, 0.01) * S;
  const Ellipse body{bcx, bcy, 0.45 * S * uni(0.95, 1.02), 0.36 * S * uni(0.95, 1.02)};
  const double lax = 0.14 * S * uni(0.92, 1.05), lay = 0.24 * S * uni(0.92, 1.05);
  const Ellipse lungs[2] = {{bcx - 0.17 * S, bcy - 0.02 * S, lax, lay},
                            {bcx + 0.17 * S, bcy - 0.02 * S, lax, lay}};
  const double span_x0 = lungs[0].cx - lungs[0].ax, span_x1 = lungs[1].cx + lungs[1].ax;
  const double body_hu = uni(c.body_hu_min, c.body_hu_max);
  const double lung_hu = uni(c.lung_hu_min, c.lung_hu_max);

  // Labels first; geometry follows them.
  const bool positive = chance(c.lesion_probability);
  const bool indeterminate = chance(c.indeterminate_probability);
  bool rv_gte = false, chronic = false, mixed = false;
  if (positive) {
    rv_gte = chance(c.rv_lv_gte_probability);
    const double u = uni(0.0, 1.0);
    chronic = u < c.chronic_probability;
    mixed = !chronic && u < c.chronic_probability + c.acute_and_chronic_probability;
  }

  SynthExam ex;
  char id[32];
  std::snprintf(id, sizeof id, "exam_%05d", index);
  ex.volume.exam_id = ex.record.exam_id = id;
  ex.volume.num_slices = n;
  ex.volume.height = ex.volume.width = S;
  std::vector<double> hu(static_cast<std::size_t>(n) * S * S);
  std::vector<std::uint8_t> lung_mask(hu.size(), 0);

  const double soft = body_hu + (indeterminate ? c.indeterminate_hu_shift : 0.0);
  ex.truth.lung_y0 = S;
  ex.truth.lung_x0 = S;
  for (int z = 0; z < n; ++z) {
    const double ls = lung_scale(z, n);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const std::size_t i = (static_cast<std::size_t>(z) * S + y) * S + x;
        double v = kAirHu;
        if (body.contains(x, y)) v = soft;
        if (lungs[0].contains(x, y, ls) || lungs[1].contains(x, y, ls)) {
          v = lung_hu;
          lung_mask[i] = 1;
          ex.truth.lung_y0 = std::min(ex.truth.lung_y0, y);
          ex.truth.lung_y1 = std::max(ex.truth.lung_y1, y + 1);
          ex.truth.lung_x0 = std::min(ex.truth.lung_x0, x);
          ex.truth.lung_x1 = std::max(ex.truth.lung_x1, x + 1);
        }
        hu[i] = v;
      }
  }

  ex.record.image_labels.assign(n, 0);
  if (positive) {
    int count = rv_gte ? integer(3, 5) : integer(1, 3);
    if (mixed) count = std::max(count, 2);
    const double rscale = rv_gte ? 1.25 : 1.0;
    for (int k = 0; k < count; ++k) {
      LesionTruth les;
      les.chronic = chronic || (mixed && k % 2 == 1);
      const Ellipse& lung = lungs[integer(0, 1)];
      const int zc = integer(0, n - 1);
      les.cz = zc + uni(-0.3, 0.3);
      les.radius = uni(c.lesion_radius_min, c.lesion_radius_max) * S * rscale;
      les.radius_z = uni(0.6, 1.4);
      const double ls = lung_scale(zc, n);
      do {
        les.cx = uni(lung.cx - lung.ax, lung.cx + lung.ax);
        les.cy = uni(lung.cy - lung.ay, lung.cy + lung.ay);
      } while (!lung.contains(les.cx, les.cy, 0.85 * ls));
      les.region = std::clamp(static_cast<int>(3.0 * (les.cx - span_x0) / (span_x1 - span_x0)), 0, 2);
      const double value = les.chronic ? uni(c.chronic_hu_min, c.chronic_hu_max)
                                       : uni(c.lesion_hu_min, c.lesion_hu_max);
      const int z0 = std::max(0, static_cast<int>(std::floor(les.cz - les.radius_z)));
      const int z1 = std::min(n - 1, static_cast<int>(std::ceil(les.cz + les.radius_z)));
      for (int z = z0; z <= z1; ++z) {
        const double dz = (z - les.cz) / les.radius_z;
        if (std::abs(dz) >= 1.0) continue;
        const double r = les.radius * std::sqrt(1.0 - dz * dz);
        std::array<int, 5> box{z, S, 0, S, 0};
        for (int y = std::max(0, static_cast<int>(les.cy - r)); y <= std::min(S - 1, static_cast<int>(les.cy + r) + 1); ++y)
          for (int x = std::max(0, static_cast<int>(les.cx - r)); x <= std::min(S - 1, static_cast<int>(les.cx + r) + 1); ++x) {
            const std::size_t i = (static_cast<std::size_t>(z) * S + y) * S + x;
            if (!lung_mask[i]) continue;
            if ((x - les.cx) * (x - les.cx) + (y - les.cy) * (y - les.cy) > r * r) continue;
            hu[i] = value;
            box[1] = std::min(box[1], y);
            box[2] = std::max(box[2], y + 1);
            box[3] = std::min(box[3], x);
            box[4] = std::max(box[4], x + 1);
          }
        if (box[2] > box[1]) {
          les.slice_boxes.push_back(box);
          ex.record.image_labels[z] = 1;
        }
      }
      ExamLabels& l = ex.record.labels;
      l[les.region == 0 ? Label::kLeftsidedPe : les.region == 1 ? Label::kCentralPe : Label::kRightsidedPe] = 1;
      ex.truth.lesions.push_back(std::move(les));
    }
  }

  ExamLabels& l = ex.record.labels;
  l[Label::kNegativeExamForPe] = positive ? 0 : 1;
  l[Label::kIndeterminate] = indeterminate ? 1 : 0;
  l[Label::kRvLvRatioGte1] = positive && rv_gte ? 1 : 0;
  l[Label::kRvLvRatioLt1] = positive && !rv_gte ? 1 : 0;
  l[Label::kChronicPe] = chronic ? 1 : 0;
  l[Label::kAcuteAndChronicPe] = mixed ? 1 : 0;

  std::normal_distribution<double> noise(0.0, c.noise_std);
  ex.volume.voxels.resize(hu.size());
  for (std::size_t i = 0; i < hu.size(); ++i) {
    const double v = std::round(hu[i] + (c.noise_std > 0 ? noise(rng) : 0.0));
    ex.volume.voxels[i] = static_cast<std::int16_t>(std::clamp(v, double{kMinHu}, double{kMaxHu}));
  }
  return ex;
}

}  // namespace

std::vector<SynthExam> synth_generate(const SynthConfig& config, std::uint64_t seed) {
  validate(config);
  std::vector<SynthExam> exams;
  exams.reserve(config.n_exams);
  for (int i = 0; i < config.n_exams; ++i) exams.push_back(generate_one(config, seed, i));
  return exams;
}

}  // namespace pecad::data
