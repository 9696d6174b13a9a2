#include <gtest/gtest.h>

#include <chrono>

#include "pecad/data/synth.hpp"
#include "pecad/preprocess/preprocess.hpp"
#include "test_util.hpp"

using namespace pecad;
using namespace pecad::preprocess;

namespace {

// 64x64 slices: air ring of width 2, soft tissue inside, two lung rectangles
// and one sub-threshold speck that must be ignored.
data::HuVolume phantom(int slices) {
  data::HuVolume v{"ph", slices, 64, 64, std::vector<std::int16_t>(slices * 64 * 64, 40)};
  for (int s = 0; s < slices; ++s)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        std::int16_t& p = v.at(s, y, x);
        if (y < 2 || x < 2 || y >= 62 || x >= 62) p = -1000;
        if (y >= 20 && y < 40 && ((x >= 10 && x < 25) || (x >= 35 && x < 50))) p = -800;
        if (y >= 55 && y < 57 && x >= 30 && x < 32) p = -800;
      }
  return v;
}

}  // namespace

TEST(Window, ExhaustiveOverHuRange) {
  const auto t0 = std::chrono::steady_clock::now();
  const WindowSpec w;
  EXPECT_EQ(w.lo(), -250);
  EXPECT_EQ(w.hi(), 450);
  float prev = -1;
  for (int hu = data::kMinHu; hu <= data::kMaxHu; ++hu) {
    const float v = window_value(hu, w);
    const float want = hu <= -250 ? 0.0f : hu >= 450 ? 1.0f : static_cast<float>((hu + 250) / 700.0);
    ASSERT_EQ(v, want) << hu;
    ASSERT_GE(v, prev);
    prev = v;
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1.0);
}

TEST(Window, VolumeMatchesScalarAndValidates) {
  data::HuVolume v{"w", 1, 2, 3, {-1024, -250, 100, 449, 450, 3071}};
  const auto out = apply_window(v, {});
  for (int i = 0; i < 6; ++i) EXPECT_EQ(out.values[i], window_value(v.voxels[i], {}));
  EXPECT_ERROR_KIND(apply_window(v, {100, 0}), ErrorKind::kConfig);
}

TEST(CropResize, CheckerboardBilinearOracle) {
  const float board[4] = {1, 0, 0, 1};
  const auto out = crop_resize(board, 2, 2, {0, 2, 0, 2}, 4);
  const float want[16] = {1, .75f, .25f, 0, .75f, .625f, .375f, .25f, .25f, .375f, .625f, .75f, 0, .25f, .75f, 1};
  for (int i = 0; i < 16; ++i) EXPECT_FLOAT_EQ(out[i], want[i]) << i;
}

TEST(CropResize, IdentityAndSubBox) {
  std::vector<float> img(5 * 7);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i);
  const auto id = crop_resize(img.data(), 5, 7, {1, 4, 2, 5}, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) EXPECT_EQ(id[y * 3 + x], img[(y + 1) * 7 + x + 2]);
  EXPECT_ERROR_KIND(crop_resize(img.data(), 5, 7, {0, 6, 0, 7}, 3), ErrorKind::kInvalidBox);
  EXPECT_ERROR_KIND(crop_resize(img.data(), 5, 7, {2, 2, 0, 7}, 3), ErrorKind::kInvalidBox);
}

TEST(Lungs, PhantomBox) {
  PreprocConfig cfg;
  const auto box = localize_lungs(phantom(3), cfg);
  EXPECT_EQ(box, (CropBox{12, 48, 2, 58}));
  cfg.margin = 0;
  EXPECT_EQ(localize_lungs(phantom(1), cfg), (CropBox{20, 40, 10, 50}));
}

TEST(Lungs, SmallBoxGrowsAndMissingLungFallsBack) {
  data::HuVolume v{"s", 1, 64, 64, std::vector<std::int16_t>(64 * 64, 40)};
  for (int y = 30; y < 36; ++y)
    for (int x = 30; x < 36; ++x) v.at(0, y, x) = -800;
  PreprocConfig cfg;
  cfg.margin = 0;
  const auto box = localize_lungs(v, cfg);
  EXPECT_EQ(box.height(), 16);
  EXPECT_EQ(box.width(), 16);
  EXPECT_LE(box.y0, 30);
  EXPECT_GE(box.y1, 36);

  data::HuVolume flat{"f", 2, 48, 48, std::vector<std::int16_t>(2 * 48 * 48, 40)};
  EXPECT_ERROR_KIND(localize_lungs(flat, cfg), ErrorKind::kNoLungFound);
  cfg.out_size = 32;
  const auto p = preprocess_exam(flat, cfg);
  EXPECT_TRUE(p.fallback);
  EXPECT_EQ(p.box, (CropBox{0, 48, 0, 48}));
}

TEST(Triplet, EdgesReplicate) {
  const int S = 2, N = 3;
  std::vector<float> planes(N * S * S);
  for (int s = 0; s < N; ++s)
    for (int k = 0; k < S * S; ++k) planes[s * S * S + k] = static_cast<float>(s);
  auto chan = [&](int i) {
    const auto t = make_triplet(planes, N, S, i);
    return std::vector<float>{t[0], t[4], t[8]};
  };
  EXPECT_EQ(chan(0), (std::vector<float>{0, 0, 1}));
  EXPECT_EQ(chan(1), (std::vector<float>{0, 1, 2}));
  EXPECT_EQ(chan(2), (std::vector<float>{1, 2, 2}));
  EXPECT_ERROR_KIND(make_triplet(planes, N, S, 3), ErrorKind::kIndex);
  EXPECT_EQ(make_triplet(std::vector<float>(S * S), 1, S, 0), std::vector<float>(3 * S * S));
}

TEST(PreprocessExam, ShapeRangeAndRoundTrip) {
  data::SynthConfig sc;
  sc.n_exams = 2;
  sc.image_size = 64;
  const auto exams = data::synth_generate(sc, 5);
  PreprocConfig cfg;
  cfg.out_size = 48;
  const auto dir = testkit::scratch_dir("prep");
  for (const auto& ex : exams) {
    const auto p = preprocess_exam(ex.volume, cfg);
    EXPECT_FALSE(p.fallback);
    EXPECT_EQ(p.num_images, ex.volume.num_slices);
    EXPECT_EQ(p.images.size(), p.num_images * p.image_size());
    for (float v : p.images) ASSERT_TRUE(v >= 0 && v <= 1);
    // The middle channel of image i is the previous channel of image i+1.
    if (p.num_images > 1) {
      const std::size_t plane = 48 * 48;
      EXPECT_TRUE(std::equal(p.image(0) + plane, p.image(0) + 2 * plane, p.image(1)));
    }
    save_prep(p, dir);
    const auto back = load_prep(dir, p.exam_id);
    EXPECT_EQ(back.images, p.images);
    EXPECT_EQ(back.box, p.box);
    EXPECT_EQ(back.num_images, p.num_images);
    EXPECT_EQ(back.window.level, p.window.level);
  }
  EXPECT_ERROR_KIND(load_prep(dir, "nope"), ErrorKind::kData);
}

TEST(PreprocConfig, JsonAndValidation) {
  PreprocConfig c;
  c.out_size = 64;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<PreprocConfig>().out_size, 64);
  EXPECT_ERROR_KIND((nlohmann::json{{"bogus", 1}}.get<PreprocConfig>()), ErrorKind::kConfig);
  c.out_size = 8;
  EXPECT_ERROR_KIND(c.validate(), ErrorKind::kConfig);
}
