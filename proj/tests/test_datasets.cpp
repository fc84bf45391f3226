#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "mpamatch/datasets.hpp"
#include "mpamatch/errors.hpp"
#include "support.hpp"

using namespace mpamatch;
using namespace mpamatch::datasets;
namespace fs = std::filesystem;

namespace {

/// images/ and masks/ with tiny PNGs; mask i holds values {0, 1 + i % 3}.
void write_layout(const fs::path& root, int count, const std::string& prefix = "img") {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (int i = 0; i < count; ++i) {
    char stem[64];
    std::snprintf(stem, sizeof stem, "%s_%03d", prefix.c_str(), i);
    auto img = torch::full({4, 4}, (i * 7) % 200, torch::kLong);
    save_mask(root / "images" / (std::string(stem) + ".png"), img);
    auto mask = torch::zeros({4, 4}, torch::kLong);
    mask.index_put_({0, 0}, 1 + i % 3);
    save_mask(root / "masks" / (std::string(stem) + ".png"), mask);
  }
}

}  // namespace

TEST(Palette, MappingAndJson) {
  Palette p;
  p.values = {{0, 0}, {255, 1}};
  EXPECT_TRUE(p.covers(255));
  EXPECT_FALSE(p.covers(7));
  EXPECT_EQ(p.num_classes(), 2);
  Palette glas;
  glas.values = {{0, 0}};
  glas.other_nonzero = 1;
  EXPECT_TRUE(glas.covers(17));
  EXPECT_EQ(glas.map(17), 1);
  EXPECT_EQ(Palette::from_json(glas.to_json()), glas);
  EXPECT_EQ(Palette::identity(3).map(2), 2);
}

TEST(Scan, GlasLayoutHonorsPredefinedSplit) {
  test::TempDir dir;
  write_layout(dir.path(), 165);
  nlohmann::json split{{"train", nlohmann::json::array()}, {"test", nlohmann::json::array()}};
  for (int i = 0; i < 165; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "img_%03d", i);
    split[i < 148 ? "train" : "test"].push_back(stem);
  }
  std::ofstream(dir / "split.json") << split.dump();
  Palette glas;
  glas.values = {{0, 0}};
  glas.other_nonzero = 1;
  auto m = scan(dir.path(), glas, "glas");
  EXPECT_EQ(m.entries.size(), 165u);
  EXPECT_TRUE(m.predefined_split);
  EXPECT_EQ(m.count(Split::test), 17u);
  EXPECT_EQ(m.count(Split::train), 148u);
  for (const auto& e : m.entries) EXPECT_EQ(e.classes, (std::vector<int>{0, 1}));

  auto s = datasets::split(m, 7.0 / 9.0, 0);
  EXPECT_EQ(s.count(Split::test), 17u);
  EXPECT_EQ(s.count(Split::train_labeled) + s.count(Split::train_unlabeled), 148u);
  EXPECT_EQ(s.count(Split::train_labeled), 115u);
}

TEST(Scan, EmptyAndMissingRoot) {
  test::TempDir dir;
  EXPECT_THROW(scan(dir.path(), Palette{}), DataError);
  EXPECT_THROW(scan(dir / "nope", Palette{}), DataError);
}

TEST(Scan, UnknownMaskValueNamesFile) {
  test::TempDir dir;
  write_layout(dir.path(), 3);
  auto bad = torch::zeros({4, 4}, torch::kLong);
  bad.index_put_({1, 1}, 7);
  save_mask(dir / "masks" / "img_001.png", bad);
  Palette p = Palette::identity(4);
  try {
    scan(dir.path(), p);
    FAIL() << "expected a palette error";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("img_001"), std::string::npos);
    EXPECT_NE(msg.find("7"), std::string::npos);
  }
}

TEST(Scan, LexicographicAndIdempotent) {
  test::TempDir dir;
  write_layout(dir.path(), 12, "b");
  write_layout(dir.path(), 3, "a");
  auto one = scan(dir.path(), Palette::identity(4));
  auto two = scan(dir.path(), Palette::identity(4));
  EXPECT_EQ(one, two);
  EXPECT_TRUE(std::is_sorted(one.entries.begin(), one.entries.end(),
                             [](const auto& x, const auto& y) { return x.id < y.id; }));
  EXPECT_EQ(one.entries.front().id, "a_000");
}

TEST(Scan, ImageWithoutMaskIsUnlabeled) {
  test::TempDir dir;
  write_layout(dir.path(), 4);
  fs::remove(dir / "masks" / "img_002.png");
  auto m = scan(dir.path(), Palette::identity(4));
  EXPECT_EQ(m.entries[2].split, Split::train_unlabeled);
  EXPECT_FALSE(m.entries[2].has_mask());
  std::ofstream(dir / "split.json") << R"({"train": ["img_000", "img_001", "img_003"], "test": ["img_002"]})";
  EXPECT_THROW(scan(dir.path(), Palette::identity(4)), DataError);
}

TEST(Manifest, SerializationRoundTrip) {
  test::TempDir dir;
  write_layout(dir / "data", 6);
  auto m = datasets::split(scan(dir / "data", Palette::identity(4)), 0.5, 3, 0.2);
  m.save(dir / "manifest.json");
  EXPECT_EQ(DatasetManifest::load(dir / "manifest.json"), m);
  EXPECT_EQ(DatasetManifest::from_json(m.to_json()), m);
  EXPECT_EQ(m.to_json()["schema_version"], DatasetManifest::kSchemaVersion);
}

TEST(Split, SevenToTwo) {
  test::TempDir dir;
  SyntheticSpec spec;
  spec.count = 100;
  spec.size = 16;
  auto m = make_synthetic(spec, dir.path());
  auto s = datasets::split(m, kDefaultLabeledFraction, 1, 0.1);
  EXPECT_EQ(s.count(Split::test), 10u);
  EXPECT_EQ(s.count(Split::train_labeled), 70u);
  EXPECT_EQ(s.count(Split::train_unlabeled), 20u);
}

TEST(Split, FullySupervisedAndDeterministic) {
  test::TempDir dir;
  SyntheticSpec spec;
  spec.count = 20;
  spec.size = 16;
  auto m = make_synthetic(spec, dir.path());
  auto full = datasets::split(m, 1.0, 0, 0.1);
  EXPECT_EQ(full.count(Split::train_unlabeled), 0u);
  EXPECT_EQ(datasets::split(m, 0.3, 9), datasets::split(m, 0.3, 9));
  EXPECT_THROW(datasets::split(m, 0.0, 0), ConfigError);
}

TEST(Split, DisjointExhaustiveAndStratified) {
  test::TempDir dir;
  write_layout(dir.path(), 30);
  auto m = scan(dir.path(), Palette::identity(4));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto s = datasets::split(m, 0.15, seed, 0.2);
    EXPECT_EQ(s.count(Split::train_labeled) + s.count(Split::train_unlabeled) + s.count(Split::test), 30u);
    EXPECT_EQ(s.count(Split::train), 0u);
    std::set<int> labeled;
    for (const auto* e : s.select(Split::train_labeled)) labeled.insert(e->classes.begin(), e->classes.end());
    std::set<int> train;
    for (const auto& e : s.entries)
      if (e.split != Split::test) train.insert(e.classes.begin(), e.classes.end());
    EXPECT_EQ(labeled, train);
  }
}

TEST(Synthetic, ByteIdenticalRegeneration) {
  test::TempDir a, b;
  SyntheticSpec spec;
  spec.count = 10;
  spec.size = 64;
  spec.classes = 2;
  spec.seed = 7;
  auto ma = make_synthetic(spec, a.path()), mb = make_synthetic(spec, b.path());
  ASSERT_EQ(ma.entries.size(), 10u);
  for (std::size_t i = 0; i < ma.entries.size(); ++i) {
    EXPECT_EQ(ma.entries[i].image_hash, mb.entries[i].image_hash);
    EXPECT_EQ(ma.entries[i].mask_hash, mb.entries[i].mask_hash);
  }
}

TEST(Synthetic, ThreeClassesAndEveryClassPresent) {
  test::TempDir dir;
  SyntheticSpec spec;
  spec.count = 8;
  spec.size = 32;
  spec.classes = 3;
  spec.family = ShapeFamily::blobs;
  auto m = make_synthetic(spec, dir.path());
  std::set<int> seen;
  for (const auto& e : m.entries) {
    auto mask = load_mask(m.root / e.mask, m.palette);
    EXPECT_LE(mask.max().item<std::int64_t>(), 2);
    EXPECT_GE(mask.min().item<std::int64_t>(), 0);
    seen.insert(e.classes.begin(), e.classes.end());
  }
  EXPECT_EQ(seen, (std::set<int>{0, 1, 2}));
}

TEST(Synthetic, NoiseFreeImagesArePiecewiseConstant) {
  test::TempDir dir;
  SyntheticSpec spec;
  spec.count = 3;
  spec.size = 32;
  spec.noise = 0.0;
  auto m = make_synthetic(spec, dir.path());
  for (const auto& e : m.entries) {
    auto img = load_image(m.root / e.image);
    auto mask = load_mask(m.root / e.mask, m.palette);
    EXPECT_EQ(img.sizes(), (std::vector<std::int64_t>{3, 32, 32}));
    for (int c = 0; c < 2; ++c) {
      auto sel = mask == c;
      if (!sel.any().item<bool>()) continue;
      for (int ch = 0; ch < 3; ++ch) {
        auto v = img[ch].masked_select(sel);
        EXPECT_EQ(v.max().item<float>(), v.min().item<float>());
      }
    }
  }
}

TEST(Images, LoadRangeAndMaskRoundTrip) {
  test::TempDir dir;
  auto mask = torch::tensor({0, 1, 2, 1}, torch::kLong).reshape({2, 2});
  save_mask(dir / "m.png", mask);
  EXPECT_TRUE(torch::equal(load_mask(dir / "m.png", Palette::identity(3)), mask));
  EXPECT_THROW(load_mask(dir / "m.png", Palette::identity(2)), DataError);
  EXPECT_THROW(load_image(dir / "missing.png"), DataError);
  auto img = load_image(dir / "m.png");
  EXPECT_GE(img.min().item<float>(), 0.0f);
  EXPECT_LE(img.max().item<float>(), 1.0f);
  save_overlay(dir / "o.png", img, mask);
  EXPECT_TRUE(fs::exists(dir / "o.png"));
}

TEST(Synthetic, TintPreservesContrastWithinImage) {
  test::TempDir dir;
  SyntheticSpec spec;
  spec.count = 6;
  spec.size = 32;
  spec.noise = 0.0;
  spec.appearance_jitter = 0.0;
  spec.color_shift = 0.1;
  auto m = make_synthetic(spec, dir.path());
  std::set<float> backgrounds;
  for (const auto& e : m.entries) {
    auto img = load_image(m.root / e.image);
    auto mask = load_mask(m.root / e.mask, m.palette);
    for (int ch = 0; ch < 3; ++ch) {
      const float bg = img[ch].masked_select(mask == 0)[0].item<float>();
      const float fg = img[ch].masked_select(mask == 1)[0].item<float>();
      const double expect[3] = {0.15, 0.45, 0.40};
      EXPECT_NEAR(bg - fg, expect[ch], 1.5 / 255.0);
      if (ch == 0) backgrounds.insert(bg);
    }
  }
  EXPECT_GT(backgrounds.size(), 3u);
}
