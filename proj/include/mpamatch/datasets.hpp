#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace mpamatch::datasets {

/// Mask pixel value -> class index. `other_nonzero`, when set, maps every nonzero value
/// not listed explicitly (instance-labeled masks such as GlaS).
struct Palette {
  std::map<int, int> values{{0, 0}, {1, 1}};
  std::optional<int> other_nonzero;

  int num_classes() const;
  bool covers(int value) const;
  int map(int value) const;

  nlohmann::json to_json() const;
  static Palette from_json(const nlohmann::json& j);
  static Palette identity(int num_classes);
  bool operator==(const Palette&) const = default;
};

enum class Split { train, train_labeled, train_unlabeled, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
  std::string id;     // filename stem
  std::string image;  // relative to the dataset root
  std::string mask;   // empty when the entry has no annotation
  Split split = Split::train;
  std::string image_hash;
  std::string mask_hash;
  std::vector<int> classes;  // class indices present in the mask

  bool has_mask() const { return !mask.empty(); }
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;

  std::string name;
  std::filesystem::path root;
  Palette palette;
  bool predefined_split = false;  // split.json was present
  std::vector<ManifestEntry> entries;

  std::size_t count(Split s) const;
  std::vector<const ManifestEntry*> select(Split s) const;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
  bool operator==(const DatasetManifest&) const = default;
};

/// Pairs `images/*.png` with `masks/*.png` by stem, in lexicographic order, validates
/// every mask against the palette and honors an optional `split.json`
/// (`{"train": [...], "test": [...]}`, optionally `"labeled"` / `"unlabeled"`).
DatasetManifest scan(const std::filesystem::path& root, const Palette& palette, const std::string& name = "");

/// Assigns train entries to labeled/unlabeled pools (labeled share = labeled_fraction of
/// the training entries) so every class occurs in the labeled pool. Without a predefined
/// split, `test_fraction` of the annotated entries is held out first.
DatasetManifest split(const DatasetManifest& manifest, double labeled_fraction, std::uint64_t seed,
                      double test_fraction = 0.1);

/// Default labeled share inside the training set: 7 labeled to 2 unlabeled.
inline constexpr double kDefaultLabeledFraction = 7.0 / 9.0;

enum class ShapeFamily { ellipses, blobs };

struct SyntheticSpec {
  int count = 10;
  int size = 64;
  int classes = 2;
  ShapeFamily family = ShapeFamily::ellipses;
  double noise = 0.05;
  double appearance_jitter = 0.1;  // per-image color shift amplitude
  double illumination = 0.0;       // per-image gain exp(U(-a, a)) on every color
  double color_shift = 0.0;        // per-image tint U(-a, a) per channel, shared by all classes
  std::uint64_t seed = 7;
  std::string name = "synthetic";
};

/// Writes images/, masks/ and manifest.json under `out`, returning the manifest.
DatasetManifest make_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out);

/// [3,H,W] float RGB in [0,1].
torch::Tensor load_image(const std::filesystem::path& path);
/// [H,W] int64 class indices after palette mapping.
torch::Tensor load_mask(const std::filesystem::path& path, const Palette& palette);
/// Writes an index mask as an 8-bit PNG.
void save_mask(const std::filesystem::path& path, const torch::Tensor& mask);
/// Writes an RGB image blended with a colored mask overlay.
void save_overlay(const std::filesystem::path& path, const torch::Tensor& image, const torch::Tensor& mask);

}  // namespace mpamatch::datasets
