#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace mpamatch::augment {

struct AugmentConfig {
  int input_size = 256;
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double jitter_min = 0.6;
  double jitter_max = 1.4;
  double cutmix_prob = 1.0;
  double cutmix_area_min = 0.1;
  double cutmix_area_max = 0.5;
  double cutmix_aspect_min = 0.5;
  double cutmix_aspect_max = 2.0;
  double feature_dropout = 0.5;

  void validate() const;
  nlohmann::json to_json() const;
  static AugmentConfig from_json(const nlohmann::json& j, int input_size);
};

/// Geometric part of a view; horizontal flip is its own inverse.
struct GeometricDescriptor {
  bool flipped = false;

  /// Applies the transform to any tensor whose last dimension is width.
  torch::Tensor apply(const torch::Tensor& t) const;
  torch::Tensor invert(const torch::Tensor& t) const { return apply(t); }
};

/// Bilinear resize of a [3,H,W] image to size x size, clamped to [0,1].
torch::Tensor resize_image(const torch::Tensor& image, int size);
/// Nearest-neighbour resize of a [H,W] index mask.
torch::Tensor resize_mask(const torch::Tensor& mask, int size);

struct WeakView {
  torch::Tensor image;  // [3,S,S]
  GeometricDescriptor geometry;
};

/// Resize to the configured input size, then flip with probability flip_prob.
WeakView weak_augment(const torch::Tensor& image, const AugmentConfig& config, std::uint64_t seed);

struct JitterFactors {
  bool applied = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

/// Brightness, then contrast around the mean luminance, then saturation; clamps to [0,1].
torch::Tensor color_jitter(const torch::Tensor& image, const JitterFactors& factors);

/// Axis-aligned box; empty when h or w is 0.
struct CutMixBox {
  int y0 = 0;
  int x0 = 0;
  int h = 0;
  int w = 0;

  bool empty() const { return h <= 0 || w <= 0; }
  bool contains(int y, int x) const { return !empty() && y >= y0 && y < y0 + h && x >= x0 && x < x0 + w; }
  double area_fraction(int height, int width) const {
    return empty() ? 0.0 : static_cast<double>(h) * w / (static_cast<double>(height) * width);
  }
};

/// Copy of `source` with the box region taken from `partner`. Works on any tensor whose
/// last two dimensions are (H, W): images, index masks, probability maps.
torch::Tensor apply_cutmix(const torch::Tensor& source, const torch::Tensor& partner, const CutMixBox& box);

struct StrongView {
  torch::Tensor image;
  JitterFactors jitter;
  CutMixBox box;
};

/// Color jitter of `image` followed by CutMix with `partner` (already aligned to the
/// same geometry). The box record drives label mixing through apply_cutmix.
StrongView strong_augment(const torch::Tensor& image, const torch::Tensor& partner, const AugmentConfig& config,
                          std::uint64_t seed);

/// Channel dropout on [B,C,H,W]: each (b,c) channel is zeroed with probability `rate`,
/// survivors are scaled by 1/(1-rate).
torch::Tensor feature_perturb(const torch::Tensor& features, double rate, std::uint64_t seed);

/// JSON-lines debugging record of one unlabeled sample's views.
nlohmann::json record(const WeakView& weak, const StrongView& s1, const StrongView& s2, std::uint64_t seed);

}  // namespace mpamatch::augment
