#include "mpamatch/augment.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mpamatch/errors.hpp"
#include "mpamatch/random.hpp"

namespace mpamatch::augment {

namespace F = torch::nn::functional;

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment.") + name + " must lie in [0,1]");
  };
  prob(flip_prob, "flip_prob");
  prob(jitter_prob, "jitter_prob");
  prob(cutmix_prob, "cutmix_prob");
  if (!(feature_dropout >= 0.0 && feature_dropout < 1.0)) throw ConfigError("augment.feature_dropout must lie in [0,1)");
  if (!(jitter_min > 0.0 && jitter_min <= jitter_max)) throw ConfigError("augment jitter range is invalid");
  if (!(cutmix_area_min >= 0.0 && cutmix_area_min <= cutmix_area_max && cutmix_area_max <= 1.0))
    throw ConfigError("augment CutMix area range is invalid");
  if (!(cutmix_aspect_min > 0.0 && cutmix_aspect_min <= cutmix_aspect_max))
    throw ConfigError("augment CutMix aspect range is invalid");
  if (input_size < 1) throw ConfigError("augment input size must be positive");
}

nlohmann::json AugmentConfig::to_json() const {
  return {{"flip_prob", flip_prob},
          {"jitter_prob", jitter_prob},
          {"jitter_min", jitter_min},
          {"jitter_max", jitter_max},
          {"cutmix_prob", cutmix_prob},
          {"cutmix_area_min", cutmix_area_min},
          {"cutmix_area_max", cutmix_area_max},
          {"cutmix_aspect_min", cutmix_aspect_min},
          {"cutmix_aspect_max", cutmix_aspect_max},
          {"feature_dropout", feature_dropout}};
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j, int input_size) {
  AugmentConfig c;
  c.input_size = input_size;
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  c.jitter_prob = j.value("jitter_prob", c.jitter_prob);
  c.jitter_min = j.value("jitter_min", c.jitter_min);
  c.jitter_max = j.value("jitter_max", c.jitter_max);
  c.cutmix_prob = j.value("cutmix_prob", c.cutmix_prob);
  c.cutmix_area_min = j.value("cutmix_area_min", c.cutmix_area_min);
  c.cutmix_area_max = j.value("cutmix_area_max", c.cutmix_area_max);
  c.cutmix_aspect_min = j.value("cutmix_aspect_min", c.cutmix_aspect_min);
  c.cutmix_aspect_max = j.value("cutmix_aspect_max", c.cutmix_aspect_max);
  c.feature_dropout = j.value("feature_dropout", c.feature_dropout);
  c.validate();
  return c;
}

torch::Tensor GeometricDescriptor::apply(const torch::Tensor& t) const {
  return flipped ? t.flip({-1}) : t;
}

torch::Tensor resize_image(const torch::Tensor& image, int size) {
  if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("resize_image: expected [3,H,W]");
  if (image.size(1) == size && image.size(2) == size) return image;
  auto out = F::interpolate(image.unsqueeze(0), F::InterpolateFuncOptions()
                                                    .size(std::vector<std::int64_t>{size, size})
                                                    .mode(torch::kBilinear)
                                                    .align_corners(false));
  return out.squeeze(0).clamp(0.0, 1.0);
}

torch::Tensor resize_mask(const torch::Tensor& mask, int size) {
  if (mask.dim() != 2) throw ShapeError("resize_mask: expected [H,W]");
  if (mask.size(0) == size && mask.size(1) == size) return mask;
  auto as_float = mask.to(torch::kFloat).unsqueeze(0).unsqueeze(0);
  auto out = F::interpolate(
      as_float, F::InterpolateFuncOptions().size(std::vector<std::int64_t>{size, size}).mode(torch::kNearest));
  return out.squeeze(0).squeeze(0).round().to(mask.scalar_type());
}

WeakView weak_augment(const torch::Tensor& image, const AugmentConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution flip(config.flip_prob);
  WeakView view;
  view.geometry.flipped = flip(rng);
  view.image = view.geometry.apply(resize_image(image, config.input_size)).contiguous();
  return view;
}

torch::Tensor color_jitter(const torch::Tensor& image, const JitterFactors& f) {
  if (!f.applied) return image;
  auto x = (image * f.brightness).clamp(0.0, 1.0);
  auto luminance = [](const torch::Tensor& t) { return 0.299 * t[0] + 0.587 * t[1] + 0.114 * t[2]; };
  auto mean = luminance(x).mean();
  x = ((x - mean) * f.contrast + mean).clamp(0.0, 1.0);
  auto gray = luminance(x).unsqueeze(0);
  x = ((x - gray) * f.saturation + gray).clamp(0.0, 1.0);
  return x;
}

torch::Tensor apply_cutmix(const torch::Tensor& source, const torch::Tensor& partner, const CutMixBox& box) {
  if (source.sizes() != partner.sizes()) throw ShapeError("apply_cutmix: source and partner differ in shape");
  if (box.empty()) return source.clone();
  const auto H = source.size(-2), W = source.size(-1);
  if (box.y0 < 0 || box.x0 < 0 || box.y0 + box.h > H || box.x0 + box.w > W)
    throw ValidationError("apply_cutmix: box exceeds the image");
  auto out = source.clone();
  using torch::indexing::Slice;
  using torch::indexing::Ellipsis;
  auto region = std::vector<torch::indexing::TensorIndex>{Ellipsis, Slice(box.y0, box.y0 + box.h),
                                                          Slice(box.x0, box.x0 + box.w)};
  out.index_put_(region, partner.index(region));
  return out;
}

StrongView strong_augment(const torch::Tensor& image, const torch::Tensor& partner, const AugmentConfig& config,
                          std::uint64_t seed) {
  if (image.dim() != 3 || image.sizes() != partner.sizes()) throw ShapeError("strong_augment: mismatched views");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto factor = [&] { return config.jitter_min + (config.jitter_max - config.jitter_min) * unit(rng); };

  StrongView view;
  view.jitter.applied = unit(rng) < config.jitter_prob;
  // factors are drawn either way so the box draw does not depend on the jitter coin
  view.jitter.brightness = factor();
  view.jitter.contrast = factor();
  view.jitter.saturation = factor();
  if (!view.jitter.applied) view.jitter = JitterFactors{};

  const int H = static_cast<int>(image.size(1)), W = static_cast<int>(image.size(2));
  const bool mix = unit(rng) < config.cutmix_prob;
  const double area = config.cutmix_area_min + (config.cutmix_area_max - config.cutmix_area_min) * unit(rng);
  const double log_lo = std::log(config.cutmix_aspect_min), log_hi = std::log(config.cutmix_aspect_max);
  const double aspect = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
  const double pixels = area * H * W;
  int h = std::clamp(static_cast<int>(std::lround(std::sqrt(pixels * aspect))), 0, H);
  int w = std::clamp(static_cast<int>(std::lround(std::sqrt(pixels / aspect))), 0, W);
  const int y0 = static_cast<int>(unit(rng) * (H - h + 1));
  const int x0 = static_cast<int>(unit(rng) * (W - w + 1));
  if (mix) view.box = CutMixBox{std::min(y0, H - h), std::min(x0, W - w), h, w};

  view.image = apply_cutmix(color_jitter(image, view.jitter), partner, view.box);
  return view;
}

torch::Tensor feature_perturb(const torch::Tensor& features, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("feature_perturb: rate must lie in [0,1)");
  if (features.dim() < 2) throw ShapeError("feature_perturb: expected [B,C,...]");
  if (rate == 0.0) return features;
  auto gen = make_generator(seed);
  std::vector<std::int64_t> shape{features.size(0), features.size(1)};
  for (int d = 2; d < features.dim(); ++d) shape.push_back(1);
  auto keep = torch::empty(shape, features.options().requires_grad(false)).bernoulli_(1.0 - rate, gen);
  return features * keep / (1.0 - rate);
}

nlohmann::json record(const WeakView& weak, const StrongView& s1, const StrongView& s2, std::uint64_t seed) {
  auto strong = [](const StrongView& s) {
    return nlohmann::json{{"jitter", {{"applied", s.jitter.applied},
                                      {"brightness", s.jitter.brightness},
                                      {"contrast", s.jitter.contrast},
                                      {"saturation", s.jitter.saturation}}},
                          {"box", {s.box.y0, s.box.x0, s.box.h, s.box.w}}};
  };
  return {{"seed", seed}, {"flipped", weak.geometry.flipped}, {"s1", strong(s1)}, {"s2", strong(s2)}};
}

}  // namespace mpamatch::augment
