#include "mpamatch/segmodel.hpp"

#include <cmath>
#include <filesystem>

#include "mpamatch/errors.hpp"
#include "mpamatch/random.hpp"

namespace mpamatch::segmodel {

namespace F = torch::nn::functional;
namespace nn = torch::nn;

namespace {

int norm_groups(int channels) {
  for (int g = std::min(channels, 8); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

EncoderVariant parse_encoder_variant(const std::string& name) {
  if (name == "stand_in") return EncoderVariant::stand_in;
  if (name == "external_adapter") return EncoderVariant::external_adapter;
  throw ConfigError("unknown encoder variant '" + name + "'");
}

std::string to_string(EncoderVariant v) { return v == EncoderVariant::stand_in ? "stand_in" : "external_adapter"; }

void EncoderSpec::validate() const {
  if (input_size < 1 || patch_size < 1) throw ConfigError("encoder input and patch size must be positive");
  if (input_size % patch_size != 0) throw ConfigError("encoder input_size must be divisible by patch_size");
  if (token_dim < 8) throw ConfigError("encoder token_dim must be >= 8");
  if (variant == EncoderVariant::stand_in) {
    if (depth < 0) throw ConfigError("stand-in encoder depth must be >= 0");
    if (heads < 1 || token_dim % heads != 0) throw ConfigError("stand-in encoder heads must divide token_dim");
  }
}

void DecoderSpec::validate() const {
  if (reduced_dim < 1) throw ConfigError("decoder reduced_dim must be positive");
  if (block_channels.empty()) throw ConfigError("decoder needs at least one upsampling block");
  for (std::size_t i = 0; i < block_channels.size(); ++i) {
    if (block_channels[i] < 1) throw ConfigError("decoder block channels must be positive");
    if (i > 0 && block_channels[i] >= block_channels[i - 1])
      throw ConfigError("decoder block_channels must be strictly decreasing");
  }
  if (num_classes < 2) throw ConfigError("decoder needs at least two classes");
}

FeatureMap::FeatureMap(torch::Tensor values) : values_(std::move(values)) {
  if (values_.dim() != 4) throw ShapeError("feature map must be [B, M, H, W]");
}

torch::Tensor FeatureMap::pixels() const { return values_.permute({0, 2, 3, 1}).reshape({-1, channels()}); }

bool FeatureMap::finite() const { return torch::isfinite(values_).all().item<bool>(); }

StandInEncoder::StandInEncoder(const EncoderSpec& spec) : PatchEncoder(spec) {
  spec.validate();
  patch_embed_ = register_module(
      "patch_embed", nn::Conv2d(nn::Conv2dOptions(3, spec.token_dim, spec.patch_size).stride(spec.patch_size)));
  pos_embed_ = register_parameter("pos_embed", torch::zeros({1, spec.token_count(), spec.token_dim}));
  layers_ = register_module("layers", nn::ModuleList());
  for (int i = 0; i < spec.depth; ++i) {
    layers_->push_back(nn::TransformerEncoderLayer(
        nn::TransformerEncoderLayerOptions(spec.token_dim, spec.heads).dim_feedforward(2 * spec.token_dim).dropout(0.0)));
  }
  norm_ = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({spec.token_dim})));
}

torch::Tensor StandInEncoder::forward(const torch::Tensor& images) {
  auto x = patch_embed_->forward(images).flatten(2).transpose(1, 2) + pos_embed_;  // [B,T,D]
  x = x.transpose(0, 1);  // layers are sequence-first
  for (const auto& layer : *layers_) x = layer->as<nn::TransformerEncoderLayer>()->forward(x);
  return norm_->forward(x.transpose(0, 1));
}

ExternalAdapterEncoder::ExternalAdapterEncoder(const EncoderSpec& spec) : PatchEncoder(spec) {
  spec.validate();
  if (spec.weights_path.empty() || !std::filesystem::exists(spec.weights_path))
    throw ConfigError("external encoder weights not found: '" + spec.weights_path + "'");
  try {
    module_ = torch::jit::load(spec.weights_path);
  } catch (const c10::Error& e) {
    throw ConfigError("cannot load external encoder '" + spec.weights_path + "': " + e.what_without_backtrace());
  }
  module_.eval();
}

torch::Tensor ExternalAdapterEncoder::forward(const torch::Tensor& images) {
  auto out = module_.forward({images}).toTensor();
  if (out.dim() != 3 || out.size(0) != images.size(0) || out.size(2) != spec_.token_dim)
    throw ShapeError("external encoder must emit [B, T, token_dim] tokens");
  const auto extra = out.size(1) - spec_.token_count();
  if (extra < 0) throw ShapeError("external encoder emitted fewer tokens than patches");
  return out.narrow(1, extra, spec_.token_count());
}

std::shared_ptr<PatchEncoder> make_encoder(const EncoderSpec& spec) {
  if (spec.variant == EncoderVariant::stand_in) return std::make_shared<StandInEncoder>(spec);
  return std::make_shared<ExternalAdapterEncoder>(spec);
}

torch::Tensor encode(PatchEncoder& encoder, const torch::Tensor& images) {
  const auto& spec = encoder.spec();
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != spec.input_size ||
      images.size(3) != spec.input_size)
    throw ShapeError("encode: expected images [B, 3, " + std::to_string(spec.input_size) + ", " +
                     std::to_string(spec.input_size) + "]");
  if (!torch::isfinite(images).all().item<bool>()) throw ValidationError("encode: non-finite pixel values");
  if (images.numel() > 0 && (images.min().item<double>() < 0.0 || images.max().item<double>() > 1.0))
    throw ValidationError("encode: pixel values must lie in [0,1]");
  auto tokens = encoder.forward(images);
  if (tokens.size(1) != spec.token_count() || tokens.size(2) != spec.token_dim)
    throw ShapeError("encode: encoder emitted tokens of unexpected shape");
  return tokens;
}

FeatureMap tokens_to_grid(const torch::Tensor& tokens) {
  if (tokens.dim() != 3) throw ShapeError("tokens_to_grid: expected [B, T, D]");
  const auto T = tokens.size(1);
  const auto side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(T))));
  if (side * side != T) throw ShapeError("tokens_to_grid: token count " + std::to_string(T) + " is not a perfect square");
  return FeatureMap(tokens.reshape({tokens.size(0), side, side, tokens.size(2)}).permute({0, 3, 1, 2}).contiguous());
}

torch::Tensor grid_to_tokens(const FeatureMap& grid) {
  const auto& v = grid.values();
  return v.permute({0, 2, 3, 1}).reshape({v.size(0), v.size(2) * v.size(3), v.size(1)});
}

UpBlockImpl::UpBlockImpl(int in_channels, int out_channels) {
  body_ = register_module(
      "body", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)),
                             nn::GroupNorm(nn::GroupNormOptions(norm_groups(out_channels), out_channels)),
                             nn::ReLU(),
                             nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)),
                             nn::GroupNorm(nn::GroupNormOptions(norm_groups(out_channels), out_channels)),
                             nn::ReLU()));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x) {
  auto up = F::interpolate(
      x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kBilinear).align_corners(false));
  return body_->forward(up);
}

DecoderImpl::DecoderImpl(int in_channels, DecoderSpec spec) : in_channels_(in_channels), spec_(std::move(spec)) {
  spec_.validate();
  reduce_ = register_module(
      "reduce", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, spec_.reduced_dim, 3).padding(1)),
                               nn::GroupNorm(nn::GroupNormOptions(norm_groups(spec_.reduced_dim), spec_.reduced_dim)),
                               nn::ReLU()));
  blocks_ = register_module("blocks", nn::ModuleList());
  int prev = spec_.reduced_dim;
  for (int ch : spec_.block_channels) {
    blocks_->push_back(UpBlock(prev, ch));
    prev = ch;
  }
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(prev, spec_.num_classes, 1)));
}

DecoderOutput DecoderImpl::forward(const FeatureMap& grid, std::int64_t out_size) {
  if (grid.channels() != in_channels_)
    throw ShapeError("decode: grid has " + std::to_string(grid.channels()) + " channels, decoder expects " +
                     std::to_string(in_channels_));
  auto x = reduce_->forward(grid.values());
  for (const auto& block : *blocks_) x = block->as<UpBlock>()->forward(x);
  if (x.size(2) != out_size || x.size(3) != out_size) {
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{out_size, out_size})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  }
  return {FeatureMap(x), head_->forward(x)};
}

SegmentationModelImpl::SegmentationModelImpl(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.encoder.validate();
  spec_.decoder.validate();
  if (spec_.embed_dim < 1) throw ConfigError("embedding dimension must be positive");
  encoder_ = register_module("encoder", make_encoder(spec_.encoder));
  decoder_ = register_module("decoder", Decoder(spec_.encoder.token_dim, spec_.decoder));
  embed_ = register_module("embed",
                           nn::Conv2d(nn::Conv2dOptions(spec_.decoder.block_channels.back(), spec_.embed_dim, 1)));
  initialize_parameters(*this, spec_.seed);
}

FeatureMap SegmentationModelImpl::encode_grid(const torch::Tensor& images) {
  return tokens_to_grid(encode(*encoder_, images));
}

SegmentationOutput SegmentationModelImpl::decode(const FeatureMap& grid, const GridTransform& perturb) {
  auto input = perturb ? FeatureMap(perturb(grid.values())) : grid;
  auto out = decoder_->forward(input, spec_.encoder.input_size);
  auto embeddings = embed_->forward(out.features.values());
  return {out.features, out.logits, embeddings};
}

SegmentationOutput SegmentationModelImpl::forward(const torch::Tensor& images) { return decode(encode_grid(images)); }

void initialize_parameters(torch::nn::Module& module, std::uint64_t seed) {
  auto gen = make_generator(derive_seed(seed, {0x1417}));
  torch::NoGradGuard no_grad;
  for (auto& item : module.named_parameters()) {
    auto& p = item.value();
    if (ends_with(item.key(), "bias")) {
      p.zero_();
    } else if (p.dim() == 4 && p.size(2) > 1 && item.key().rfind("decoder.", 0) == 0) {
      // spatial decoder kernels keep the usual fan-in uniform scale
      const double bound = 1.0 / std::sqrt(static_cast<double>(p[0].numel()));
      p.uniform_(-bound, bound, gen);
    } else if (p.dim() >= 2) {
      trunc_normal_(p, 0.02, gen);
    }
  }
}

}  // namespace mpamatch::segmodel
