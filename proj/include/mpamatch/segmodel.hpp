#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/script.h>
#include <torch/torch.h>

namespace mpamatch::segmodel {

enum class EncoderVariant { stand_in, external_adapter };

EncoderVariant parse_encoder_variant(const std::string& name);
std::string to_string(EncoderVariant v);

/// Patch-token encoder geometry. Images are square, `input_size` pixels per side.
struct EncoderSpec {
  int input_size = 256;
  int patch_size = 16;
  int token_dim = 1024;
  EncoderVariant variant = EncoderVariant::stand_in;
  std::string weights_path;  // external adapter only
  int depth = 2;             // stand-in transformer layers
  int heads = 4;

  int grid_side() const { return input_size / patch_size; }
  int token_count() const { return grid_side() * grid_side(); }
  /// Throws ConfigError when the geometry is inconsistent.
  void validate() const;
};

struct DecoderSpec {
  int reduced_dim = 512;
  std::vector<int> block_channels{256, 128, 64, 16};
  int num_classes = 2;

  void validate() const;
};

/// Dense [B, M, H, W] grid. Spatial order is row-major over (h, w).
class FeatureMap {
 public:
  FeatureMap() = default;
  explicit FeatureMap(torch::Tensor values);

  const torch::Tensor& values() const { return values_; }
  std::int64_t batch() const { return values_.size(0); }
  std::int64_t channels() const { return values_.size(1); }
  std::int64_t height() const { return values_.size(2); }
  std::int64_t width() const { return values_.size(3); }

  /// [B*H*W, M], pixels in row-major order per image.
  torch::Tensor pixels() const;
  bool finite() const;

 private:
  torch::Tensor values_;
};

/// Common interface of patch encoders: [B,3,S,S] images in [0,1] -> [B,T,D] tokens
/// in row-major patch order.
class PatchEncoder : public torch::nn::Module {
 public:
  explicit PatchEncoder(EncoderSpec spec) : spec_(std::move(spec)) {}
  virtual torch::Tensor forward(const torch::Tensor& images) = 0;
  const EncoderSpec& spec() const { return spec_; }

 protected:
  EncoderSpec spec_;
};

/// Small randomly initialized patch-embedding transformer.
class StandInEncoder final : public PatchEncoder {
 public:
  explicit StandInEncoder(const EncoderSpec& spec);
  torch::Tensor forward(const torch::Tensor& images) override;

 private:
  torch::nn::Conv2d patch_embed_{nullptr};
  torch::Tensor pos_embed_;
  torch::nn::ModuleList layers_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
};

/// Frozen TorchScript encoder loaded from `weights_path`. Leading non-patch tokens
/// (class / register tokens) are dropped so exactly T tokens remain.
class ExternalAdapterEncoder final : public PatchEncoder {
 public:
  explicit ExternalAdapterEncoder(const EncoderSpec& spec);
  torch::Tensor forward(const torch::Tensor& images) override;

 private:
  torch::jit::Module module_;
};

std::shared_ptr<PatchEncoder> make_encoder(const EncoderSpec& spec);

/// Validates geometry and range, then runs the encoder.
torch::Tensor encode(PatchEncoder& encoder, const torch::Tensor& images);

/// [B,T,D] -> [B,D,sqrt(T),sqrt(T)]; token t lands at (t / side, t % side).
FeatureMap tokens_to_grid(const torch::Tensor& tokens);
/// Inverse of tokens_to_grid.
torch::Tensor grid_to_tokens(const FeatureMap& grid);

/// Bilinear x2, then two (3x3 conv, group norm, ReLU) stages.
class UpBlockImpl : public torch::nn::Module {
 public:
  UpBlockImpl(int in_channels, int out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(UpBlock);

struct DecoderOutput {
  FeatureMap features;   // [B, block_channels.back(), S, S]
  torch::Tensor logits;  // [B, C, S, S]
};

class DecoderImpl : public torch::nn::Module {
 public:
  DecoderImpl(int in_channels, DecoderSpec spec);
  DecoderOutput forward(const FeatureMap& grid, std::int64_t out_size);

  const DecoderSpec& spec() const { return spec_; }
  int in_channels() const { return in_channels_; }

 private:
  int in_channels_;
  DecoderSpec spec_;
  torch::nn::Sequential reduce_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(Decoder);

struct ModelSpec {
  EncoderSpec encoder;
  DecoderSpec decoder;
  int embed_dim = 64;  // M, width of pixel embeddings used for prototypes
  std::uint64_t seed = 0;
};

struct SegmentationOutput {
  FeatureMap features;      // final decoder map
  torch::Tensor logits;     // [B,C,S,S]
  torch::Tensor embeddings; // [B,M,S,S], linear projection of features
};

/// Optional transform of the token grid before decoding (feature perturbation).
using GridTransform = std::function<torch::Tensor(const torch::Tensor&)>;

class SegmentationModelImpl : public torch::nn::Module {
 public:
  explicit SegmentationModelImpl(ModelSpec spec);

  SegmentationOutput forward(const torch::Tensor& images);
  FeatureMap encode_grid(const torch::Tensor& images);
  SegmentationOutput decode(const FeatureMap& grid, const GridTransform& perturb = nullptr);

  const ModelSpec& spec() const { return spec_; }
  PatchEncoder& encoder() { return *encoder_; }
  Decoder& decoder() { return decoder_; }

 private:
  ModelSpec spec_;
  std::shared_ptr<PatchEncoder> encoder_;
  Decoder decoder_{nullptr};
  torch::nn::Conv2d embed_{nullptr};
};
TORCH_MODULE(SegmentationModel);

/// Truncated-normal(0.02) weights and zero biases for every projection of `module`;
/// spatial decoder kernels get U(+-1/sqrt(fan_in)). Drawn from a generator seeded with `seed`.
void initialize_parameters(torch::nn::Module& module, std::uint64_t seed);

}  // namespace mpamatch::segmodel
