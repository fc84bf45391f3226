#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mpamatch/protovis.hpp"

namespace mpamatch::prototext {

enum class Provenance { p_nonsim, p_siml, p_simld, t_nonsim, custom };

/// Maps a prompt directory tag ("P-nonsim", "P-simL", "P-simLD", "T-nonsim") to its
/// provenance; anything else is `custom`.
Provenance provenance_from_tag(const std::string& tag);
std::string to_string(Provenance p);

/// K descriptions of one class, read from `<root>/<tag>/<class_name>.txt`.
struct ClassPromptSet {
  std::string class_name;
  std::vector<std::string> descriptions;
  std::string tag;
  Provenance provenance = Provenance::custom;
  std::string content_hash;  // SHA-256 of the file bytes, hex
};

/// Reads one file per class; each must hold exactly `per_class` non-empty lines.
std::vector<ClassPromptSet> load_prompt_sets(const std::filesystem::path& root, const std::string& tag,
                                             const std::vector<std::string>& class_names, int per_class);

/// Run-metadata record: tag, K and per-file hashes.
nlohmann::json prompt_metadata(const std::vector<ClassPromptSet>& sets);

/// Text-encoder adapter.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual int dim() const = 0;
  /// Raw embedding of one string (not necessarily normalized).
  virtual torch::Tensor embed(const std::string& text) const = 0;
};

/// Reproducible stand-in: a unit vector drawn from a generator seeded by
/// SHA-256(seed, text).
class StubTextEncoder final : public TextEncoder {
 public:
  StubTextEncoder(int dim, std::uint64_t seed);
  int dim() const override { return dim_; }
  torch::Tensor embed(const std::string& text) const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

/// Adapter over embeddings exported offline by an external vision-language text
/// encoder: JSON `{"dim": d, "embeddings": {"<text>": [..d floats..], ...}}`.
class TableTextEncoder final : public TextEncoder {
 public:
  explicit TableTextEncoder(const std::filesystem::path& path);
  int dim() const override { return dim_; }
  torch::Tensor embed(const std::string& text) const override;

 private:
  int dim_ = 0;
  std::map<std::string, std::vector<double>> table_;
};

/// Unit-normalized description embeddings, [C,K,d].
torch::Tensor embed_descriptions(const std::vector<ClassPromptSet>& prompts, const TextEncoder& encoder);

/// Elementwise mean over [e, p_1..p_L]: base [C,K,d], tokens [C,K,L,d] -> [C,K,d].
torch::Tensor fuse_tokens(const torch::Tensor& base, const torch::Tensor& tokens);

/// Maps fused text prototypes [C,K,d] into the visual space with a d->M linear map,
/// normalizing rows in cosine mode.
torch::Tensor project_text(const torch::Tensor& fused, torch::nn::Linear& projection, protovis::SimilarityMode mode);

struct TextPrototypeOptions {
  int tokens = 1;  // L
  int visual_dim = 64;
  bool train_base = false;
  double token_std = 0.02;
  std::uint64_t seed = 0;
  protovis::SimilarityMode mode = protovis::SimilarityMode::cosine;
};

/// Base embeddings, cooperative tokens and the d->M projection.
class TextPrototypesImpl : public torch::nn::Module {
 public:
  TextPrototypesImpl(torch::Tensor base_embeddings, TextPrototypeOptions options);

  /// Fused [C,K,d] tensor.
  torch::Tensor fused() const;
  /// Projected prototype bank [C,K,M].
  torch::Tensor forward();
  /// Projected bank flattened to [C*K, M].
  torch::Tensor flat() { return forward().reshape({-1, options_.visual_dim}); }

  int num_classes() const { return static_cast<int>(base_.size(0)); }
  int per_class() const { return static_cast<int>(base_.size(1)); }
  int text_dim() const { return static_cast<int>(base_.size(2)); }
  const TextPrototypeOptions& options() const { return options_; }

  torch::Tensor& tokens() { return tokens_; }
  torch::Tensor& base() { return base_; }
  torch::nn::Linear& projection() { return projection_; }

 private:
  TextPrototypeOptions options_;
  torch::Tensor base_;
  torch::Tensor tokens_;
  torch::nn::Linear projection_{nullptr};
};
TORCH_MODULE(TextPrototypes);

}  // namespace mpamatch::prototext
