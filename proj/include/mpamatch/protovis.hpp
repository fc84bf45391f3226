#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace mpamatch::protovis {

enum class SimilarityMode : std::uint8_t { cosine = 0, dot = 1 };

SimilarityMode parse_similarity(const std::string& name);
std::string to_string(SimilarityMode mode);

/// C x K prototypes of width M.
///
/// `centroids` is the running EMA state; `prototypes` is what scoring sees. In cosine
/// mode prototypes are the unit-normalized centroids, in dot mode the two coincide.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(torch::Tensor centroids, SimilarityMode mode, double momentum);

  int num_classes() const { return static_cast<int>(centroids_.size(0)); }
  int per_class() const { return static_cast<int>(centroids_.size(1)); }
  int dim() const { return static_cast<int>(centroids_.size(2)); }
  int size() const { return num_classes() * per_class(); }
  bool defined() const { return centroids_.defined(); }

  SimilarityMode mode() const { return mode_; }
  double momentum() const { return momentum_; }

  /// [C,K,M] pre-normalization state.
  const torch::Tensor& centroids() const { return centroids_; }
  /// [C,K,M] scoring prototypes.
  const torch::Tensor& prototypes() const { return prototypes_; }
  /// [C*K, M] row-major over (class, k).
  torch::Tensor flat() const { return prototypes_.reshape({size(), dim()}); }
  /// [C,K] number of pixels ever aggregated into each prototype.
  const torch::Tensor& counts() const { return counts_; }

  /// Replaces the state of prototype (c,k) and increments its count.
  void set_centroid(int c, int k, const torch::Tensor& value, std::int64_t added);
  /// Restores aggregation counts, e.g. from a checkpoint.
  void set_counts(const torch::Tensor& counts);

  /// Squared-Euclidean clustering objective of an assignment, monitored as a diagnostic.
  double objective(const torch::Tensor& features, const torch::Tensor& flat_assignment) const;

  void save(const std::filesystem::path& path) const;
  static PrototypeBank load(const std::filesystem::path& path);

  /// Immutable copy for readers during evaluation.
  PrototypeBank snapshot() const;

 private:
  void refresh();

  torch::Tensor centroids_;
  torch::Tensor prototypes_;
  torch::Tensor counts_;
  SimilarityMode mode_ = SimilarityMode::cosine;
  double momentum_ = 0.99;
};

struct KMeansOptions {
  int iterations = 20;
  double pad_jitter = 1e-3;
};

/// Per-class k-means (k-means++ seeding) over labeled embeddings. Each entry of
/// `per_class_embeddings` is an [n_c, M] matrix. Classes with fewer than K points
/// duplicate their centroids with seeded jitter.
PrototypeBank init_prototypes(const std::vector<torch::Tensor>& per_class_embeddings, int per_class,
                              std::uint64_t seed, SimilarityMode mode = SimilarityMode::cosine,
                              double momentum = 0.99, KMeansOptions options = {});

struct AssignmentMap {
  torch::Tensor cls;    // [N] class index, -1 where invalid
  torch::Tensor local;  // [N] prototype index within class, -1 where invalid
  torch::Tensor flat;   // [N] c*K + k, -1 where invalid
  torch::Tensor valid;  // [N] bool
};

/// Scores [N, C*K]; cosine by default, zero-norm rows score 0.
torch::Tensor similarity(const torch::Tensor& features, const torch::Tensor& flat_prototypes,
                         SimilarityMode mode = SimilarityMode::cosine);
torch::Tensor similarity(const torch::Tensor& features, const PrototypeBank& bank);

/// Assigns each pixel to the most similar prototype of its class (lowest k on ties).
/// Labels < 0 mark excluded pixels.
AssignmentMap assign(const torch::Tensor& features, const torch::Tensor& labels, const torch::Tensor& flat_prototypes,
                     int per_class, SimilarityMode mode = SimilarityMode::cosine);
AssignmentMap assign(const torch::Tensor& features, const torch::Tensor& labels, const PrototypeBank& bank);

/// EMA update of every prototype that received pixels: c <- m*c + (1-m)*mean.
/// Prototypes with no assigned pixel are left untouched.
void update_bank(PrototypeBank& bank, const torch::Tensor& features, const AssignmentMap& assignment);

/// Cross-attention softmax(Q K^T / sqrt(M)) V with Q = features [N,M] and K = V = prototypes [P,M].
torch::Tensor fuse(const torch::Tensor& features, const torch::Tensor& prototypes);
/// Attention weights alone, [N,P].
torch::Tensor attention_weights(const torch::Tensor& features, const torch::Tensor& prototypes);

struct ProtoHeadOutput {
  torch::Tensor logits;         // [N,C]
  torch::Tensor probabilities;  // [N,C]
  torch::Tensor mask;           // [N] int64
};

/// 1x1 projection of [attended || similarity] to class logits.
class ProtoHeadImpl : public torch::nn::Module {
 public:
  ProtoHeadImpl(int feature_dim, int num_prototypes, int num_classes);

  ProtoHeadOutput forward(const torch::Tensor& attended, const torch::Tensor& scores);

  int num_classes() const { return num_classes_; }

 private:
  int num_classes_;
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(ProtoHead);

/// Binary foreground rule for a probability: strictly above 0.5.
torch::Tensor binarize(const torch::Tensor& foreground_probability);

}  // namespace mpamatch::protovis
