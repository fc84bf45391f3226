#include "mpamatch/protovis.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "mpamatch/errors.hpp"

namespace mpamatch::protovis {

namespace {

constexpr std::array<char, 8> kBankMagic = {'M', 'P', 'A', 'P', 'B', 'N', 'K', '\0'};
constexpr std::uint32_t kBankVersion = 1;

torch::Tensor as_double(const torch::Tensor& t) { return t.detach().to(torch::kDouble).contiguous(); }

void require_matrix(const torch::Tensor& t, const char* what) {
  if (t.dim() != 2) throw ShapeError(std::string(what) + ": expected an N x M matrix");
}

// Lloyd iterations from k-means++ seeds. `points` is [n, M] double, n >= k >= 1.
torch::Tensor kmeans(const torch::Tensor& points, int k, std::mt19937_64& rng, int iterations) {
  const auto n = points.size(0);
  auto centers = torch::empty({k, points.size(1)}, points.options());
  auto d2 = torch::full({n}, std::numeric_limits<double>::infinity(), points.options());

  std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
  centers[0] = points[pick(rng)];
  for (int c = 1; c < k; ++c) {
    d2 = torch::minimum(d2, (points - centers[c - 1]).pow(2).sum(1));
    const double total = d2.sum().item<double>();
    std::int64_t chosen = 0;
    if (total <= 0.0) {
      chosen = pick(rng);
    } else {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0.0;
      auto acc_d2 = d2.accessor<double, 1>();
      chosen = n - 1;
      for (std::int64_t i = 0; i < n; ++i) {
        acc += acc_d2[i];
        if (acc >= target && acc_d2[i] > 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centers[c] = points[chosen];
  }

  for (int it = 0; it < iterations; ++it) {
    auto dist = (points.unsqueeze(1) - centers.unsqueeze(0)).pow(2).sum(2);
    auto label = std::get<1>(dist.min(1));
    auto sums = torch::zeros_like(centers).index_add_(0, label, points);
    auto count = torch::bincount(label, {}, k).to(torch::kDouble);
    auto filled = count > 0;
    auto updated = sums / count.clamp_min(1.0).unsqueeze(1);
    // empty clusters keep their previous center
    auto next = torch::where(filled.unsqueeze(1), updated, centers);
    if (torch::equal(next, centers)) break;
    centers = next;
  }
  return centers;
}

}  // namespace

SimilarityMode parse_similarity(const std::string& name) {
  if (name == "cosine") return SimilarityMode::cosine;
  if (name == "dot") return SimilarityMode::dot;
  throw ConfigError("unknown similarity mode '" + name + "' (expected cosine or dot)");
}

std::string to_string(SimilarityMode mode) { return mode == SimilarityMode::cosine ? "cosine" : "dot"; }

PrototypeBank::PrototypeBank(torch::Tensor centroids, SimilarityMode mode, double momentum)
    : centroids_(as_double(centroids)), mode_(mode), momentum_(momentum) {
  if (centroids_.dim() != 3) throw ShapeError("prototype bank expects a C x K x M tensor");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("bank momentum must lie in [0,1)");
  if (!torch::isfinite(centroids_).all().item<bool>()) throw ValidationError("prototype bank has non-finite entries");
  counts_ = torch::zeros({centroids_.size(0), centroids_.size(1)}, torch::kLong);
  refresh();
}

void PrototypeBank::set_counts(const torch::Tensor& counts) {
  if (counts.dim() != 2 || counts.size(0) != num_classes() || counts.size(1) != per_class())
    throw ShapeError("prototype bank counts must be C x K");
  counts_ = counts.to(torch::kLong).clone();
}

void PrototypeBank::refresh() {
  if (mode_ == SimilarityMode::cosine) {
    prototypes_ = torch::nn::functional::normalize(centroids_, torch::nn::functional::NormalizeFuncOptions().dim(2));
  } else {
    prototypes_ = centroids_.clone();
  }
}

void PrototypeBank::set_centroid(int c, int k, const torch::Tensor& value, std::int64_t added) {
  centroids_[c][k] = as_double(value);
  counts_[c][k] += added;
  refresh();
}

double PrototypeBank::objective(const torch::Tensor& features, const torch::Tensor& flat_assignment) const {
  require_matrix(features, "objective");
  auto valid = flat_assignment >= 0;
  auto x = as_double(features).index({valid});
  auto mu = centroids_.reshape({size(), dim()}).index_select(0, flat_assignment.index({valid}));
  return (x - mu).pow(2).sum().item<double>();
}

PrototypeBank PrototypeBank::snapshot() const {
  PrototypeBank copy;
  copy.centroids_ = centroids_.clone();
  copy.prototypes_ = prototypes_.clone();
  copy.counts_ = counts_.clone();
  copy.mode_ = mode_;
  copy.momentum_ = momentum_;
  return copy;
}

void PrototypeBank::save(const std::filesystem::path& path) const {
  if (!defined()) throw ValidationError("cannot save an empty prototype bank");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write prototype bank to " + path.string());
  const std::uint32_t dims[] = {static_cast<std::uint32_t>(num_classes()), static_cast<std::uint32_t>(per_class()),
                                static_cast<std::uint32_t>(dim())};
  const auto mode = static_cast<std::uint8_t>(mode_);
  out.write(kBankMagic.data(), kBankMagic.size());
  out.write(reinterpret_cast<const char*>(&kBankVersion), sizeof kBankVersion);
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  out.write(reinterpret_cast<const char*>(&mode), sizeof mode);
  out.write(reinterpret_cast<const char*>(&momentum_), sizeof momentum_);
  auto c = centroids_.contiguous();
  out.write(reinterpret_cast<const char*>(c.data_ptr<double>()), c.numel() * sizeof(double));
  auto n = counts_.contiguous();
  out.write(reinterpret_cast<const char*>(n.data_ptr<std::int64_t>()), n.numel() * sizeof(std::int64_t));
  if (!out) throw DataError("failed writing prototype bank to " + path.string());
}

PrototypeBank PrototypeBank::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open prototype bank " + path.string());
  std::array<char, 8> magic{};
  std::uint32_t version = 0;
  std::uint32_t dims[3] = {0, 0, 0};
  std::uint8_t mode = 0;
  double momentum = 0.0;
  in.read(magic.data(), magic.size());
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || magic != kBankMagic) throw DataError(path.string() + " is not a prototype bank file");
  if (version != kBankVersion) throw DataError("unsupported prototype bank version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(dims), sizeof dims);
  in.read(reinterpret_cast<char*>(&mode), sizeof mode);
  in.read(reinterpret_cast<char*>(&momentum), sizeof momentum);
  if (mode > 1) throw DataError("prototype bank has unknown similarity mode");
  auto centroids = torch::empty({dims[0], dims[1], dims[2]}, torch::kDouble);
  in.read(reinterpret_cast<char*>(centroids.data_ptr<double>()), centroids.numel() * sizeof(double));
  auto counts = torch::empty({dims[0], dims[1]}, torch::kLong);
  in.read(reinterpret_cast<char*>(counts.data_ptr<std::int64_t>()), counts.numel() * sizeof(std::int64_t));
  if (!in) throw DataError("truncated prototype bank file " + path.string());
  PrototypeBank bank(centroids, static_cast<SimilarityMode>(mode), momentum);
  bank.counts_ = counts;
  return bank;
}

PrototypeBank init_prototypes(const std::vector<torch::Tensor>& per_class_embeddings, int per_class,
                              std::uint64_t seed, SimilarityMode mode, double momentum, KMeansOptions options) {
  if (per_class < 1) throw ValidationError("prototype count per class must be >= 1");
  if (per_class_embeddings.empty()) throw ValidationError("init_prototypes needs at least one class");
  const auto M = per_class_embeddings.front().size(-1);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, options.pad_jitter);

  std::vector<torch::Tensor> classes;
  for (std::size_t c = 0; c < per_class_embeddings.size(); ++c) {
    const auto& e = per_class_embeddings[c];
    if (!e.defined() || e.dim() != 2 || e.size(0) == 0)
      throw ValidationError("init_prototypes: class " + std::to_string(c) + " has no embeddings");
    if (e.size(1) != M) throw ShapeError("init_prototypes: embedding width differs across classes");
    auto points = as_double(e);
    const int k = static_cast<int>(std::min<std::int64_t>(per_class, points.size(0)));
    auto centers = kmeans(points, k, rng, options.iterations);
    if (k < per_class) {
      std::vector<torch::Tensor> padded{centers};
      for (int extra = k; extra < per_class; ++extra) {
        auto copy = centers[extra % k].clone();
        auto acc = copy.accessor<double, 1>();
        for (std::int64_t m = 0; m < M; ++m) acc[m] += jitter(rng);
        padded.push_back(copy.unsqueeze(0));
      }
      centers = torch::cat(padded, 0);
    }
    classes.push_back(centers);
  }
  return PrototypeBank(torch::stack(classes), mode, momentum);
}

torch::Tensor similarity(const torch::Tensor& features, const torch::Tensor& flat_prototypes, SimilarityMode mode) {
  require_matrix(features, "similarity");
  require_matrix(flat_prototypes, "similarity");
  if (features.size(1) != flat_prototypes.size(1)) throw ShapeError("similarity: feature and prototype widths differ");
  auto protos = flat_prototypes.to(features.scalar_type());
  if (mode == SimilarityMode::dot) return features.matmul(protos.t());
  namespace F = torch::nn::functional;
  auto opts = F::NormalizeFuncOptions().dim(1).eps(1e-12);
  return F::normalize(features, opts).matmul(F::normalize(protos, opts).t());
}

torch::Tensor similarity(const torch::Tensor& features, const PrototypeBank& bank) {
  return similarity(features, bank.flat(), bank.mode());
}

AssignmentMap assign(const torch::Tensor& features, const torch::Tensor& labels, const torch::Tensor& flat_prototypes,
                     int per_class, SimilarityMode mode) {
  require_matrix(features, "assign");
  if (labels.dim() != 1 || labels.size(0) != features.size(0))
    throw ShapeError("assign: labels must be a vector with one entry per pixel");
  if (per_class < 1 || flat_prototypes.size(0) % per_class != 0)
    throw ShapeError("assign: prototype count must be divisible by prototypes-per-class");
  const auto C = flat_prototypes.size(0) / per_class;
  auto cls = labels.to(torch::kLong);
  if (cls.numel() > 0 && cls.max().item<std::int64_t>() >= C) throw ValidationError("assign: class label out of range");

  AssignmentMap out;
  out.valid = cls >= 0;
  torch::NoGradGuard no_grad;
  auto scores = similarity(features.detach(), flat_prototypes, mode).reshape({features.size(0), C, per_class});
  auto safe_cls = cls.clamp_min(0);
  auto block = scores.gather(1, safe_cls.view({-1, 1, 1}).expand({-1, 1, per_class})).squeeze(1);
  auto best = std::get<0>(block.max(1, true));
  auto ks = torch::arange(per_class, torch::kLong).unsqueeze(0).expand_as(block);
  auto local = std::get<0>(torch::where(block == best, ks, torch::full_like(ks, per_class)).min(1));
  auto invalid = torch::full_like(cls, -1);
  out.cls = torch::where(out.valid, cls, invalid);
  out.local = torch::where(out.valid, local, invalid);
  out.flat = torch::where(out.valid, cls * per_class + local, invalid);
  return out;
}

AssignmentMap assign(const torch::Tensor& features, const torch::Tensor& labels, const PrototypeBank& bank) {
  return assign(features, labels, bank.flat(), bank.per_class(), bank.mode());
}

void update_bank(PrototypeBank& bank, const torch::Tensor& features, const AssignmentMap& assignment) {
  require_matrix(features, "update_bank");
  if (features.size(0) == 0) return;
  if (features.size(1) != bank.dim()) throw ShapeError("update_bank: feature width differs from bank");
  auto valid = assignment.flat >= 0;
  if (!valid.any().item<bool>()) return;
  auto x = as_double(features).index({valid});
  auto idx = assignment.flat.index({valid});
  auto sums = torch::zeros({bank.size(), bank.dim()}, torch::kDouble).index_add_(0, idx, x);
  auto count = torch::bincount(idx, {}, bank.size());
  auto count_acc = count.accessor<std::int64_t, 1>();
  const double m = bank.momentum();
  const int K = bank.per_class();
  for (int p = 0; p < bank.size(); ++p) {
    if (count_acc[p] == 0) continue;
    auto mean = sums[p] / static_cast<double>(count_acc[p]);
    auto prev = bank.centroids()[p / K][p % K];
    bank.set_centroid(p / K, p % K, m * prev + (1.0 - m) * mean, count_acc[p]);
  }
}

torch::Tensor attention_weights(const torch::Tensor& features, const torch::Tensor& prototypes) {
  require_matrix(features, "fuse");
  require_matrix(prototypes, "fuse");
  if (features.size(1) != prototypes.size(1)) throw ShapeError("fuse: feature and prototype widths differ");
  auto keys = prototypes.to(features.scalar_type());
  const double scale = 1.0 / std::sqrt(static_cast<double>(features.size(1)));
  return torch::softmax(features.matmul(keys.t()) * scale, 1);
}

torch::Tensor fuse(const torch::Tensor& features, const torch::Tensor& prototypes) {
  return attention_weights(features, prototypes).matmul(prototypes.to(features.scalar_type()));
}

ProtoHeadImpl::ProtoHeadImpl(int feature_dim, int num_prototypes, int num_classes) : num_classes_(num_classes) {
  if (num_classes < 2) throw ValidationError("prototype head needs at least two classes");
  proj_ = register_module("proj", torch::nn::Linear(feature_dim + num_prototypes, num_classes));
}

ProtoHeadOutput ProtoHeadImpl::forward(const torch::Tensor& attended, const torch::Tensor& scores) {
  if (attended.size(0) != scores.size(0)) throw ShapeError("proto_head: attended features and scores misaligned");
  ProtoHeadOutput out;
  out.logits = proj_->forward(torch::cat({attended, scores.to(attended.scalar_type())}, 1));
  out.probabilities = torch::softmax(out.logits, 1);
  if (num_classes_ == 2) {
    out.mask = binarize(out.probabilities.select(1, 1));
  } else {
    out.mask = out.probabilities.argmax(1);
  }
  return out;
}

torch::Tensor binarize(const torch::Tensor& foreground_probability) {
  return (foreground_probability > 0.5).to(torch::kLong);
}

}  // namespace mpamatch::protovis
