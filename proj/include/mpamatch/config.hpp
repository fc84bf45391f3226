#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpamatch/augment.hpp"
#include "mpamatch/losses.hpp"
#include "mpamatch/protovis.hpp"
#include "mpamatch/segmodel.hpp"

namespace mpamatch {

/// Published configuration schema: every accepted key with its default value. A config
/// file may only contain keys present here, with values of the same JSON type.
const nlohmann::json& default_config();

/// Overlays `user` on the defaults after checking keys and types; throws ConfigError.
nlohmann::json resolve_config(const nlohmann::json& user);

/// Applies a dotted override such as `loss.tau=0.9`; the value is parsed as JSON when
/// possible, else taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool poly = true;
  double power = 0.9;
};

struct PrototypeConfig {
  int per_class = 4;
  protovis::SimilarityMode similarity = protovis::SimilarityMode::cosine;
  double momentum = 0.99;
  int warmup_epochs = 1;
  int init_pixels_per_class = 2000;
  bool visual = true;
};

struct TextConfig {
  bool enabled = true;
  std::string prompts_root;
  std::string tag = "P-nonsim";
  int tokens = 1;
  int dim = 64;
  std::string encoder = "stub";
  std::string table_path;
  bool train_base = false;
};

struct DataConfig {
  std::string manifest;
  double labeled_fraction = 7.0 / 9.0;
  double test_fraction = 0.1;
  bool use_manifest_split = false;
  std::uint64_t split_seed = 0;
  std::vector<std::string> class_names;
};

struct TrainConfig {
  int epochs = 40;
  int batch_size = 1;
  long max_steps = 0;  // 0: epochs x labeled-stream length
  int eval_every = 1;
  bool dump_augment = false;
};

struct EvalConfig {
  std::string head = "main";  // main | average
  bool include_background = true;
  std::string split = "test";
};

/// Typed view of a resolved configuration.
struct RunConfig {
  nlohmann::json resolved;
  std::uint64_t seed = 0;
  std::string output_dir;
  bool double_precision = false;
  segmodel::ModelSpec model;
  PrototypeConfig prototypes;
  TextConfig text;
  losses::LossWeights loss;
  augment::AugmentConfig augment;
  OptimConfig optim;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;

  /// Resolves, validates and converts. Throws ConfigError.
  static RunConfig from_json(const nlohmann::json& user);
  static RunConfig load(const std::filesystem::path& path);
  std::string hash() const;
};

}  // namespace mpamatch
