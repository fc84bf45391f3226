#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mpamatch/config.hpp"
#include "mpamatch/datasets.hpp"
#include "mpamatch/losses.hpp"
#include "mpamatch/metrics.hpp"
#include "mpamatch/protovis.hpp"
#include "mpamatch/prototext.hpp"
#include "mpamatch/segmodel.hpp"

namespace mpamatch::pipeline {

/// One image resized to the network input; `mask` is undefined for unlabeled samples.
/// The original-resolution pair is kept for evaluation.
struct Sample {
  std::string id;
  torch::Tensor image;           // [3,S,S]
  torch::Tensor mask;            // [S,S] int64
  torch::Tensor original_image;  // [3,H,W]
  torch::Tensor original_mask;   // [H,W] int64
  bool labeled() const { return mask.defined(); }
};

struct DataBundle {
  datasets::DatasetManifest manifest;
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;
  std::vector<Sample> test;

  /// Samples of a named split: test, train_labeled, train_unlabeled, train.
  std::vector<const Sample*> split(const std::string& name) const;
};

/// Loads the manifest named by the config, re-splits the training pool unless
/// data.use_manifest_split is set, and decodes every image. Throws DataError.
DataBundle load_data(const RunConfig& config);
Sample load_sample(const datasets::DatasetManifest& manifest, const datasets::ManifestEntry& entry, int input_size);

/// base * (1 - step/total)^power, or base for the constant schedule.
double learning_rate(const OptimConfig& optim, long step, long total_steps);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  losses::LossReport report;
  double head_loss = 0.0;  // auxiliary prototype heads, trained on detached inputs
  bool prototypes_active = false;

  nlohmann::json to_json() const;
};

/// An unlabeled sample and the partner it is CutMix-ed with.
struct UnlabeledPair {
  const Sample* sample = nullptr;
  const Sample* partner = nullptr;
};

struct EvalResult {
  metrics::ConfusionMatrix cm{2};
  metrics::MetricReport report;
};

struct EvalOptions {
  std::string head = "main";
  bool include_background = true;
  std::optional<std::filesystem::path> export_dir;  // masks/ and overlays/ written here
};

/// Owns every piece of mutable training state: model, prototype heads, visual bank,
/// text prototypes and the optimizer.
class Trainer {
 public:
  explicit Trainer(RunConfig config);

  const RunConfig& config() const { return config_; }
  segmodel::SegmentationModel& model() { return model_; }
  protovis::PrototypeBank& bank() { return bank_; }
  const protovis::PrototypeBank& bank() const { return bank_; }
  std::optional<prototext::TextPrototypes>& text() { return text_; }
  const nlohmann::json& prompt_metadata() const { return prompt_metadata_; }
  long step() const { return step_; }
  int epoch() const { return epoch_; }
  void set_epoch(int e) { epoch_ = e; }
  long total_steps() const { return total_steps_; }
  void set_total_steps(long s) { total_steps_ = s; }
  bool prototypes_active() const;

  /// k-means initialization of the visual bank from labeled pixel embeddings.
  void init_bank(const std::vector<Sample>& labeled);

  /// One optimization step over a labeled batch and an optional unlabeled batch.
  /// Throws NumericAbort if a loss component is non-finite.
  StepRecord train_step(const std::vector<const Sample*>& labeled, const std::vector<UnlabeledPair>& unlabeled);

  EvalResult evaluate(const std::vector<const Sample*>& samples, const EvalOptions& options);

  /// Per-pixel main-head probabilities [B,C,S,S] for images [B,3,S,S] (no grad).
  torch::Tensor predict(const torch::Tensor& images, bool average_heads = false);

  void save(const std::filesystem::path& path, const nlohmann::json& history = nlohmann::json::array()) const;
  /// Restores a checkpoint written by save(); returns the stored metric history.
  nlohmann::json load(const std::filesystem::path& path);
  /// Reads only the resolved config from a checkpoint.
  static RunConfig checkpoint_config(const std::filesystem::path& path);

  std::vector<nlohmann::json>& augment_records() { return augment_records_; }

 private:
  torch::Tensor to_model(const torch::Tensor& t) const;
  torch::Tensor pixel_embeddings(const torch::Tensor& embeddings) const;

  RunConfig config_;
  torch::Dtype dtype_;
  int num_classes_;
  segmodel::SegmentationModel model_{nullptr};
  protovis::ProtoHead visual_head_{nullptr};
  protovis::ProtoHead text_head_{nullptr};
  std::optional<prototext::TextPrototypes> text_;
  protovis::PrototypeBank bank_;
  std::unique_ptr<torch::optim::SGD> optimizer_;
  nlohmann::json prompt_metadata_;
  long step_ = 0;
  int epoch_ = 0;
  long total_steps_ = 1;
  std::vector<nlohmann::json> augment_records_;
};

struct FitOptions {
  std::optional<std::filesystem::path> resume;
  std::optional<int> stop_after_epoch;  // simulate an interruption
  bool verbose = false;
};

struct FitResult {
  std::vector<StepRecord> steps;     // steps executed by this invocation
  nlohmann::json history;            // per-epoch evaluation records
  std::optional<metrics::MetricReport> final_report;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
  double mean_retention = 0.0;       // over steps that saw unlabeled data
};

/// Full training run. Writes run.json, log.jsonl, metrics.json and checkpoints to
/// config.output_dir.
FitResult fit(const RunConfig& config, const FitOptions& options = {});

/// Restores a checkpoint and evaluates one split of its dataset.
EvalResult evaluate(const std::filesystem::path& checkpoint, const std::string& split,
                    const std::optional<std::string>& manifest_override = std::nullopt,
                    const std::optional<std::filesystem::path>& export_dir = std::nullopt);

enum class AblationAxis { prompt_tag, tokens, unlabeled_percent, tau };
AblationAxis parse_axis(const std::string& name);
std::string to_string(AblationAxis axis);

struct AblationRow {
  std::string value;
  metrics::MetricReport metrics;
  double mean_retention = 0.0;
  std::filesystem::path run_dir;
};

/// Runs one configuration per value with a shared seed; writes results.csv and
/// results.json under config.output_dir.
std::vector<AblationRow> ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                                bool verbose = false);

}  // namespace mpamatch::pipeline
