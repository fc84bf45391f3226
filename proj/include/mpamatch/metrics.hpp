#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace mpamatch::metrics {

/// C x C pixel counts; rows index ground truth, columns index prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return num_classes_; }
  std::int64_t at(int truth, int predicted) const;
  std::int64_t total() const;
  bool empty() const { return total() == 0; }

  /// Adds one count per pixel. Both masks hold class indices in [0, C).
  void accumulate(std::span<const std::int64_t> predicted, std::span<const std::int64_t> truth);
  /// Tensor overload; accepts any integral masks of identical shape.
  void accumulate(const torch::Tensor& predicted, const torch::Tensor& truth);

  /// Adds another shard's counts (parallel evaluation).
  void merge(const ConfusionMatrix& other);

  nlohmann::json to_json() const;
  static ConfusionMatrix from_rows(const std::vector<std::vector<std::int64_t>>& rows);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int num_classes_;
  std::vector<std::int64_t> counts_;
};

struct ClassScores {
  int index = 0;
  bool present = false;  // class occurs in ground truth
  double iou = 0.0;
  double dice = 0.0;
  double cpa = 0.0;
};

struct MetricReport {
  double miou = 0.0;
  double mdice = 0.0;
  double mcpa = 0.0;
  std::vector<ClassScores> per_class;
  std::vector<std::string> notes;
  bool include_background = true;

  nlohmann::json to_json() const;
  /// Aligned table with mDICE / mIOU / mCPA columns, percentages to two decimals.
  std::string to_table(const std::string& row_label = "result") const;
};

/// Macro-averages IoU, Dice and per-class recall over the classes present in the
/// ground truth. With include_background=false class 0 is dropped from the averages.
MetricReport summarize(const ConfusionMatrix& cm, bool include_background = true);

}  // namespace mpamatch::metrics
