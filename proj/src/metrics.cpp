#include "mpamatch/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "mpamatch/errors.hpp"

namespace mpamatch::metrics {

ConfusionMatrix::ConfusionMatrix(int num_classes) : num_classes_(num_classes) {
  if (num_classes < 1) throw ValidationError("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
}

std::int64_t ConfusionMatrix::at(int truth, int predicted) const {
  return counts_.at(static_cast<std::size_t>(truth) * num_classes_ + predicted);
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t sum = 0;
  for (auto c : counts_) sum += c;
  return sum;
}

void ConfusionMatrix::accumulate(std::span<const std::int64_t> predicted,
                                 std::span<const std::int64_t> truth) {
  if (predicted.size() != truth.size())
    throw ShapeError("prediction and ground truth differ in pixel count");
  // validate first so a bad mask leaves the matrix untouched
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes_ || predicted[i] < 0 || predicted[i] >= num_classes_)
      throw ValidationError("mask value out of range at pixel " + std::to_string(i));
  }
  for (std::size_t i = 0; i < truth.size(); ++i)
    ++counts_[static_cast<std::size_t>(truth[i]) * num_classes_ + predicted[i]];
}

void ConfusionMatrix::accumulate(const torch::Tensor& predicted, const torch::Tensor& truth) {
  if (predicted.sizes() != truth.sizes())
    throw ShapeError("prediction and ground truth masks differ in shape");
  auto p = predicted.to(torch::kLong).contiguous().flatten();
  auto t = truth.to(torch::kLong).contiguous().flatten();
  accumulate(std::span<const std::int64_t>(p.data_ptr<std::int64_t>(), p.numel()),
             std::span<const std::int64_t>(t.data_ptr<std::int64_t>(), t.numel()));
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) throw ShapeError("cannot merge matrices of different class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

nlohmann::json ConfusionMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (int g = 0; g < num_classes_; ++g) {
    nlohmann::json row = nlohmann::json::array();
    for (int p = 0; p < num_classes_; ++p) row.push_back(at(g, p));
    rows.push_back(row);
  }
  return rows;
}

ConfusionMatrix ConfusionMatrix::from_rows(const std::vector<std::vector<std::int64_t>>& rows) {
  ConfusionMatrix cm(static_cast<int>(rows.size()));
  for (std::size_t g = 0; g < rows.size(); ++g) {
    if (rows[g].size() != rows.size()) throw ShapeError("confusion matrix rows must be square");
    for (std::size_t p = 0; p < rows.size(); ++p) {
      if (rows[g][p] < 0) throw ValidationError("confusion matrix counts must be non-negative");
      cm.counts_[g * rows.size() + p] = rows[g][p];
    }
  }
  return cm;
}

MetricReport summarize(const ConfusionMatrix& cm, bool include_background) {
  if (cm.empty()) throw ValidationError("cannot summarize an empty confusion matrix");
  const int C = cm.num_classes();
  MetricReport report;
  report.include_background = include_background;

  int averaged = 0;
  for (int c = 0; c < C; ++c) {
    std::int64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < C; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    ClassScores s;
    s.index = c;
    s.present = (tp + fn) > 0;
    const auto tpd = static_cast<double>(tp);
    if (tp + fp + fn > 0) {
      s.iou = tpd / static_cast<double>(tp + fp + fn);
      s.dice = 2.0 * tpd / static_cast<double>(2 * tp + fp + fn);
    }
    if (s.present) s.cpa = tpd / static_cast<double>(tp + fn);
    report.per_class.push_back(s);

    if (!s.present) {
      report.notes.push_back("class " + std::to_string(c) + " absent from ground truth; excluded from averages");
      continue;
    }
    if (!include_background && c == 0) continue;
    report.miou += s.iou;
    report.mdice += s.dice;
    report.mcpa += s.cpa;
    ++averaged;
  }
  if (averaged == 0) throw ValidationError("no class eligible for averaging");
  report.miou /= averaged;
  report.mdice /= averaged;
  report.mcpa /= averaged;
  return report;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& s : per_class) {
    classes.push_back({{"class", s.index}, {"present", s.present}, {"IoU", s.iou}, {"Dice", s.dice}, {"CPA", s.cpa}});
  }
  return {{"mIoU", miou},
          {"mDice", mdice},
          {"mCPA", mcpa},
          {"include_background", include_background},
          {"per_class", classes},
          {"notes", notes}};
}

std::string MetricReport::to_table(const std::string& row_label) const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %8s %8s %8s\n", "", "mDICE", "mIOU", "mCPA");
  out << line;
  std::snprintf(line, sizeof line, "%-16s %8.2f %8.2f %8.2f\n", row_label.c_str(), 100.0 * mdice, 100.0 * miou,
                100.0 * mcpa);
  out << line;
  return out.str();
}

}  // namespace mpamatch::metrics
