#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mpamatch/datasets.hpp"

namespace mpamatch::test {

namespace fs = std::filesystem;

/// Hand-rolled generator for randomized instances; everything is double precision.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng_); }
  double normal(double mean = 0.0, double std = 1.0) { return std::normal_distribution<double>(mean, std)(eng_); }
  bool coin(double p = 0.5) { return uniform() < p; }

  torch::Tensor uniform_tensor(const std::vector<std::int64_t>& shape, double lo, double hi);
  torch::Tensor normal_tensor(const std::vector<std::int64_t>& shape, double std = 1.0);
  /// Random per-pixel distributions [N,C,H,W]; larger `sharpness` gives more confident maps.
  torch::Tensor probabilities(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, double sharpness = 1.0);
  /// Integer labels in [0, classes).
  torch::Tensor labels(const std::vector<std::int64_t>& shape, int classes);

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

/// Row-major copy of a tensor's values.
std::vector<double> values(const torch::Tensor& t);
std::vector<std::int64_t> indices(const torch::Tensor& t);

/// |a-b| / max(|a|,|b|), 0 when both are 0.
double relative_error(double a, double b);
/// ||a-b|| / max(||a||, ||b||), 0 when both vanish.
double relative_error(const torch::Tensor& a, const torch::Tensor& b);

/// Central differences of a scalar function of one tensor.
torch::Tensor numeric_gradient(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                               double h = 1e-6);

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

fs::path source_dir();
fs::path prompts_root();

/// configs/desk.json with data and output locations filled in.
nlohmann::json desk_config(const fs::path& manifest, const fs::path& output_dir);

/// Runs the CLI with arguments; returns the exit code and captures combined output.
int run_cli(const std::vector<std::string>& args, std::string* output = nullptr);

}  // namespace mpamatch::test
