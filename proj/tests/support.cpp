#include "support.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace mpamatch::test {

torch::Tensor Rng::uniform_tensor(const std::vector<std::int64_t>& shape, double lo, double hi) {
  auto t = torch::empty(shape, torch::kDouble);
  auto* p = t.data_ptr<double>();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = uniform(lo, hi);
  return t;
}

torch::Tensor Rng::normal_tensor(const std::vector<std::int64_t>& shape, double std) {
  auto t = torch::empty(shape, torch::kDouble);
  auto* p = t.data_ptr<double>();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = normal(0.0, std);
  return t;
}

torch::Tensor Rng::probabilities(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, double sharpness) {
  auto t = torch::empty({n, c, h, w}, torch::kDouble);
  auto a = t.accessor<double, 4>();
  std::vector<double> z(c);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        double total = 0.0;
        for (std::int64_t k = 0; k < c; ++k) {
          z[k] = std::exp(sharpness * normal());
          total += z[k];
        }
        for (std::int64_t k = 0; k < c; ++k) a[i][k][y][x] = z[k] / total;
      }
  return t;
}

torch::Tensor Rng::labels(const std::vector<std::int64_t>& shape, int classes) {
  auto t = torch::empty(shape, torch::kLong);
  auto* p = t.data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = integer(0, classes - 1);
  return t;
}

std::vector<double> values(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kDouble).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

std::vector<std::int64_t> indices(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kLong).contiguous();
  return {c.data_ptr<std::int64_t>(), c.data_ptr<std::int64_t>() + c.numel()};
}

double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
  auto x = a.detach().to(torch::kDouble), y = b.detach().to(torch::kDouble);
  const double scale = std::max(x.norm().item<double>(), y.norm().item<double>());
  return scale == 0.0 ? 0.0 : (x - y).norm().item<double>() / scale;
}

torch::Tensor numeric_gradient(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                               double h) {
  auto base = x.detach().to(torch::kDouble).contiguous().clone();
  auto grad = torch::zeros_like(base);
  auto* p = base.data_ptr<double>();
  auto* g = grad.data_ptr<double>();
  for (std::int64_t i = 0; i < base.numel(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = f(base);
    p[i] = keep - h;
    const double down = f(base);
    p[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("mpamatch-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

fs::path source_dir() { return MPAMATCH_SOURCE_DIR; }

fs::path prompts_root() { return source_dir() / "data" / "prompts"; }

nlohmann::json desk_config(const fs::path& manifest, const fs::path& output_dir) {
  std::ifstream in(source_dir() / "configs" / "desk.json");
  auto j = nlohmann::json::parse(in);
  j["data"]["manifest"] = manifest.string();
  j["output_dir"] = output_dir.string();
  j["text"]["prompts_root"] = prompts_root().string();
  return j;
}

int run_cli(const std::vector<std::string>& args, std::string* output) {
  std::string cmd = MPAMATCH_CLI;
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return -1;
  std::array<char, 4096> buf{};
  std::string text;
  while (std::fgets(buf.data(), buf.size(), pipe)) text += buf.data();
  const int status = ::pclose(pipe);
  if (output) *output = text;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace mpamatch::test
