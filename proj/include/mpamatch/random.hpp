#pragma once

#include <cstdint>
#include <initializer_list>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

namespace mpamatch {

/// splitmix64 finalizer; used to derive independent sub-seeds from a base seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for a (base, stream, index...) tuple.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t s = mix_seed(base);
  for (auto p : parts) s = mix_seed(s ^ mix_seed(p));
  return s;
}

inline at::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

/// Normal(0, std) truncated to +-2 std by resampling.
inline void trunc_normal_(torch::Tensor& t, double std, at::Generator& gen) {
  torch::NoGradGuard no_grad;
  t.normal_(0.0, std, gen);
  for (int round = 0; round < 64; ++round) {
    auto outside = t.abs() > 2.0 * std;
    if (!outside.any().item<bool>()) return;
    auto fresh = torch::empty_like(t).normal_(0.0, std, gen);
    t.copy_(torch::where(outside, fresh, t));
  }
  t.clamp_(-2.0 * std, 2.0 * std);
}

}  // namespace mpamatch
