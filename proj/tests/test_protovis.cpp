#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <gtest/gtest.h>

#include "mpamatch/errors.hpp"
#include "mpamatch/protovis.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mpamatch;
using namespace mpamatch::protovis;
using mpamatch::test::Rng;
namespace oracle = mpamatch::test::oracle;

namespace {

PrototypeBank random_bank(Rng& rng, int c, int k, int m, SimilarityMode mode = SimilarityMode::cosine,
                          double momentum = 0.9) {
  return PrototypeBank(rng.normal_tensor({c, k, m}), mode, momentum);
}

/// Lowest-SSE partition of 2-d points into two non-empty groups, as sorted centroids.
std::vector<std::pair<double, double>> brute_force_two_means(const std::vector<std::pair<double, double>>& pts) {
  const int n = static_cast<int>(pts.size());
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, double>> centers;
  for (int mask = 1; mask < (1 << n) - 1; ++mask) {
    double sx[2] = {0, 0}, sy[2] = {0, 0};
    int cnt[2] = {0, 0};
    for (int i = 0; i < n; ++i) {
      const int g = (mask >> i) & 1;
      sx[g] += pts[i].first;
      sy[g] += pts[i].second;
      ++cnt[g];
    }
    double sse = 0.0;
    for (int i = 0; i < n; ++i) {
      const int g = (mask >> i) & 1;
      sse += std::pow(pts[i].first - sx[g] / cnt[g], 2) + std::pow(pts[i].second - sy[g] / cnt[g], 2);
    }
    if (sse < best) {
      best = sse;
      centers = {{sx[0] / cnt[0], sy[0] / cnt[0]}, {sx[1] / cnt[1], sy[1] / cnt[1]}};
    }
  }
  std::sort(centers.begin(), centers.end());
  return centers;
}

}  // namespace

TEST(InitPrototypes, KMeansHandExample) {
  std::vector<std::pair<double, double>> pts{{0, 0}, {0, 0.1}, {10, 10}, {10, 9.9}};
  auto data = torch::tensor({0.0, 0.0, 0.0, 0.1, 10.0, 10.0, 10.0, 9.9}, torch::kDouble).reshape({4, 2});
  auto bank = init_prototypes({data}, 2, 3);
  auto c = bank.centroids()[0];
  std::vector<std::pair<double, double>> got{{c[0][0].item<double>(), c[0][1].item<double>()},
                                             {c[1][0].item<double>(), c[1][1].item<double>()}};
  std::sort(got.begin(), got.end());
  auto expect = brute_force_two_means(pts);
  for (int i = 0; i < 2; ++i) {
    EXPECT_NEAR(got[i].first, expect[i].first, 1e-12);
    EXPECT_NEAR(got[i].second, expect[i].second, 1e-12);
  }
  EXPECT_NEAR(got[0].second, 0.05, 1e-12);
  EXPECT_NEAR(got[1].second, 9.95, 1e-12);
}

TEST(InitPrototypes, SingleClusterIsMean) {
  Rng rng(1);
  auto a = rng.normal_tensor({9, 5}), b = rng.normal_tensor({4, 5});
  auto bank = init_prototypes({a, b}, 1, 0);
  EXPECT_LT(test::relative_error(bank.centroids()[0][0], a.mean(0)), 1e-12);
  EXPECT_LT(test::relative_error(bank.centroids()[1][0], b.mean(0)), 1e-12);
}

TEST(InitPrototypes, DeterministicAndPadded) {
  Rng rng(2);
  auto a = rng.normal_tensor({30, 6}), b = rng.normal_tensor({2, 6});
  auto one = init_prototypes({a, b}, 4, 11), two = init_prototypes({a, b}, 4, 11);
  EXPECT_TRUE(torch::equal(one.centroids(), two.centroids()));
  EXPECT_EQ(one.per_class(), 4);
  // class 1 has two points: the extra two prototypes sit within jitter of them
  for (int k = 2; k < 4; ++k) {
    const double d = (one.centroids()[1][k] - one.centroids()[1][k % 2]).norm().item<double>();
    EXPECT_GT(d, 0.0);
    EXPECT_LT(d, 1e-2);
  }
}

TEST(InitPrototypes, EmptyClassNamed) {
  Rng rng(3);
  try {
    init_prototypes({rng.normal_tensor({3, 2}), torch::zeros({0, 2}, torch::kDouble)}, 2, 0);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
  }
}

TEST(Bank, CosineModeUnitNorm) {
  Rng rng(4);
  auto bank = random_bank(rng, 3, 2, 5);
  EXPECT_LT((bank.flat().norm(2, 1) - 1).abs().max().item<double>(), 1e-12);
  for (int round = 0; round < 10; ++round) {
    auto x = rng.normal_tensor({20, 5});
    auto y = rng.labels({20}, 3);
    update_bank(bank, x, assign(x, y, bank));
    EXPECT_LT((bank.flat().norm(2, 1) - 1).abs().max().item<double>(), 1e-6);
  }
}

TEST(Bank, SaveLoadRoundTrip) {
  Rng rng(5);
  test::TempDir dir;
  auto bank = random_bank(rng, 2, 3, 4, SimilarityMode::dot, 0.7);
  auto x = rng.normal_tensor({10, 4});
  update_bank(bank, x, assign(x, rng.labels({10}, 2), bank));
  bank.save(dir / "bank.bin");
  auto back = PrototypeBank::load(dir / "bank.bin");
  EXPECT_TRUE(torch::equal(back.centroids(), bank.centroids()));
  EXPECT_TRUE(torch::equal(back.counts(), bank.counts()));
  EXPECT_EQ(back.mode(), SimilarityMode::dot);
  EXPECT_EQ(back.momentum(), 0.7);
}

TEST(Bank, LoadRejectsGarbage) {
  test::TempDir dir;
  {
    std::ofstream out(dir / "bad.bin", std::ios::binary);
    out << "not a bank";
  }
  EXPECT_THROW(PrototypeBank::load(dir / "bad.bin"), Error);
}

TEST(Similarity, ParallelOrthogonalZero) {
  auto protos = torch::tensor({1.0, 0.0, 0.0, 1.0}, torch::kDouble).reshape({2, 2});
  auto x = torch::tensor({3.0, 0.0, 0.0, 0.0}, torch::kDouble).reshape({2, 2});
  auto s = similarity(x, protos);
  EXPECT_NEAR(s[0][0].item<double>(), 1.0, 1e-15);
  EXPECT_EQ(s[0][1].item<double>(), 0.0);
  EXPECT_EQ(s[1][0].item<double>(), 0.0);
  EXPECT_EQ(s[1][1].item<double>(), 0.0);
}

TEST(Similarity, MatchesOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.integer(1, 6), p = rng.integer(1, 6), m = rng.integer(1, 7);
    auto x = rng.normal_tensor({n, m}), mu = rng.normal_tensor({p, m});
    auto s = test::values(similarity(x, mu));
    auto xv = test::values(x), mv = test::values(mu);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < p; ++j) {
        EXPECT_NEAR(s[i * p + j], oracle::cosine(&xv[i * m], &mv[j * m], m), 1e-12);
        EXPECT_LE(std::abs(s[i * p + j]), 1.0 + 1e-12);
      }
  }
}

TEST(Assign, SingleCandidate) {
  Rng rng(7);
  auto bank = random_bank(rng, 3, 1, 4);
  auto y = rng.labels({12}, 3);
  auto a = assign(rng.normal_tensor({12, 4}), y, bank);
  EXPECT_TRUE(torch::equal(a.flat, y));
}

TEST(Assign, ExactMatchWins) {
  auto c = torch::zeros({1, 3, 3}, torch::kDouble);
  c.index_put_({0, 0, 0}, 1.0);
  c.index_put_({0, 1, 1}, 1.0);
  c.index_put_({0, 2, 2}, 1.0);
  PrototypeBank bank(c, SimilarityMode::cosine, 0.9);
  auto x = torch::tensor({0.0, 0.0, 2.0}, torch::kDouble).reshape({1, 3});
  auto a = assign(x, torch::zeros({1}, torch::kLong), bank);
  EXPECT_EQ(a.local[0].item<std::int64_t>(), 2);
  EXPECT_EQ(a.flat[0].item<std::int64_t>(), 2);
}

TEST(Assign, TiesPickLowestIndex) {
  auto c = torch::ones({1, 3, 2}, torch::kDouble);
  PrototypeBank bank(c, SimilarityMode::cosine, 0.9);
  auto a = assign(torch::tensor({{1.0, 0.5}}, torch::kDouble), torch::zeros({1}, torch::kLong), bank);
  EXPECT_EQ(a.local[0].item<std::int64_t>(), 0);
}

TEST(Assign, MatchesExhaustiveOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const int c = rng.integer(1, 3), k = rng.integer(1, 4), m = rng.integer(2, 6), n = 10;
    auto bank = random_bank(rng, c, k, m);
    auto x = rng.normal_tensor({n, m});
    auto y = rng.labels({n}, c);
    for (int i = 0; i < n; ++i)
      if (rng.coin(0.2)) y.index_put_({i}, -1);
    auto a = assign(x, y, bank);
    auto xv = test::values(x), pv = test::values(bank.flat());
    auto yv = test::indices(y), got = test::indices(a.flat);
    for (int i = 0; i < n; ++i) {
      if (yv[i] < 0) {
        EXPECT_EQ(got[i], -1);
        EXPECT_FALSE(a.valid[i].item<bool>());
        continue;
      }
      int best = -1;
      double best_score = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        const int flat = static_cast<int>(yv[i]) * k + j;
        const double s = oracle::cosine(&xv[i * m], &pv[flat * m], m);
        if (s > best_score) {
          best_score = s;
          best = flat;
        }
      }
      EXPECT_EQ(got[i], best);
    }
  }
}

TEST(UpdateBank, EmaDefinition) {
  Rng rng(9);
  auto bank = random_bank(rng, 2, 2, 3, SimilarityMode::cosine, 0.8);
  const auto before = bank.centroids().clone();
  auto v = rng.normal_tensor({3});
  auto x = v.unsqueeze(0).repeat({5, 1});
  AssignmentMap a;
  a.flat = torch::full({5}, 1, torch::kLong);  // all into (0,1)
  update_bank(bank, x, a);
  EXPECT_LT(test::relative_error(bank.centroids()[0][1], 0.8 * before[0][1] + 0.2 * v), 1e-12);
  EXPECT_TRUE(torch::equal(bank.centroids()[1][0], before[1][0]));
  EXPECT_TRUE(torch::equal(bank.centroids()[0][0], before[0][0]));
  EXPECT_EQ(bank.counts()[0][1].item<std::int64_t>(), 5);
  EXPECT_EQ(bank.counts()[1][0].item<std::int64_t>(), 0);
}

TEST(UpdateBank, ZeroMomentumIsBatchMean) {
  Rng rng(10);
  auto bank = random_bank(rng, 1, 2, 4, SimilarityMode::dot, 0.0);
  auto x = rng.normal_tensor({6, 4});
  AssignmentMap a;
  a.flat = torch::tensor({0, 0, 0, 1, 1, -1}, torch::kLong);
  update_bank(bank, x, a);
  EXPECT_LT(test::relative_error(bank.centroids()[0][0], x.slice(0, 0, 3).mean(0)), 1e-12);
  EXPECT_LT(test::relative_error(bank.centroids()[0][1], x.slice(0, 3, 5).mean(0)), 1e-12);
}

TEST(UpdateBank, EmptyBatchNoOp) {
  Rng rng(11);
  auto bank = random_bank(rng, 2, 2, 3);
  const auto before = bank.centroids().clone();
  AssignmentMap a;
  a.flat = torch::zeros({0}, torch::kLong);
  update_bank(bank, torch::zeros({0, 3}, torch::kDouble), a);
  EXPECT_TRUE(torch::equal(bank.centroids(), before));
}

TEST(UpdateBank, PermutationInvariant) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    auto one = random_bank(rng, 2, 3, 4);
    auto two = one.snapshot();
    auto x = rng.normal_tensor({15, 4});
    auto y = rng.labels({15}, 2);
    auto perm = torch::randperm(15, torch::kLong);
    update_bank(one, x, assign(x, y, one));
    update_bank(two, x.index({perm}), assign(x.index({perm}), y.index({perm}), two));
    EXPECT_LT((one.centroids() - two.centroids()).abs().max().item<double>(), 1e-12);
  }
}

TEST(Fuse, SinglePrototype) {
  Rng rng(13);
  auto mu = rng.normal_tensor({1, 4});
  auto out = fuse(rng.normal_tensor({5, 4}), mu);
  for (int i = 0; i < 5; ++i) EXPECT_LT(test::relative_error(out[i], mu[0]), 1e-12);
}

TEST(Fuse, IdenticalPrototypes) {
  Rng rng(14);
  auto v = rng.normal_tensor({1, 3});
  auto out = fuse(rng.normal_tensor({4, 3}, 5.0), v.repeat({2, 1}));
  for (int i = 0; i < 4; ++i) EXPECT_LT(test::relative_error(out[i], v[0]), 1e-12);
}

TEST(Fuse, MatchesAttentionOracle) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.integer(1, 4), p = rng.integer(1, 5), m = rng.integer(1, 6);
    auto q = rng.normal_tensor({n, m}), k = rng.normal_tensor({p, m});
    auto expect = oracle::attention(test::values(q), test::values(k), n, p, m);
    auto got = test::values(fuse(q, k));
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-12);
    auto w = attention_weights(q, k);
    EXPECT_GE(w.min().item<double>(), 0.0);
    EXPECT_LT((w.sum(1) - 1).abs().max().item<double>(), 1e-12);
  }
}

TEST(ProtoHead, ProbabilitiesAndMask) {
  torch::manual_seed(0);
  ProtoHead head(4, 6, 3);
  Rng rng(16);
  auto out = head->forward(rng.normal_tensor({7, 4}).to(torch::kFloat), rng.normal_tensor({7, 6}).to(torch::kFloat));
  EXPECT_EQ(out.logits.sizes(), (std::vector<std::int64_t>{7, 3}));
  EXPECT_LT((out.probabilities.sum(1) - 1).abs().max().item<double>(), 1e-5);
  EXPECT_TRUE(torch::equal(out.mask, out.probabilities.argmax(1)));
}

TEST(ProtoHead, BinaryMaskValues) {
  torch::manual_seed(1);
  ProtoHead head(3, 4, 2);
  Rng rng(17);
  auto out = head->forward(rng.normal_tensor({9, 3}).to(torch::kFloat), rng.normal_tensor({9, 4}).to(torch::kFloat));
  auto values = std::get<0>(at::_unique(out.mask));
  EXPECT_LE(values.max().item<std::int64_t>(), 1);
  EXPECT_GE(values.min().item<std::int64_t>(), 0);
  EXPECT_TRUE(torch::equal(out.mask, binarize(out.probabilities.select(1, 1))));
}

TEST(Binarize, Threshold) {
  const double eps = 1e-9;
  auto p = torch::tensor({0.5 + eps, 0.5 - eps, 0.5, 1.0, 0.0}, torch::kDouble);
  auto m = test::indices(binarize(p));
  EXPECT_EQ(m, (std::vector<std::int64_t>{1, 0, 0, 1, 0}));
}

TEST(Objective, ZeroAtCentroids) {
  auto c = torch::tensor({1.0, 0.0, 0.0, 1.0}, torch::kDouble).reshape({1, 2, 2});
  PrototypeBank bank(c, SimilarityMode::dot, 0.9);
  auto x = torch::tensor({1.0, 0.0, 0.0, 1.0, 0.0, 2.0}, torch::kDouble).reshape({3, 2});
  EXPECT_NEAR(bank.objective(x, torch::tensor({0, 1, 1}, torch::kLong)), 1.0, 1e-12);
}
