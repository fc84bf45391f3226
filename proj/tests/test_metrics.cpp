#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "mpamatch/errors.hpp"
#include "mpamatch/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mpamatch;
using namespace mpamatch::metrics;
using mpamatch::test::Rng;
namespace oracle = mpamatch::test::oracle;

namespace {

std::vector<std::vector<std::int64_t>> rows(const ConfusionMatrix& cm) {
  std::vector<std::vector<std::int64_t>> out(cm.num_classes(), std::vector<std::int64_t>(cm.num_classes()));
  for (int g = 0; g < cm.num_classes(); ++g)
    for (int p = 0; p < cm.num_classes(); ++p) out[g][p] = cm.at(g, p);
  return out;
}

}  // namespace

TEST(ConfusionMatrix, TwoByTwoEnumeration) {
  ConfusionMatrix cm(2);
  auto pred = torch::tensor({1, 1, 0, 0}, torch::kLong).reshape({2, 2});
  auto gt = torch::tensor({1, 0, 0, 0}, torch::kLong).reshape({2, 2});
  cm.accumulate(pred, gt);
  EXPECT_EQ(cm, ConfusionMatrix::from_rows({{2, 1}, {0, 1}}));
  EXPECT_EQ(cm.total(), 4);
}

TEST(ConfusionMatrix, IdenticalMasksAreDiagonal) {
  Rng rng(1);
  auto m = rng.labels({6, 7}, 4);
  ConfusionMatrix cm(4);
  cm.accumulate(m, m);
  for (int g = 0; g < 4; ++g)
    for (int p = 0; p < 4; ++p)
      if (g != p) EXPECT_EQ(cm.at(g, p), 0);
  EXPECT_EQ(cm.total(), 42);
}

TEST(ConfusionMatrix, RejectsOutOfRange) {
  ConfusionMatrix cm(2);
  auto ok = torch::zeros({2, 2}, torch::kLong);
  auto bad = torch::full({2, 2}, 2, torch::kLong);
  EXPECT_THROW(cm.accumulate(bad, ok), ValidationError);
  EXPECT_THROW(cm.accumulate(ok, bad), ValidationError);
  EXPECT_THROW(cm.accumulate(ok, torch::zeros({3, 2}, torch::kLong)), ShapeError);
}

TEST(ConfusionMatrix, MergeIsAddition) {
  Rng rng(2);
  ConfusionMatrix a(3), b(3), both(3);
  auto p1 = rng.labels({5, 5}, 3), g1 = rng.labels({5, 5}, 3);
  auto p2 = rng.labels({4, 6}, 3), g2 = rng.labels({4, 6}, 3);
  a.accumulate(p1, g1);
  b.accumulate(p2, g2);
  both.accumulate(p1, g1);
  both.accumulate(p2, g2);
  a.merge(b);
  EXPECT_EQ(a, both);
}

TEST(Summarize, HandFixture) {
  auto r = summarize(ConfusionMatrix::from_rows({{2, 1}, {0, 1}}));
  EXPECT_NEAR(r.miou, 7.0 / 12.0, 1e-12);
  EXPECT_NEAR(r.mdice, 11.0 / 15.0, 1e-12);
  EXPECT_NEAR(r.mcpa, 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(r.per_class[0].iou, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.per_class[1].dice, 2.0 / 3.0, 1e-12);
}

TEST(Summarize, PerfectAndComplement) {
  auto perfect = summarize(ConfusionMatrix::from_rows({{5, 0}, {0, 3}}));
  EXPECT_EQ(perfect.miou, 1.0);
  EXPECT_EQ(perfect.mdice, 1.0);
  EXPECT_EQ(perfect.mcpa, 1.0);
  auto complement = summarize(ConfusionMatrix::from_rows({{0, 5}, {3, 0}}));
  EXPECT_EQ(complement.miou, 0.0);
  EXPECT_EQ(complement.mdice, 0.0);
  EXPECT_EQ(complement.mcpa, 0.0);
}

TEST(Summarize, AbsentClassExcludedWithNote) {
  auto r = summarize(ConfusionMatrix::from_rows({{3, 1, 0}, {0, 2, 0}, {0, 0, 0}}));
  EXPECT_FALSE(r.per_class[2].present);
  EXPECT_FALSE(r.notes.empty());
  auto o = oracle::summarize({{3, 1, 0}, {0, 2, 0}, {0, 0, 0}});
  EXPECT_NEAR(r.miou, o.miou, 1e-12);
}

TEST(Summarize, ForegroundOnlyMode) {
  auto r = summarize(ConfusionMatrix::from_rows({{2, 1}, {0, 1}}), false);
  EXPECT_NEAR(r.miou, 0.5, 1e-12);
  EXPECT_NEAR(r.mdice, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.mcpa, 1.0, 1e-12);
}

TEST(Summarize, EmptyMatrixThrows) { EXPECT_THROW(summarize(ConfusionMatrix(3)), ValidationError); }

TEST(Summarize, MatchesOracleOnRandomMatrices) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = rng.integer(2, 5);
    ConfusionMatrix cm(c);
    cm.accumulate(rng.labels({8, 8}, c), rng.labels({8, 8}, c));
    auto r = summarize(cm);
    auto o = oracle::summarize(rows(cm));
    EXPECT_NEAR(r.miou, o.miou, 1e-12);
    EXPECT_NEAR(r.mdice, o.mdice, 1e-12);
    EXPECT_NEAR(r.mcpa, o.mcpa, 1e-12);
  }
}

TEST(Summarize, DiceDominatesIou) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    ConfusionMatrix cm(3);
    cm.accumulate(rng.labels({6, 6}, 3), rng.labels({6, 6}, 3));
    for (const auto& s : summarize(cm).per_class) {
      if (!s.present) continue;
      EXPECT_GE(s.dice, s.iou);
      if (s.iou > 0.0 && s.iou < 1.0) EXPECT_GT(s.dice, s.iou);
    }
  }
}

TEST(Summarize, PermutationConsistency) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int c = rng.integer(2, 5);
    auto pred = rng.labels({7, 7}, c), gt = rng.labels({7, 7}, c);
    std::vector<std::int64_t> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    auto map = torch::tensor(perm, torch::kLong);
    ConfusionMatrix a(c), b(c);
    a.accumulate(pred, gt);
    b.accumulate(map.index({pred}), map.index({gt}));
    auto ra = summarize(a), rb = summarize(b);
    EXPECT_NEAR(ra.miou, rb.miou, 1e-12);
    EXPECT_NEAR(ra.mdice, rb.mdice, 1e-12);
    EXPECT_NEAR(ra.mcpa, rb.mcpa, 1e-12);
    for (int k = 0; k < c; ++k) EXPECT_NEAR(ra.per_class[k].iou, rb.per_class[perm[k]].iou, 1e-12);
  }
}

TEST(Summarize, StreamingEquivalence) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = rng.integer(2, 4);
    const int pieces = rng.integer(2, 5);
    ConfusionMatrix streamed(c), single(c);
    std::vector<torch::Tensor> preds, truths;
    for (int i = 0; i < pieces; ++i) {
      auto p = rng.labels({rng.integer(1, 6), 5}, c), g = rng.labels({p.size(0), 5}, c);
      streamed.accumulate(p, g);
      preds.push_back(p);
      truths.push_back(g);
    }
    single.accumulate(torch::cat(preds), torch::cat(truths));
    EXPECT_EQ(streamed, single);
  }
}

TEST(MetricReport, TableAndJson) {
  auto r = summarize(ConfusionMatrix::from_rows({{2, 1}, {0, 1}}));
  const auto table = r.to_table("run");
  EXPECT_NE(table.find("mDICE"), std::string::npos);
  EXPECT_NE(table.find("mIOU"), std::string::npos);
  EXPECT_NE(table.find("mCPA"), std::string::npos);
  EXPECT_NE(table.find("73.33"), std::string::npos);
  EXPECT_NE(table.find("58.33"), std::string::npos);
  EXPECT_NE(table.find("83.33"), std::string::npos);
  auto j = r.to_json();
  EXPECT_NEAR(j["mIoU"].get<double>(), 7.0 / 12.0, 1e-12);
}
