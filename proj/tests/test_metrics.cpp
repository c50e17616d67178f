#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "llmkt/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace llmkt;

namespace {

RankedList list_of(std::vector<std::uint32_t> items, std::unordered_set<std::uint32_t> rel) {
  return {"u", std::move(items), std::move(rel)};
}

double auc(std::vector<double> s, std::vector<double> l) { return auc_roc(s, l); }

}  // namespace

TEST(Recall, HandCases) {
  auto r = list_of({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}, {3, 11});
  EXPECT_EQ(recall_at_k(r, 10), 0.5);
  EXPECT_EQ(recall_at_k(list_of({1, 2, 3}, {1, 3}), 10), 1.0);
  EXPECT_EQ(recall_at_k(list_of({1, 2, 3}, {9}), 10), 0.0);
  EXPECT_THROW(recall_at_k(list_of({1}, {}), 10), ValidationError);
  EXPECT_THROW(recall_at_k(list_of({1}, {1}), 0), ValidationError);
}

TEST(Ndcg, HandCases) {
  auto r = list_of({7, 8, 9, 10, 11}, {7, 9});
  EXPECT_NEAR(ndcg_at_k(r, 10), 1.5 / (1.0 + 1.0 / std::log2(3.0)), 1e-12);
  EXPECT_NEAR(ndcg_at_k(r, 10), 0.91972, 5e-6);
  EXPECT_EQ(ndcg_at_k(list_of({7, 9, 1}, {7, 9}), 10), 1.0);
  EXPECT_EQ(ndcg_at_k(list_of({1, 2}, {7, 9}), 10), 0.0);
}

TEST(Hits, HandCasesAndAggregation) {
  std::vector<std::uint32_t> items(12);
  for (std::uint32_t i = 0; i < 12; ++i) items[i] = i;
  EXPECT_EQ(hits_at_k(list_of(items, {9}), 10), 1.0);
  EXPECT_EQ(hits_at_k(list_of(items, {10}), 10), 0.0);
  std::vector<RankedList> users{list_of(items, {0}), list_of(items, {11}), list_of(items, {})};
  auto rep = ranking_metric("hits", users, 10);
  EXPECT_EQ(rep.value, 0.5);
  EXPECT_EQ(rep.n_users, 2u);
  EXPECT_EQ(rep.n_skipped, 1u);
  EXPECT_THROW(ranking_metric("map", users, 10), ValidationError);
}

TEST(Auc, HandCases) {
  EXPECT_EQ(auc({0.9, 0.1}, {1, 0}), 1.0);
  EXPECT_EQ(auc({0.8, 0.4, 0.6, 0.2}, {1, 1, 0, 0}), 0.75);
  EXPECT_EQ(auc({0.3, 0.3, 0.3, 0.3}, {1, 0, 1, 0}), 0.5);
  EXPECT_THROW(auc({0.1, 0.2}, {1, 1}), ValidationError);
  EXPECT_THROW(auc({0.1, 0.2}, {1, 2}), ValidationError);
  EXPECT_THROW(auc({0.1}, {1, 0}), DimensionError);
}

TEST(OracleEquivalence, RankingMetrics) {
  Rng rng(2024);
  for (int n = 0; n < 200; ++n) {
    auto r = oracle::random_list(rng);
    const std::size_t k = 1 + rng.below(20);
    ASSERT_NEAR(recall_at_k(r, k), oracle::recall(r, k), 1e-9);
    ASSERT_NEAR(ndcg_at_k(r, k), oracle::ndcg(r, k), 1e-9);
    ASSERT_NEAR(hits_at_k(r, k), oracle::hits(r, k), 1e-9);
    for (double v : {recall_at_k(r, k), ndcg_at_k(r, k)}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(OracleEquivalence, Auc) {
  Rng rng(77);
  std::vector<double> s, l;
  for (int n = 0; n < 200; ++n) {
    oracle::random_auc_instance(rng, s, l);
    ASSERT_NEAR(auc_roc(s, l), oracle::auc(s, l), 1e-9);
  }
}

TEST(Properties, MovingRelevantItemUpNeverHurts) {
  Rng rng(5);
  for (int n = 0; n < 200; ++n) {
    auto r = oracle::random_list(rng);
    const std::size_t k = 1 + rng.below(20);
    for (std::size_t pos = 1; pos < r.items.size(); ++pos) {
      if (!r.relevant.count(r.items[pos]) || r.relevant.count(r.items[pos - 1])) continue;
      auto up = r;
      std::swap(up.items[pos], up.items[pos - 1]);
      EXPECT_GE(ndcg_at_k(up, k), ndcg_at_k(r, k));
      EXPECT_GE(recall_at_k(up, k), recall_at_k(r, k));
      break;
    }
  }
}

TEST(Properties, AucScaleInvariance) {
  Rng rng(6);
  std::vector<double> s, l;
  for (int n = 0; n < 50; ++n) {
    oracle::random_auc_instance(rng, s, l);
    std::vector<double> t(s.size());
    std::transform(s.begin(), s.end(), t.begin(), [](double x) { return std::exp(3.0 * x) - 7.0; });
    EXPECT_EQ(auc_roc(s, l), auc_roc(t, l));
  }
}

TEST(MetricsCsv, RoundTrip) {
  std::vector<MetricReport> reps{{"ndcg", 10, 0.123456789012345, 42, 0}, {"auc", 0, 0.75, 10, 0}};
  const auto path = (llmkt::testing::temp_dir("metrics_csv") / "m.csv").string();
  write_metrics_csv(reps, "run", path);
  auto back = read_metrics_csv(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].metric, "ndcg");
  EXPECT_EQ(back[0].k, 10u);
  EXPECT_EQ(back[0].value, 0.123456789012345);
  EXPECT_EQ(back[1].n_users, 10u);
  EXPECT_NE(find_metric(back, "auc", 0), nullptr);
  EXPECT_EQ(find_metric(back, "auc", 10), nullptr);
}
