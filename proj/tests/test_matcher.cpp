#include "diffinst/matcher.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace diffinst;

namespace {

double assignment_total(const std::vector<double>& cost, int rows, int cols,
                        const std::vector<int>& col_of_row) {
  double t = 0;
  for (int r = 0; r < rows; ++r) t += cost[static_cast<size_t>(r) * cols + col_of_row[r]];
  return t;
}

// exhaustive minimum over all injections rows -> cols
double brute_force_min(const std::vector<double>& cost, int rows, int cols) {
  std::vector<int> perm(cols);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double t = 0;
    for (int r = 0; r < rows; ++r) t += cost[static_cast<size_t>(r) * cols + perm[r]];
    best = std::min(best, t);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST(Assignment, TwoByTwoByHand) {
  std::vector<double> cost = {1, 2, 2, 1};
  auto a = solve_assignment(cost, 2, 2);
  EXPECT_EQ(a[0], 0);
  EXPECT_EQ(a[1], 1);
  EXPECT_DOUBLE_EQ(assignment_total(cost, 2, 2, a), 2.0);
}

TEST(Assignment, MatchesBruteForceOnRandomInstances) {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    int rows = rng.uniform_int(1, 6);
    int cols = rng.uniform_int(rows, 6);
    std::vector<double> cost(static_cast<size_t>(rows) * cols);
    for (auto& c : cost) c = rng.uniform(0.0, 10.0);
    auto a = solve_assignment(cost, rows, cols);
    // columns distinct
    std::vector<int> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_TRUE(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    EXPECT_NEAR(assignment_total(cost, rows, cols, a), brute_force_min(cost, rows, cols), 1e-9);
  }
}

TEST(MatchInstances, IdentityForPerfectPredictions) {
  std::vector<BoxCxcywh> gt = {{0.3, 0.3, 0.2, 0.2}, {0.7, 0.7, 0.25, 0.15}};
  std::vector<int> gt_classes = {0, 2};
  std::vector<BoxCxcywh> pred = gt;
  pred.push_back({0.5, 0.5, 0.5, 0.5});
  std::vector<std::vector<double>> probs = {
      {0.99, 0.01, 0.01}, {0.01, 0.01, 0.99}, {0.2, 0.2, 0.2}};
  auto res = match_instances(pred, probs, gt, gt_classes);
  ASSERT_EQ(res.pairs.size(), 2u);
  std::vector<std::pair<int, int>> sorted = res.pairs;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted[0], (std::pair<int, int>{0, 0}));
  EXPECT_EQ(sorted[1], (std::pair<int, int>{1, 1}));
  ASSERT_EQ(res.unmatched_predictions.size(), 1u);
  EXPECT_EQ(res.unmatched_predictions[0], 2);
}

TEST(MatchInstances, EmptyGroundtruthAllBackground) {
  std::vector<BoxCxcywh> pred(4, BoxCxcywh{0.5, 0.5, 0.2, 0.2});
  std::vector<std::vector<double>> probs(4, std::vector<double>{0.5, 0.5, 0.5});
  auto res = match_instances(pred, probs, {}, {});
  EXPECT_TRUE(res.pairs.empty());
  EXPECT_EQ(res.unmatched_predictions.size(), 4u);
}

TEST(MatchInstances, MultiplicityAssignsKPredictionsPerGt) {
  Rng rng(8);
  std::vector<BoxCxcywh> gt = {{0.4, 0.4, 0.3, 0.3}};
  std::vector<int> gt_classes = {1};
  std::vector<BoxCxcywh> pred;
  std::vector<std::vector<double>> probs;
  for (int i = 0; i < 6; ++i) {
    pred.push_back({rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()});
    probs.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  }
  MatcherWeights w;
  w.multiplicity = 3;
  auto res = match_instances(pred, probs, gt, gt_classes, w);
  EXPECT_EQ(res.pairs.size(), 3u);
  std::vector<int> preds;
  for (auto [p, g] : res.pairs) {
    EXPECT_EQ(g, 0);
    preds.push_back(p);
  }
  std::sort(preds.begin(), preds.end());
  EXPECT_TRUE(std::adjacent_find(preds.begin(), preds.end()) == preds.end());
  EXPECT_EQ(res.unmatched_predictions.size(), 3u);
}

TEST(MatchInstances, OptimalOnRandomBoxInstances) {
  Rng rng(99);
  MatcherWeights wts;
  for (int trial = 0; trial < 200; ++trial) {
    int n_gt = rng.uniform_int(1, 4);
    int n_pred = rng.uniform_int(n_gt, 6);
    std::vector<BoxCxcywh> gt, pred;
    std::vector<int> gt_classes;
    std::vector<std::vector<double>> probs;
    for (int g = 0; g < n_gt; ++g) {
      gt.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4),
                    rng.uniform(0.05, 0.4)});
      gt_classes.push_back(rng.uniform_int(0, 2));
    }
    for (int p = 0; p < n_pred; ++p) {
      pred.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4),
                      rng.uniform(0.05, 0.4)});
      probs.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    }
    auto cost = assignment_cost_matrix(pred, probs, gt, gt_classes, wts);
    auto res = match_instances(pred, probs, gt, gt_classes, wts);
    double total = 0;
    for (auto [p, g] : res.pairs) total += cost[static_cast<size_t>(g) * n_pred + p];
    EXPECT_NEAR(total, brute_force_min(cost, n_gt, n_pred), 1e-9);
  }
}
