#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "diffinst/boxes.hpp"
#include "diffinst/common.hpp"

namespace diffinst {

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (prediction index, groundtruth index)
  std::vector<int> unmatched_predictions;
};

struct MatcherWeights {
  double w_cls = 2.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
  int multiplicity = 1;  // predictions assigned per groundtruth
};

// Minimum-cost assignment of rows to distinct columns (rows <= cols),
// shortest-augmenting-path with potentials. cost is row-major rows x cols.
// Returns the matched column per row.
inline std::vector<int> solve_assignment(const std::vector<double>& cost, int rows, int cols) {
  check(rows >= 0 && cols >= 0 && rows <= cols, "solve_assignment: need rows <= cols");
  check(static_cast<size_t>(rows) * cols == cost.size(), "solve_assignment: bad matrix size");
  if (rows == 0) return {};
  for (double c : cost)
    if (!std::isfinite(c)) throw std::runtime_error("solve_assignment: non-finite cost entry");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> match_col(cols + 1, 0);  // 1-based; 0 = free
  std::vector<int> way(cols + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    match_col[0] = i;
    int j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      int i0 = match_col[j0], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        double cur = cost[static_cast<size_t>(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[match_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match_col[j0] != 0);
    do {
      int j1 = way[j0];
      match_col[j0] = match_col[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> col_of_row(rows, -1);
  for (int j = 1; j <= cols; ++j)
    if (match_col[j] != 0) col_of_row[match_col[j] - 1] = j - 1;
  return col_of_row;
}

// Pairwise assignment cost between predictions and groundtruth:
// w_cls * (1 - prob of the true class) + w_l1 * |box - gt|_1 + w_giou * (1 - GIoU).
inline std::vector<double> assignment_cost_matrix(
    const std::vector<BoxCxcywh>& pred_boxes, const std::vector<std::vector<double>>& pred_probs,
    const std::vector<BoxCxcywh>& gt_boxes, const std::vector<int>& gt_classes,
    const MatcherWeights& wts) {
  size_t n_gt = gt_boxes.size(), n_pred = pred_boxes.size();
  std::vector<double> cost(n_gt * n_pred);
  for (size_t g = 0; g < n_gt; ++g) {
    BoxXyxy gx = to_xyxy(gt_boxes[g]);
    for (size_t p = 0; p < n_pred; ++p) {
      const BoxCxcywh& pb = pred_boxes[p];
      const BoxCxcywh& gb = gt_boxes[g];
      double l1 = std::abs(pb.cx - gb.cx) + std::abs(pb.cy - gb.cy) + std::abs(pb.w - gb.w) +
                  std::abs(pb.h - gb.h);
      double giou = box_giou(to_xyxy(pb), gx);
      double prob = pred_probs[p][gt_classes[g]];
      cost[g * n_pred + p] =
          wts.w_cls * (1.0 - prob) + wts.w_l1 * l1 + wts.w_giou * (1.0 - giou);
    }
  }
  return cost;
}

// One-to-one (or top-k with multiplicity > 1) matching; every groundtruth is
// assigned, remaining predictions are background.
inline MatchResult match_instances(const std::vector<BoxCxcywh>& pred_boxes,
                                   const std::vector<std::vector<double>>& pred_probs,
                                   const std::vector<BoxCxcywh>& gt_boxes,
                                   const std::vector<int>& gt_classes,
                                   const MatcherWeights& wts = {}) {
  int n_pred = static_cast<int>(pred_boxes.size());
  int n_gt = static_cast<int>(gt_boxes.size());
  int k = std::max(1, wts.multiplicity);
  MatchResult res;
  if (n_gt == 0) {
    for (int p = 0; p < n_pred; ++p) res.unmatched_predictions.push_back(p);
    return res;
  }
  check(n_gt * k <= n_pred, "match_instances: more groundtruth slots than predictions");
  std::vector<double> cost = assignment_cost_matrix(pred_boxes, pred_probs, gt_boxes, gt_classes, wts);
  std::vector<double> rows;  // gt rows replicated k times
  rows.reserve(static_cast<size_t>(n_gt) * k * n_pred);
  for (int g = 0; g < n_gt; ++g)
    for (int r = 0; r < k; ++r)
      rows.insert(rows.end(), cost.begin() + static_cast<size_t>(g) * n_pred,
                  cost.begin() + static_cast<size_t>(g + 1) * n_pred);
  auto col_of_row = solve_assignment(rows, n_gt * k, n_pred);
  std::vector<char> matched(n_pred, 0);
  for (int row = 0; row < n_gt * k; ++row) {
    int p = col_of_row[row];
    res.pairs.emplace_back(p, row / k);
    matched[p] = 1;
  }
  for (int p = 0; p < n_pred; ++p)
    if (!matched[p]) res.unmatched_predictions.push_back(p);
  return res;
}

}  // namespace diffinst
