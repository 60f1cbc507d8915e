#pragma once

#include <vector>

#include "diffinst/autodiff.hpp"
#include "diffinst/common.hpp"
#include "diffinst/dataset.hpp"
#include "diffinst/mask_head.hpp"
#include "diffinst/matcher.hpp"
#include "diffinst/network.hpp"

namespace diffinst {

struct LossConfig {
  double lambda = 5.0;  // mask loss weight
  double w_cls = 2.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  int matcher_multiplicity = 1;
  double dice_eps = 1e-6;

  MatcherWeights matcher_weights() const {
    return {w_cls, w_l1, w_giou, matcher_multiplicity};
  }
};

struct StageLoss {
  double det_cls = 0, det_l1 = 0, det_giou = 0, dice = 0;  // weighted contributions
};

struct LossReport {
  double total = 0;
  double det_cls = 0, det_l1 = 0, det_giou = 0, dice = 0;
  std::vector<StageLoss> per_stage;
  double lambda = 5.0;
  int matched = 0;

  bool finite() const {
    return std::isfinite(total) && std::isfinite(det_cls) && std::isfinite(det_l1) &&
           std::isfinite(det_giou) && std::isfinite(dice);
  }
};

// dice = 1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps); the stabilizer
// appears in both places so the empty-vs-empty case yields zero loss.
template <typename T>
typename Graph<T>::Id dice_loss_g(Graph<T>& g, typename Graph<T>::Id pred,
                                  const std::vector<uint8_t>& gt_mask, double eps = 1e-6) {
  const auto& p = g.value(pred);
  check(static_cast<size_t>(p.numel()) == gt_mask.size(), "dice_loss: shape mismatch");
  Tensor<T> gt(p.shape);
  double gt_sq = 0;
  for (int64_t i = 0; i < gt.numel(); ++i) {
    gt[i] = gt_mask[i] ? T(1) : T(0);
    gt_sq += gt_mask[i] ? 1.0 : 0.0;
  }
  auto inter = g.sum(g.mul(pred, g.constant(std::move(gt))));
  auto denom = g.affine(g.sum(g.mul(pred, pred)), 1.0, gt_sq + eps);
  auto ratio = g.div(g.affine(inter, 2.0, eps), denom);
  return g.affine(ratio, -1.0, 1.0);
}

template <typename T>
double dice_loss(const Tensor<T>& pred, const std::vector<uint8_t>& gt_mask, double eps = 1e-6) {
  Graph<T> g;
  auto p = g.leaf(&pred, false);
  return static_cast<double>(g.value(dice_loss_g(g, p, gt_mask, eps))[0]);
}

// Sigmoid focal loss over an N x C logit matrix against 0/1 targets,
// normalized by the given count.
template <typename T>
typename Graph<T>::Id focal_loss_g(Graph<T>& g, typename Graph<T>::Id logits,
                                   Tensor<T> targets, double alpha, double gamma, double norm) {
  const auto& lv = g.value(logits);
  check(lv.same_shape(targets), "focal_loss: target shape mismatch");
  auto t = g.constant(std::move(targets));
  auto p = g.sigmoid(logits);
  auto pos = g.mul(g.mul(g.pow_const(g.affine(p, -1.0, 1.0), gamma),
                         g.softplus(g.scale(logits, -1.0))),
                   t);
  auto neg = g.mul(g.mul(g.pow_const(p, gamma), g.softplus(logits)), g.affine(t, -1.0, 1.0));
  auto total = g.add(g.scale(g.sum(pos), alpha), g.scale(g.sum(neg), 1.0 - alpha));
  return g.scale(total, 1.0 / norm);
}

// Differentiable GIoU on matched rows (pred: M x 4 cxcywh in the graph,
// gt constants), averaged: mean(1 - GIoU).
template <typename T>
typename Graph<T>::Id giou_loss_g(Graph<T>& g, typename Graph<T>::Id pred_rows,
                                  const std::vector<BoxCxcywh>& gt, double norm) {
  int m = static_cast<int>(gt.size());
  check(g.value(pred_rows).dim(0) == m, "giou_loss: row mismatch");
  auto cx = g.slice_cols(pred_rows, 0, 1);
  auto cy = g.slice_cols(pred_rows, 1, 1);
  auto w = g.slice_cols(pred_rows, 2, 1);
  auto h = g.slice_cols(pred_rows, 3, 1);
  auto px1 = g.sub(cx, g.scale(w, 0.5));
  auto px2 = g.add(cx, g.scale(w, 0.5));
  auto py1 = g.sub(cy, g.scale(h, 0.5));
  auto py2 = g.add(cy, g.scale(h, 0.5));

  Tensor<T> gx1({m, 1}), gy1({m, 1}), gx2({m, 1}), gy2({m, 1}), garea({m, 1});
  for (int i = 0; i < m; ++i) {
    BoxXyxy b = to_xyxy(gt[i]);
    gx1[i] = static_cast<T>(b.x1);
    gy1[i] = static_cast<T>(b.y1);
    gx2[i] = static_cast<T>(b.x2);
    gy2[i] = static_cast<T>(b.y2);
    garea[i] = static_cast<T>(box_area(b));
  }
  auto cgx1 = g.constant(std::move(gx1)), cgy1 = g.constant(std::move(gy1));
  auto cgx2 = g.constant(std::move(gx2)), cgy2 = g.constant(std::move(gy2));

  auto iw = g.relu(g.sub(g.minimum(px2, cgx2), g.maximum(px1, cgx1)));
  auto ih = g.relu(g.sub(g.minimum(py2, cgy2), g.maximum(py1, cgy1)));
  auto inter = g.mul(iw, ih);
  auto uni = g.sub(g.add(g.mul(w, h), g.constant(std::move(garea))), inter);
  auto hw = g.sub(g.maximum(px2, cgx2), g.minimum(px1, cgx1));
  auto hh = g.sub(g.maximum(py2, cgy2), g.minimum(py1, cgy1));
  auto hull = g.mul(hw, hh);
  auto giou = g.sub(g.div(inter, uni), g.div(g.sub(hull, uni), hull));
  return g.scale(g.sum(g.affine(giou, -1.0, 1.0)), 1.0 / norm);
}

struct GtInstances {
  std::vector<BoxCxcywh> boxes;
  std::vector<int> classes;
  std::vector<const std::vector<uint8_t>*> masks;  // H*W binary

  static GtInstances from_scene(const SceneSample& s) {
    GtInstances gt;
    for (const auto& rec : s.instances) {
      gt.boxes.push_back(rec.box);
      gt.classes.push_back(rec.class_id);
      gt.masks.push_back(&rec.mask);
    }
    return gt;
  }
};

// Match one stage's predictions against groundtruth using plain values.
template <typename T>
MatchResult match_stage(const DecoderStageOutput<T>& stage, const GtInstances& gt,
                        const LossConfig& cfg) {
  int n = static_cast<int>(stage.boxes.size());
  int c = stage.class_logits.dim(1);
  std::vector<std::vector<double>> probs(n, std::vector<double>(c));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      double x = static_cast<double>(stage.class_logits.at(i, j));
      probs[i][j] = 1.0 / (1.0 + std::exp(-x));
    }
  return match_instances(stage.boxes, probs, gt.boxes, gt.classes, cfg.matcher_weights());
}

template <typename T>
struct DetectionLossIds {
  typename Graph<T>::Id cls, l1, giou;  // weighted scalars
};

// Focal classification over all candidates plus L1/GIoU over matched pairs,
// normalized by the matched count (min 1). Components come back weighted.
template <typename T>
DetectionLossIds<T> detection_loss_g(Graph<T>& g, const DecoderStageOutput<T>& stage,
                                     const MatchResult& match, const GtInstances& gt,
                                     const LossConfig& cfg) {
  int n = static_cast<int>(stage.boxes.size());
  int c = g.value(stage.logits_id).dim(1);
  int matched = static_cast<int>(match.pairs.size());
  double norm = std::max(1, matched);

  Tensor<T> targets({n, c});
  for (auto [p, gi] : match.pairs) targets.at(p, gt.classes[gi]) = T(1);
  DetectionLossIds<T> out;
  out.cls = g.scale(focal_loss_g(g, stage.logits_id, std::move(targets), cfg.focal_alpha,
                                 cfg.focal_gamma, norm),
                    cfg.w_cls);
  out.l1 = g.constant_scalar(T(0));
  out.giou = g.constant_scalar(T(0));
  if (matched > 0) {
    std::vector<int> pred_rows;
    std::vector<BoxCxcywh> gt_rows;
    for (auto [p, gi] : match.pairs) {
      pred_rows.push_back(p);
      gt_rows.push_back(gt.boxes[gi]);
    }
    auto rows = g.gather_rows(stage.boxes_id, pred_rows);
    Tensor<T> gt_mat({matched, 4});
    for (int i = 0; i < matched; ++i) {
      gt_mat.at(i, 0) = static_cast<T>(gt_rows[i].cx);
      gt_mat.at(i, 1) = static_cast<T>(gt_rows[i].cy);
      gt_mat.at(i, 2) = static_cast<T>(gt_rows[i].w);
      gt_mat.at(i, 3) = static_cast<T>(gt_rows[i].h);
    }
    out.l1 = g.scale(
        g.scale(g.sum(g.abs(g.sub(rows, g.constant(std::move(gt_mat))))), 1.0 / norm),
        cfg.w_l1);
    out.giou = g.scale(giou_loss_g(g, rows, gt_rows, norm), cfg.w_giou);
  }
  return out;
}

// Per-stage detection + mask supervision; returns the scalar total and fills
// the report. mask_feature may be -1 to skip mask supervision (lambda = 0).
template <typename T>
typename Graph<T>::Id overall_loss_g(Graph<T>& g,
                                     const std::vector<DecoderStageOutput<T>>& stages,
                                     const GtInstances& gt,
                                     typename Graph<T>::Id mask_feature,
                                     const HeadTopology& topo, int img_h, int img_w,
                                     const LossConfig& cfg, LossReport* report = nullptr) {
  check(!stages.empty(), "overall_loss: need at least one stage");
  typename Graph<T>::Id total = g.constant_scalar(T(0));
  LossReport rep;
  rep.lambda = cfg.lambda;
  for (const auto& stage : stages) {
    MatchResult match = match_stage(stage, gt, cfg);
    int matched = static_cast<int>(match.pairs.size());
    double norm = std::max(1, matched);
    rep.matched += matched;

    auto det = detection_loss_g(g, stage, match, gt, cfg);
    typename Graph<T>::Id dice = g.constant_scalar(T(0));
    if (matched > 0 && cfg.lambda != 0.0 && mask_feature >= 0) {
      typename Graph<T>::Id dsum = g.constant_scalar(T(0));
      for (auto [p, gi] : match.pairs) {
        auto theta = g.reshape(g.gather_rows(stage.filters_id, {p}), {filter_dim(topo)});
        auto prob = apply_mask_head_g(g, mask_feature, theta, topo, img_h, img_w);
        dsum = g.add(dsum, dice_loss_g(g, prob, *gt.masks[gi], cfg.dice_eps));
      }
      dice = g.scale(dsum, 1.0 / norm);
    }
    auto det_sum = g.add(det.cls, g.add(det.l1, det.giou));
    total = g.add(total, g.add(det_sum, g.scale(dice, cfg.lambda)));

    StageLoss sl;
    sl.det_cls = static_cast<double>(g.value(det.cls)[0]);
    sl.det_l1 = static_cast<double>(g.value(det.l1)[0]);
    sl.det_giou = static_cast<double>(g.value(det.giou)[0]);
    sl.dice = static_cast<double>(g.value(dice)[0]);
    rep.per_stage.push_back(sl);
    rep.det_cls += sl.det_cls;
    rep.det_l1 += sl.det_l1;
    rep.det_giou += sl.det_giou;
    rep.dice += sl.dice;
  }
  rep.total = static_cast<double>(g.value(total)[0]);
  if (report) *report = rep;
  return total;
}

// Value-only wrapper over precomputed stage outputs and a mask feature.
template <typename T>
LossReport overall_loss(const std::vector<DecoderStageOutput<T>>& stages, const GtInstances& gt,
                        const Tensor<T>& mask_feature, const HeadTopology& topo, int img_h,
                        int img_w, const LossConfig& cfg) {
  // rebuild ids as constants in a fresh graph
  Graph<T> g;
  std::vector<DecoderStageOutput<T>> local = stages;
  for (auto& s : local) {
    Tensor<T> boxes({static_cast<int>(s.boxes.size()), 4});
    for (size_t i = 0; i < s.boxes.size(); ++i) {
      boxes.at(static_cast<int>(i), 0) = static_cast<T>(s.boxes[i].cx);
      boxes.at(static_cast<int>(i), 1) = static_cast<T>(s.boxes[i].cy);
      boxes.at(static_cast<int>(i), 2) = static_cast<T>(s.boxes[i].w);
      boxes.at(static_cast<int>(i), 3) = static_cast<T>(s.boxes[i].h);
    }
    s.boxes_id = g.constant(std::move(boxes));
    s.logits_id = g.constant(s.class_logits);
    s.filters_id = g.constant(s.filters);
  }
  auto mf = g.constant(mask_feature);
  LossReport rep;
  overall_loss_g(g, local, gt, mf, topo, img_h, img_w, cfg, &rep);
  return rep;
}

}  // namespace diffinst
