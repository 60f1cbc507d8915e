#pragma once

#include <algorithm>
#include <ostream>
#include <vector>

#include "diffinst/boxes.hpp"
#include "diffinst/dataset.hpp"
#include "diffinst/diffusion.hpp"
#include "diffinst/eval.hpp"
#include "diffinst/mask_head.hpp"
#include "diffinst/network.hpp"

namespace diffinst {

struct SamplerConfig {
  int steps = 1;  // 4 for the multi-step variant
  int num_candidates = 500;
  double score_threshold = 0.3;
  double renewal_threshold = 0.3;
  double eta = 0.0;  // 0 = deterministic reverse steps
  bool use_mask_nms = false;
  double nms_iou = 0.6;

  void validate(int diffusion_steps) const {
    check(steps >= 1 && steps <= diffusion_steps, "SamplerConfig: steps out of range");
    check(score_threshold >= 0 && score_threshold <= 1, "SamplerConfig: bad score threshold");
    check(renewal_threshold >= 0 && renewal_threshold <= 1,
          "SamplerConfig: bad renewal threshold");
    check(eta >= 0 && eta <= 1, "SamplerConfig: eta must be in [0,1]");
  }
};

struct Prediction {
  double score = 0;
  int class_id = 0;
  BoxCxcywh box;
  TensorF mask;  // H x W probabilities
};

using PredictionSet = std::vector<Prediction>;

inline std::vector<uint8_t> binarize_mask(const TensorF& prob, float thr = 0.5f) {
  std::vector<uint8_t> m(prob.numel());
  for (int64_t i = 0; i < prob.numel(); ++i) m[i] = prob[i] >= thr ? 1 : 0;
  return m;
}

// Replace low-confidence candidates with fresh Gaussian states.
template <typename T>
void box_renewal(ScaledBoxState<T>& state, const std::vector<double>& scores, double threshold,
                 Rng& rng) {
  check(static_cast<int>(scores.size()) == state.size(), "box_renewal: score count mismatch");
  T lim = static_cast<T>(state.scale);
  for (int i = 0; i < state.size(); ++i) {
    if (scores[i] >= threshold) continue;
    for (int j = 0; j < 4; ++j)
      state.values.at(i, j) = std::clamp(static_cast<T>(rng.normal()), -lim, lim);
  }
}

// Greedy suppression by binarized mask overlap; input must be sorted by
// descending score.
inline PredictionSet mask_nms(const PredictionSet& preds, double iou_threshold) {
  std::vector<std::vector<uint8_t>> bin;
  bin.reserve(preds.size());
  for (const auto& p : preds) bin.push_back(binarize_mask(p.mask));
  std::vector<char> keep(preds.size(), 1);
  for (size_t i = 0; i < preds.size(); ++i) {
    if (!keep[i]) continue;
    for (size_t j = i + 1; j < preds.size(); ++j) {
      if (!keep[j]) continue;
      if (mask_iou(bin[i], bin[j]) > iou_threshold) keep[j] = 0;
    }
  }
  PredictionSet out;
  for (size_t i = 0; i < preds.size(); ++i)
    if (keep[i]) out.push_back(preds[i]);
  return out;
}

// Evenly spaced reverse-time schedule from T down to 0: with s steps visit
// round(T*k/s) for k = s..1, stepping to the next entry (final target 0).
inline std::vector<int> sampling_timesteps(int T, int steps) {
  std::vector<int> ts;
  for (int k = steps; k >= 1; --k)
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(T) * k / steps)));
  return ts;
}

// Full inference for one image: encoder once, then `steps` decoder passes
// bridged by reverse diffusion jumps on the box state.
template <typename T>
PredictionSet infer(const Tensor<T>& image, const Model<T>& model, const NoiseSchedule& sched,
                    const SamplerConfig& cfg, Rng& rng) {
  cfg.validate(sched.steps);
  const ModelConfig& mc = model.cfg;

  // single encoder pass per image
  FeaturePyramid<T> pyr = backbone_forward(image, model);
  Tensor<T> mask_feat = mask_branch(pyr, model);

  Tensor<T> init = Tensor<T>::randn({cfg.num_candidates, 4}, rng);
  T lim = static_cast<T>(mc.box_scale);
  for (auto& v : init.data) v = std::clamp(v, -lim, lim);
  ScaledBoxState<T> state{std::move(init), mc.box_scale};

  std::vector<int> ts = sampling_timesteps(sched.steps, cfg.steps);
  std::vector<DecoderStageOutput<T>> stages;
  for (size_t i = 0; i < ts.size(); ++i) {
    int t = ts[i];
    int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    stages = decoder_forward(pyr, state, t, model, mc.decoder_stages);
    const auto& last = stages.back();
    state.values = ddim_step(state.values, last.state.values, t, t_prev, sched, cfg.eta, &rng);
    for (auto& v : state.values.data) v = std::clamp(v, -lim, lim);
    if (i + 1 < ts.size()) {
      std::vector<double> scores(cfg.num_candidates);
      for (int b = 0; b < cfg.num_candidates; ++b) {
        double best = 0;
        for (int c = 0; c < mc.num_classes; ++c) {
          double p = 1.0 / (1.0 + std::exp(-static_cast<double>(last.class_logits.at(b, c))));
          best = std::max(best, p);
        }
        scores[b] = best;
      }
      box_renewal(state, scores, cfg.renewal_threshold, rng);
    }
  }

  const auto& last = stages.back();
  PredictionSet preds;
  for (int b = 0; b < cfg.num_candidates; ++b) {
    double best = -1;
    int cls = 0;
    for (int c = 0; c < mc.num_classes; ++c) {
      double p = 1.0 / (1.0 + std::exp(-static_cast<double>(last.class_logits.at(b, c))));
      if (p > best) {
        best = p;
        cls = c;
      }
    }
    if (best < cfg.score_threshold) continue;
    Prediction pr;
    pr.score = best;
    pr.class_id = cls;
    pr.box = last.boxes[b];
    Tensor<T> theta({mc.filter_len()});
    for (int j = 0; j < mc.filter_len(); ++j) theta[j] = last.filters.at(b, j);
    Tensor<T> prob = apply_mask_head(mask_feat, theta, mc.topology, mc.image_height,
                                     mc.image_width);
    pr.mask = TensorF(prob.shape);
    for (int64_t j = 0; j < prob.numel(); ++j) pr.mask[j] = static_cast<float>(prob[j]);
    preds.push_back(std::move(pr));
  }
  std::stable_sort(preds.begin(), preds.end(),
                   [](const Prediction& a, const Prediction& b) { return a.score > b.score; });
  if (cfg.use_mask_nms) preds = mask_nms(preds, cfg.nms_iou);
  return preds;
}

// Structured-text prediction record for one image.
inline void write_predictions(std::ostream& os, int scene_id, const PredictionSet& preds) {
  os << "scene " << scene_id << "\n";
  os << "predictions " << preds.size() << "\n";
  char buf[160];
  for (const auto& p : preds) {
    std::snprintf(buf, sizeof(buf), "instance %.6f %d %.17g %.17g %.17g %.17g\n", p.score,
                  p.class_id, p.box.cx, p.box.cy, p.box.w, p.box.h);
    os << buf;
    os << "rle " << rle_encode(binarize_mask(p.mask)) << "\n";
  }
}

}  // namespace diffinst
