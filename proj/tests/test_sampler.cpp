#include "diffinst/sampler.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace diffinst;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.num_candidates = 24;
  cfg.d_model = 24;
  cfg.roi_size = 3;
  cfg.box_embed_dim = 8;
  cfg.cell_channels = 4;
  cfg.time_dim = 16;
  return cfg;
}

TensorF rect_mask_prob(int h, int w, int x0, int y0, int x1, int y1) {
  TensorF m({h, w});
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) m.at(y, x) = 1.0f;
  return m;
}

}  // namespace

TEST(SamplingTimesteps, EvenlySpacedStrictlyDecreasing) {
  auto t1 = sampling_timesteps(1000, 1);
  EXPECT_EQ(t1, (std::vector<int>{1000}));
  auto t4 = sampling_timesteps(1000, 4);
  EXPECT_EQ(t4, (std::vector<int>{1000, 750, 500, 250}));
  for (size_t i = 1; i < t4.size(); ++i) EXPECT_LT(t4[i], t4[i - 1]);
}

TEST(BoxRenewal, ThresholdBehaviour) {
  Rng rng(3);
  Tensor<float> vals = Tensor<float>::randn({6, 4}, rng);
  ScaledBoxState<float> state{vals, 2.0};

  // all above threshold: untouched
  auto copy = state;
  Rng r2(9);
  box_renewal(copy, std::vector<double>(6, 0.9), 0.3, r2);
  EXPECT_EQ(copy.values.data, state.values.data);

  // all below: every row resampled (and clamped)
  auto all = state;
  Rng r3(10);
  box_renewal(all, std::vector<double>(6, 0.1), 0.3, r3);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 4; ++j) {
      EXPECT_NE(all.values.at(i, j), state.values.at(i, j));
      EXPECT_LE(std::abs(all.values.at(i, j)), 2.0f);
    }

  // mixed with a fixed seed: deterministic replacements
  auto m1 = state, m2 = state;
  std::vector<double> mixed = {0.9, 0.1, 0.5, 0.2, 0.8, 0.05};
  Rng r4(11), r5(11);
  box_renewal(m1, mixed, 0.3, r4);
  box_renewal(m2, mixed, 0.3, r5);
  EXPECT_EQ(m1.values.data, m2.values.data);
  EXPECT_EQ(m1.values.at(0, 0), state.values.at(0, 0));  // kept row
  EXPECT_NE(m1.values.at(1, 0), state.values.at(1, 0));  // renewed row
}

TEST(MaskNms, DuplicateAndDisjointAndIdempotent) {
  PredictionSet preds;
  Prediction a;
  a.score = 0.9;
  a.class_id = 0;
  a.mask = rect_mask_prob(16, 16, 2, 2, 8, 8);
  Prediction b = a;
  b.score = 0.8;  // identical mask, lower score
  Prediction c;
  c.score = 0.7;
  c.class_id = 1;
  c.mask = rect_mask_prob(16, 16, 10, 10, 14, 14);
  preds = {a, b, c};

  auto kept = mask_nms(preds, 0.6);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_DOUBLE_EQ(kept[0].score, 0.9);
  EXPECT_DOUBLE_EQ(kept[1].score, 0.7);

  auto again = mask_nms(kept, 0.6);
  ASSERT_EQ(again.size(), kept.size());
  for (size_t i = 0; i < kept.size(); ++i) EXPECT_DOUBLE_EQ(again[i].score, kept[i].score);
}

TEST(Infer, StructureSinglePassAndDeterminism) {
  Rng rng(21);
  auto cfg = tiny_config();
  auto model = init_model<float>(cfg, rng);
  auto sched = build_schedule(100, ScheduleKind::kCosine);
  TensorF img({3, 64, 64});
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());

  SamplerConfig sc;
  sc.num_candidates = cfg.num_candidates;
  sc.steps = 1;
  sc.score_threshold = 0.0;  // untrained model: keep everything

  backbone_call_count() = 0;
  mask_branch_call_count() = 0;
  Rng r1(5);
  auto preds = infer(img, model, sched, sc, r1);
  EXPECT_EQ(backbone_call_count(), 1);
  EXPECT_EQ(mask_branch_call_count(), 1);
  EXPECT_LE(static_cast<int>(preds.size()), sc.num_candidates);
  for (size_t i = 1; i < preds.size(); ++i) EXPECT_GE(preds[i - 1].score, preds[i].score);
  for (const auto& p : preds) {
    EXPECT_GE(p.score, 0.0);
    EXPECT_LE(p.score, 1.0);
    EXPECT_GE(p.box.cx, 0.0);
    EXPECT_LE(p.box.cx, 1.0);
    for (float v : p.mask.data) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }

  // multi-step: encoder still runs exactly once per call
  SamplerConfig sc4 = sc;
  sc4.steps = 4;
  backbone_call_count() = 0;
  mask_branch_call_count() = 0;
  Rng r4(5);
  auto preds4 = infer(img, model, sched, sc4, r4);
  EXPECT_EQ(backbone_call_count(), 1);
  EXPECT_EQ(mask_branch_call_count(), 1);

  // eta = 0, fixed seed: bit-identical prediction sets
  Rng ra(5), rb(5);
  auto pa = infer(img, model, sched, sc, ra);
  auto pb = infer(img, model, sched, sc, rb);
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].score, pb[i].score);
    EXPECT_EQ(pa[i].class_id, pb[i].class_id);
    EXPECT_EQ(pa[i].mask.data, pb[i].mask.data);
  }
}

TEST(Infer, RejectsBadConfig) {
  SamplerConfig sc;
  sc.steps = 0;
  EXPECT_THROW(sc.validate(100), std::invalid_argument);
  SamplerConfig sc2;
  sc2.eta = 2.0;
  EXPECT_THROW(sc2.validate(100), std::invalid_argument);
}

TEST(PredictionDump, FormatRoundTrip) {
  PredictionSet preds;
  Prediction p;
  p.score = 0.75;
  p.class_id = 2;
  p.box = {0.5, 0.5, 0.25, 0.25};
  p.mask = rect_mask_prob(8, 8, 1, 1, 3, 3);
  preds.push_back(p);
  std::ostringstream os;
  write_predictions(os, 17, preds);
  std::string text = os.str();
  EXPECT_NE(text.find("scene 17"), std::string::npos);
  EXPECT_NE(text.find("predictions 1"), std::string::npos);
  EXPECT_NE(text.find("instance 0.750000 2"), std::string::npos);
  // rle decodes back to the binarized mask
  auto pos = text.find("rle ");
  ASSERT_NE(pos, std::string::npos);
  auto line_end = text.find('\n', pos);
  auto rle = text.substr(pos + 4, line_end - pos - 4);
  EXPECT_EQ(rle_decode(rle, 64), binarize_mask(p.mask));
}
