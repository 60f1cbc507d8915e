#include "diffinst/losses.hpp"

#include <gtest/gtest.h>

#include "diffinst/train.hpp"

using namespace diffinst;

namespace {

TensorD prob_map_from_mask(const std::vector<uint8_t>& m, int h, int w) {
  TensorD t({h, w});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = m[i] ? 1.0 : 0.0;
  return t;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.num_candidates = 12;
  cfg.d_model = 24;
  cfg.roi_size = 3;
  cfg.box_embed_dim = 8;
  cfg.cell_channels = 4;
  cfg.time_dim = 16;
  return cfg;
}

template <typename T>
std::vector<DecoderStageOutput<T>> const_stages(Graph<T>& g,
                                                const std::vector<BoxCxcywh>& boxes,
                                                const Tensor<T>& logits,
                                                const Tensor<T>& filters, int copies) {
  DecoderStageOutput<T> s;
  s.boxes = boxes;
  Tensor<T> bm({static_cast<int>(boxes.size()), 4});
  for (size_t i = 0; i < boxes.size(); ++i) {
    bm.at(static_cast<int>(i), 0) = static_cast<T>(boxes[i].cx);
    bm.at(static_cast<int>(i), 1) = static_cast<T>(boxes[i].cy);
    bm.at(static_cast<int>(i), 2) = static_cast<T>(boxes[i].w);
    bm.at(static_cast<int>(i), 3) = static_cast<T>(boxes[i].h);
  }
  s.boxes_id = g.constant(bm);
  s.logits_id = g.constant(logits);
  s.filters_id = g.constant(filters);
  s.class_logits = logits;
  s.filters = filters;
  return std::vector<DecoderStageOutput<T>>(copies, s);
}

}  // namespace

TEST(DiceLoss, KnownCases) {
  int h = 8, w = 8;
  std::vector<uint8_t> gt(h * w, 0);
  for (int i = 0; i < 16; ++i) gt[i] = 1;
  auto perfect = prob_map_from_mask(gt, h, w);
  EXPECT_NEAR(dice_loss(perfect, gt), 0.0, 1e-5);

  std::vector<uint8_t> disjoint(h * w, 0);
  for (int i = 16; i < 32; ++i) disjoint[i] = 1;
  auto pred = prob_map_from_mask(disjoint, h, w);
  EXPECT_NEAR(dice_loss(pred, gt), 1.0, 1e-5);

  // |A & B| = k with |A| = |B| = 2k gives 1 - 2k/4k = 0.5
  std::vector<uint8_t> a(h * w, 0), b(h * w, 0);
  for (int i = 0; i < 8; ++i) a[i] = 1;        // A: 0..7
  for (int i = 4; i < 12; ++i) b[i] = 1;       // B: 4..11, overlap 4
  EXPECT_NEAR(dice_loss(prob_map_from_mask(a, h, w), b), 0.5, 1e-5);

  // both empty: stabilized to zero loss
  std::vector<uint8_t> empty(h * w, 0);
  EXPECT_NEAR(dice_loss(prob_map_from_mask(empty, h, w), empty), 0.0, 1e-9);
}

TEST(DiceLoss, SymmetricAndBounded) {
  Rng rng(17);
  int h = 8, w = 8;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<uint8_t> a(h * w), b(h * w);
    for (auto& v : a) v = rng.uniform() < 0.4 ? 1 : 0;
    for (auto& v : b) v = rng.uniform() < 0.4 ? 1 : 0;
    double ab = dice_loss(prob_map_from_mask(a, h, w), b);
    double ba = dice_loss(prob_map_from_mask(b, h, w), a);
    EXPECT_NEAR(ab, ba, 1e-12);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
  }
}

TEST(DiceLoss, GradientMatchesFiniteDifferences) {
  // dice through the dynamic mask head w.r.t. the filter vector
  HeadTopology topo{8, {8, 8, 1}};
  Rng rng(23);
  TensorD feat = TensorD::randn({8, 16, 16}, rng);
  TensorD theta = TensorD::randn({153}, rng, 0.4);
  std::vector<uint8_t> gt(64 * 64, 0);
  for (int y = 10; y < 40; ++y)
    for (int x = 20; x < 52; ++x) gt[y * 64 + x] = 1;

  auto loss_of = [&](const TensorD& th) {
    Graph<double> g;
    auto f = g.leaf(&feat, false);
    auto t = g.leaf(&th, false);
    auto prob = apply_mask_head_g(g, f, t, topo, 64, 64);
    return static_cast<double>(g.value(dice_loss_g(g, prob, gt))[0]);
  };

  Graph<double> g;
  auto f = g.leaf(&feat, false);
  auto t = g.leaf(&theta, true);
  auto prob = apply_mask_head_g(g, f, t, topo, 64, 64);
  auto loss = dice_loss_g(g, prob, gt);
  g.backward(loss);
  auto analytic = g.grad(t);

  const double h = 1e-6;
  double worst = 0;
  for (int i = 0; i < 153; ++i) {
    TensorD th = theta;
    th[i] = theta[i] + h;
    double hi = loss_of(th);
    th[i] = theta[i] - h;
    double lo = loss_of(th);
    double numeric = (hi - lo) / (2 * h);
    double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(DetectionLoss, PerfectPredictionsNearZero) {
  Graph<double> g;
  std::vector<BoxCxcywh> gt_boxes = {{0.3, 0.3, 0.2, 0.2}, {0.7, 0.6, 0.2, 0.3}};
  GtInstances gt;
  gt.boxes = gt_boxes;
  gt.classes = {0, 1};
  std::vector<BoxCxcywh> pred = gt_boxes;
  TensorD logits({2, 3});
  logits.at(0, 0) = 20.0;
  logits.at(0, 1) = -20.0;
  logits.at(0, 2) = -20.0;
  logits.at(1, 0) = -20.0;
  logits.at(1, 1) = 20.0;
  logits.at(1, 2) = -20.0;
  TensorD filters({2, 153});
  auto stages = const_stages(g, pred, logits, filters, 1);
  auto match = match_stage(stages[0], gt, LossConfig{});
  auto det = detection_loss_g(g, stages[0], match, gt, LossConfig{});
  EXPECT_LT(g.value(det.cls)[0], 1e-3);
  EXPECT_LT(g.value(det.l1)[0], 1e-3);
  EXPECT_LT(g.value(det.giou)[0], 1e-3);
}

TEST(DetectionLoss, BackgroundOnlySceneAndWeightLinearity) {
  Graph<double> g;
  GtInstances gt;  // empty
  std::vector<BoxCxcywh> pred = {{0.4, 0.4, 0.2, 0.2}, {0.6, 0.6, 0.2, 0.2}};
  TensorD logits = TensorD::full({2, 3}, 5.0);  // confidently wrong
  TensorD filters({2, 153});
  auto stages = const_stages(g, pred, logits, filters, 1);
  auto match = match_stage(stages[0], gt, LossConfig{});
  auto det = detection_loss_g(g, stages[0], match, gt, LossConfig{});
  EXPECT_DOUBLE_EQ(g.value(det.l1)[0], 0.0);
  EXPECT_DOUBLE_EQ(g.value(det.giou)[0], 0.0);
  EXPECT_GT(g.value(det.cls)[0], 0.1);

  // det_l1 is exactly linear in w_l1
  Graph<double> g2;
  GtInstances gt2;
  gt2.boxes = {{0.5, 0.5, 0.3, 0.3}};
  gt2.classes = {2};
  std::vector<BoxCxcywh> pred2 = {{0.45, 0.52, 0.25, 0.33}};
  TensorD logits2({1, 3});
  TensorD filters2({1, 153});
  auto st = const_stages(g2, pred2, logits2, filters2, 1);
  auto m2 = match_stage(st[0], gt2, LossConfig{});
  LossConfig base, twice;
  twice.w_l1 = base.w_l1 * 2;
  auto d1 = detection_loss_g(g2, st[0], m2, gt2, base);
  auto d2 = detection_loss_g(g2, st[0], m2, gt2, twice);
  EXPECT_NEAR(g2.value(d2.l1)[0], 2.0 * g2.value(d1.l1)[0], 1e-12);
}

TEST(OverallLoss, LambdaZeroEqualsDetection) {
  Rng rng(31);
  Graph<double> g;
  GtInstances gt;
  gt.boxes = {{0.4, 0.45, 0.2, 0.25}};
  gt.classes = {1};
  std::vector<uint8_t> mask(64 * 64, 0);
  for (int y = 20; y < 36; ++y)
    for (int x = 19; x < 32; ++x) mask[y * 64 + x] = 1;
  gt.masks = {&mask};

  std::vector<BoxCxcywh> pred = {{0.42, 0.4, 0.25, 0.2}, {0.8, 0.8, 0.1, 0.1}};
  TensorD logits = TensorD::randn({2, 3}, rng);
  TensorD filters = TensorD::randn({2, 153}, rng, 0.2);
  TensorD feat = TensorD::randn({8, 16, 16}, rng);

  auto stages = const_stages(g, pred, logits, filters, 1);
  auto mf = g.constant(feat);
  LossConfig cfg;
  cfg.lambda = 0.0;
  LossReport rep;
  overall_loss_g(g, stages, gt, mf, HeadTopology{8, {8, 8, 1}}, 64, 64, cfg, &rep);
  EXPECT_NEAR(rep.total, rep.det_cls + rep.det_l1 + rep.det_giou, 1e-9);
  EXPECT_DOUBLE_EQ(rep.dice, 0.0);
}

TEST(OverallLoss, StageAdditivityAndLambdaReport) {
  Rng rng(37);
  GtInstances gt;
  gt.boxes = {{0.5, 0.5, 0.3, 0.4}};
  gt.classes = {0};
  std::vector<uint8_t> mask(64 * 64, 0);
  for (int y = 12; y < 44; ++y)
    for (int x = 16; x < 40; ++x) mask[y * 64 + x] = 1;
  gt.masks = {&mask};
  std::vector<BoxCxcywh> pred = {{0.48, 0.55, 0.28, 0.35}, {0.2, 0.2, 0.15, 0.1}};
  TensorD logits = TensorD::randn({2, 3}, rng);
  TensorD filters = TensorD::randn({2, 153}, rng, 0.2);
  TensorD feat = TensorD::randn({8, 16, 16}, rng);
  HeadTopology topo{8, {8, 8, 1}};
  LossConfig cfg;

  Graph<double> g1;
  auto one = const_stages(g1, pred, logits, filters, 1);
  LossReport r1;
  overall_loss_g(g1, one, gt, g1.constant(feat), topo, 64, 64, cfg, &r1);

  Graph<double> g2;
  auto two = const_stages(g2, pred, logits, filters, 2);
  LossReport r2;
  overall_loss_g(g2, two, gt, g2.constant(feat), topo, 64, 64, cfg, &r2);

  EXPECT_NEAR(r2.total, 2.0 * r1.total, 1e-9);
  EXPECT_DOUBLE_EQ(r1.lambda, 5.0);
  ASSERT_EQ(r2.per_stage.size(), 2u);
  EXPECT_NEAR(r2.per_stage[0].dice, r2.per_stage[1].dice, 1e-12);

  // decomposition identity: total == det components + lambda * dice
  EXPECT_NEAR(r1.total, r1.det_cls + r1.det_l1 + r1.det_giou + cfg.lambda * r1.dice, 1e-6);
  // multi-stage supervision: every stage contributes
  EXPECT_GT(r2.per_stage[0].det_cls + r2.per_stage[0].det_l1 + r2.per_stage[0].det_giou +
                r2.per_stage[0].dice,
            0.0);
  EXPECT_NEAR(r2.total - r1.total, r1.total, 1e-9);
}

TEST(TrainStep, DeterministicReports) {
  auto cfg = tiny_config();
  DatasetConfig dcfg;
  dcfg.seed = 3;
  auto scenes = generate_dataset(dcfg, 4);
  auto sched = build_schedule(50, ScheduleKind::kCosine);

  auto run = [&](int iters) {
    Rng rng(5);
    auto model = init_model<float>(cfg, rng);
    AdamW<float> opt;
    opt.cfg.lr = 1e-4;
    opt.init(model.params);
    Rng train_rng(11);
    std::vector<double> totals;
    for (int i = 0; i < iters; ++i) {
      auto rep = train_step(model, opt, scenes, sched, LossConfig{}, train_rng);
      totals.push_back(rep.total);
    }
    return totals;
  };
  auto a = run(5);
  auto b = run(5);
  EXPECT_EQ(a, b);  // bit-identical across reruns
}

TEST(TrainStep, GradientMatchesFiniteDifferencesEndToEnd) {
  auto cfg = tiny_config();
  DatasetConfig dcfg;
  dcfg.seed = 7;
  Rng scene_rng(40);
  auto scene = generate_scene(dcfg, scene_rng);
  auto sched = build_schedule(50, ScheduleKind::kCosine);
  LossConfig loss_cfg;

  Rng rng(41);
  auto model = init_model<double>(cfg, rng);
  Rng prng(42);
  auto ps = prepare_sample(scene, model, sched, /*augment=*/false, prng);

  std::vector<TensorD> grads(model.params.count());
  sample_gradients(model, ps, loss_cfg, grads);

  auto loss_value = [&]() {
    std::vector<TensorD> unused(model.params.count());
    return sample_gradients(model, ps, loss_cfg, unused).total;
  };

  // 20 randomly chosen parameters across tensors
  Rng pick(43);
  const double h = 1e-6;
  double worst = 0;
  for (int k = 0; k < 20; ++k) {
    int p = pick.uniform_int(0, model.params.count() - 1);
    int64_t idx = pick.uniform_int(0, static_cast<int>(model.params.tensors[p].numel()) - 1);
    double orig = model.params.tensors[p][idx];
    model.params.tensors[p][idx] = orig + h;
    double hi = loss_value();
    model.params.tensors[p][idx] = orig - h;
    double lo = loss_value();
    model.params.tensors[p][idx] = orig;
    double numeric = (hi - lo) / (2 * h);
    double denom = std::max({std::abs(numeric), std::abs(grads[p][idx]), 1e-6});
    worst = std::max(worst, std::abs(numeric - grads[p][idx]) / denom);
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(TrainStep, NonFiniteLossAborts) {
  auto cfg = tiny_config();
  DatasetConfig dcfg;
  auto scenes = generate_dataset(dcfg, 1);
  auto sched = build_schedule(50, ScheduleKind::kCosine);
  Rng rng(5);
  auto model = init_model<float>(cfg, rng);
  // poison a parameter
  model.params.get("dec.s0.cls.w").data[0] = std::numeric_limits<float>::quiet_NaN();
  AdamW<float> opt;
  opt.init(model.params);
  Rng train_rng(6);
  EXPECT_THROW(train_step(model, opt, scenes, sched, LossConfig{}, train_rng),
               std::runtime_error);
}
