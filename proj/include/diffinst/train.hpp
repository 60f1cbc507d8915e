#pragma once

#include <cmath>
#include <thread>
#include <vector>

#include "diffinst/common.hpp"
#include "diffinst/dataset.hpp"
#include "diffinst/diffusion.hpp"
#include "diffinst/losses.hpp"
#include "diffinst/network.hpp"

namespace diffinst {

struct OptimizerConfig {
  double lr = 2.5e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;
  int warmup_iters = 0;
  int iterations = 20000;
  int batch_size = 8;
};

// Decoupled weight decay; moments stored alongside the parameters in
// creation order.
template <typename T>
struct AdamW {
  OptimizerConfig cfg;
  int64_t step_count = 0;
  std::vector<Tensor<T>> m, v;

  void init(const Params<T>& params) {
    m.clear();
    v.clear();
    for (const auto& t : params.tensors) {
      m.push_back(Tensor<T>::zeros(t.shape));
      v.push_back(Tensor<T>::zeros(t.shape));
    }
  }

  double current_lr() const {
    if (cfg.warmup_iters > 0 && step_count < cfg.warmup_iters)
      return cfg.lr * static_cast<double>(step_count + 1) / cfg.warmup_iters;
    return cfg.lr;
  }

  // returns the applied learning rate
  double apply(Params<T>& params, std::vector<Tensor<T>>& grads) {
    check(grads.size() == params.tensors.size(), "AdamW: gradient count mismatch");
    double norm_sq = 0.0;
    for (const auto& gt : grads)
      for (T v2 : gt.data) norm_sq += static_cast<double>(v2) * static_cast<double>(v2);
    double scale = 1.0;
    double norm = std::sqrt(norm_sq);
    if (cfg.clip_norm > 0 && norm > cfg.clip_norm) scale = cfg.clip_norm / norm;

    double lr = current_lr();
    ++step_count;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
    for (size_t p = 0; p < grads.size(); ++p) {
      auto& theta = params.tensors[p];
      for (int64_t i = 0; i < theta.numel(); ++i) {
        double gv = static_cast<double>(grads[p][i]) * scale;
        double mv = cfg.beta1 * static_cast<double>(m[p][i]) + (1 - cfg.beta1) * gv;
        double vv = cfg.beta2 * static_cast<double>(v[p][i]) + (1 - cfg.beta2) * gv * gv;
        m[p][i] = static_cast<T>(mv);
        v[p][i] = static_cast<T>(vv);
        double update = (mv / bc1) / (std::sqrt(vv / bc2) + cfg.eps);
        double decayed = static_cast<double>(theta[i]) * (1.0 - lr * cfg.weight_decay);
        theta[i] = static_cast<T>(decayed - lr * update);
      }
    }
    return lr;
  }
};

// Inputs for one sample of a training batch, prepared up front so gradient
// workers never touch the rng.
template <typename T>
struct PreparedSample {
  SceneSample scene;
  Tensor<T> image;  // scene image in the training scalar type
  int t = 1;
  ScaledBoxState<T> state;
  GtInstances gt;  // views into scene.instances
};

template <typename T>
PreparedSample<T> prepare_sample(const SceneSample& raw, const Model<T>& model,
                                 const NoiseSchedule& sched, bool augment_data, Rng& rng) {
  PreparedSample<T> ps;
  ps.scene = augment_data ? augment(raw, rng) : raw;
  ps.image = Tensor<T>(ps.scene.image.shape);
  for (int64_t i = 0; i < ps.image.numel(); ++i)
    ps.image[i] = static_cast<T>(ps.scene.image[i]);
  std::vector<BoxCxcywh> gt_boxes;
  for (const auto& rec : ps.scene.instances) gt_boxes.push_back(rec.box);
  BoxSet padded = pad_gt_boxes(gt_boxes, model.cfg.num_candidates, rng, model.cfg.box_scale);
  ps.t = rng.uniform_int(1, sched.steps);
  Tensor<T> eps = Tensor<T>::randn({padded.size(), 4}, rng);
  ps.state = corrupt_boxes(padded, ps.t, sched, model.cfg.box_scale, eps);
  ps.gt = GtInstances::from_scene(ps.scene);
  return ps;
}

// Forward + backward for one sample; grads holds one tensor per parameter.
template <typename T>
LossReport sample_gradients(const Model<T>& model, const PreparedSample<T>& ps,
                            const LossConfig& loss_cfg, std::vector<Tensor<T>>& grads) {
  Graph<T> g;
  g.reserve(4096);
  std::vector<typename Graph<T>::Id> leaf_ids(model.params.count());
  for (int i = 0; i < model.params.count(); ++i)
    leaf_ids[i] = g.leaf(&model.params.tensors[i], true);

  auto image = g.leaf(&ps.image, false);
  auto pyr = backbone_forward_g(g, image, model);
  auto mask_feat = mask_branch_g(g, pyr, model);
  auto stages = decoder_forward_g(g, pyr, ps.state, ps.t, model, model.cfg.decoder_stages);

  LossReport rep;
  auto total = overall_loss_g(g, stages, ps.gt, mask_feat, model.cfg.topology,
                              ps.scene.image.dim(1), ps.scene.image.dim(2), loss_cfg, &rep);
  g.backward(total);
  for (int i = 0; i < model.params.count(); ++i) grads[i] = g.grad(leaf_ids[i]);
  return rep;
}

// One optimization step over a batch. Per-sample gradients may be computed
// on worker threads; accumulation runs on the caller thread in sample order
// so results do not depend on thread count.
template <typename T>
LossReport train_step(Model<T>& model, AdamW<T>& opt, const std::vector<SceneSample>& batch,
                      const NoiseSchedule& sched, const LossConfig& loss_cfg, Rng& rng,
                      bool augment_data = true, int num_threads = 0) {
  check(!batch.empty(), "train_step: empty batch");
  int b = static_cast<int>(batch.size());
  std::vector<PreparedSample<T>> prepared;
  prepared.reserve(b);
  for (const auto& s : batch)
    prepared.push_back(prepare_sample(s, model, sched, augment_data, rng));

  if (num_threads <= 0)
    num_threads = std::max(1u, std::thread::hardware_concurrency());
  num_threads = std::min(num_threads, b);

  std::vector<std::vector<Tensor<T>>> sample_grads(b);
  std::vector<LossReport> sample_reports(b);
  for (auto& sg : sample_grads) sg.resize(model.params.count());

  std::vector<std::exception_ptr> worker_errors(num_threads);
  auto worker = [&](int w) {
    try {
      for (int i = w; i < b; i += num_threads)
        sample_reports[i] = sample_gradients(model, prepared[i], loss_cfg, sample_grads[i]);
    } catch (...) {
      worker_errors[w] = std::current_exception();
    }
  };
  if (num_threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < num_threads; ++w) threads.emplace_back(worker, w);
    for (auto& th : threads) th.join();
  }
  for (auto& err : worker_errors)
    if (err) {
      try {
        std::rethrow_exception(err);
      } catch (const std::exception& e) {
        std::string ts;
        for (const auto& ps : prepared) ts += std::to_string(ps.t) + " ";
        throw std::runtime_error(strprintf("train_step: sample failed (step %lld, t=[%s]): %s",
                                           static_cast<long long>(opt.step_count), ts.c_str(),
                                           e.what()));
      }
    }

  std::vector<Tensor<T>> grads;
  grads.reserve(model.params.count());
  for (int p = 0; p < model.params.count(); ++p)
    grads.push_back(Tensor<T>::zeros(model.params.tensors[p].shape));
  for (int i = 0; i < b; ++i)
    for (int p = 0; p < model.params.count(); ++p)
      for (int64_t k = 0; k < grads[p].numel(); ++k)
        grads[p][k] += sample_grads[i][p][k] / static_cast<T>(b);

  LossReport rep;
  rep.lambda = loss_cfg.lambda;
  for (int i = 0; i < b; ++i) {
    const auto& r = sample_reports[i];
    rep.total += r.total / b;
    rep.det_cls += r.det_cls / b;
    rep.det_l1 += r.det_l1 / b;
    rep.det_giou += r.det_giou / b;
    rep.dice += r.dice / b;
    rep.matched += r.matched;
    if (rep.per_stage.size() < r.per_stage.size()) rep.per_stage.resize(r.per_stage.size());
    for (size_t s = 0; s < r.per_stage.size(); ++s) {
      rep.per_stage[s].det_cls += r.per_stage[s].det_cls / b;
      rep.per_stage[s].det_l1 += r.per_stage[s].det_l1 / b;
      rep.per_stage[s].det_giou += r.per_stage[s].det_giou / b;
      rep.per_stage[s].dice += r.per_stage[s].dice / b;
    }
  }
  if (!rep.finite()) {
    std::string ts;
    for (const auto& ps : prepared) ts += std::to_string(ps.t) + " ";
    throw std::runtime_error(strprintf(
        "train_step: non-finite loss (step %lld): total=%g cls=%g l1=%g giou=%g dice=%g, t=[%s]",
        static_cast<long long>(opt.step_count), rep.total, rep.det_cls, rep.det_l1, rep.det_giou,
        rep.dice, ts.c_str()));
  }
  opt.apply(model.params, grads);
  return rep;
}

}  // namespace diffinst  