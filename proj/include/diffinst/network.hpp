#pragma once

#include <atomic>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffinst/autodiff.hpp"
#include "diffinst/boxes.hpp"
#include "diffinst/common.hpp"
#include "diffinst/diffusion.hpp"
#include "diffinst/mask_head.hpp"
#include "diffinst/rng.hpp"
#include "diffinst/tensor.hpp"

namespace diffinst {

struct ModelConfig {
  int image_height = 64;
  int image_width = 64;
  int num_classes = 3;
  int pyramid_channels = 64;
  int mask_channels = 8;
  HeadTopology topology{8, {8, 8, 1}};
  int decoder_stages = 4;
  int num_candidates = 500;  // N
  int d_model = 128;
  int roi_size = 5;
  int time_dim = 64;
  int box_embed_dim = 32;
  int cell_channels = 8;
  double box_scale = 2.0;

  int filter_len() const { return filter_dim(topology); }

  void validate() const {
    check(image_height % 32 == 0 && image_width % 32 == 0,
          "ModelConfig: image size must be a multiple of 32");
    check(topology.in_channels == mask_channels,
          "ModelConfig: topology.in_channels must equal mask_channels");
    check(decoder_stages >= 1, "ModelConfig: decoder_stages must be >= 1");
    check(num_candidates >= 1, "ModelConfig: num_candidates must be >= 1");
    check(time_dim % 2 == 0, "ModelConfig: time_dim must be even");
  }
};

// Named parameter tensors with stable creation order for checkpoints.
template <typename T>
struct Params {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;
  std::unordered_map<std::string, int> index;

  Tensor<T>& add(const std::string& name, std::vector<int> shape) {
    check(index.find(name) == index.end(), "Params: duplicate name " + name);
    index[name] = static_cast<int>(tensors.size());
    names.push_back(name);
    tensors.emplace_back(std::move(shape));
    return tensors.back();
  }

  Tensor<T>& get(const std::string& name) {
    auto it = index.find(name);
    check(it != index.end(), "Params: unknown name " + name);
    return tensors[it->second];
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index.find(name);
    check(it != index.end(), "Params: unknown name " + name);
    return tensors[it->second];
  }

  int count() const { return static_cast<int>(tensors.size()); }
  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }
  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.all_finite()) return false;
    return true;
  }
};

// encoder single-pass instrumentation
inline std::atomic<long>& backbone_call_count() {
  static std::atomic<long> n{0};
  return n;
}
inline std::atomic<long>& mask_branch_call_count() {
  static std::atomic<long> n{0};
  return n;
}

template <typename T>
struct Model {
  ModelConfig cfg;
  Params<T> params;
};

namespace netinit {

template <typename T>
void he_normal(Tensor<T>& t, int fan_in, Rng& rng, double gain = 2.0) {
  double stddev = std::sqrt(gain / fan_in);
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
}

}  // namespace netinit

template <typename T>
Model<T> init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  auto& p = m.params;
  int ch = cfg.pyramid_channels;

  auto conv = [&](const std::string& name, int out, int in, int k, bool zero = false) {
    auto& w = p.add(name + ".w", {out, in, k, k});
    if (!zero) netinit::he_normal(w, in * k * k, rng);
    p.add(name + ".b", {out});
  };
  auto dense = [&](const std::string& name, int in, int out, double stddev = -1.0) {
    auto& w = p.add(name + ".w", {in, out});
    if (stddev < 0)
      netinit::he_normal(w, in, rng);
    else
      for (auto& v : w.data) v = static_cast<T>(rng.normal() * stddev);
    p.add(name + ".b", {out});
  };

  // backbone: stem at stride 2, then four stages (stride-2 conv + stride-1
  // conv each) producing strides 4/8/16/32
  conv("backbone.stem", 32, 3, 3);
  int stage_ch[5] = {32, 32, 64, 64, 64};
  for (int s = 1; s <= 4; ++s) {
    conv(strprintf("backbone.s%d.conv1", s), stage_ch[s], stage_ch[s - 1], 3);
    conv(strprintf("backbone.s%d.conv2", s), stage_ch[s], stage_ch[s], 3);
  }

  // feature pyramid: laterals from C3/C4/C5 plus 3x3 output smoothing
  int cs[3] = {64, 64, 64};
  for (int l = 0; l < 3; ++l) {
    conv(strprintf("fpn.lat%d", l + 3), ch, cs[l], 1);
    conv(strprintf("fpn.out%d", l + 3), ch, ch, 3);
  }

  // mask branch: project, fuse at stride 8, refine, lift to stride 4
  int mb = 32;
  for (int l = 0; l < 3; ++l) conv(strprintf("mask.proj%d", l + 3), mb, ch, 1);
  conv("mask.refine1", mb, mb, 3);
  conv("mask.refine2", mb, mb, 3);
  conv("mask.up_refine", mb, mb, 3);
  conv("mask.out", cfg.mask_channels, mb, 1);

  // decoder stages
  int cells = cfg.roi_size * cfg.roi_size;
  double cls_prior_bias = -std::log((1.0 - 0.01) / 0.01);  // focal-style prior
  for (int s = 0; s < cfg.decoder_stages; ++s) {
    std::string base = strprintf("dec.s%d", s);
    dense(base + ".cell", ch, cfg.cell_channels);
    dense(base + ".box", 4, cfg.box_embed_dim);
    dense(base + ".time", cfg.time_dim, cfg.d_model);
    dense(base + ".fuse", cells * cfg.cell_channels + cfg.box_embed_dim, cfg.d_model);
    dense(base + ".mlp", cfg.d_model, cfg.d_model);
    dense(base + ".cls", cfg.d_model, cfg.num_classes);
    auto& cb = p.get(base + ".cls.b");
    for (auto& v : cb.data) v = static_cast<T>(cls_prior_bias);
    dense(base + ".delta", cfg.d_model, 4, 0.0);  // identity refinement at start
    dense(base + ".eta", cfg.d_model, cfg.filter_len(), 0.01);
  }
  return m;
}

// ---- forward passes ----

template <typename T>
struct PyramidIds {
  typename Graph<T>::Id p3, p4, p5;
};

template <typename T>
struct FeaturePyramid {
  Tensor<T> p3, p4, p5;  // ch x H/8 x W/8, ch x H/16 x W/16, ch x H/32 x W/32
};

namespace netdetail {

template <typename T>
typename Graph<T>::Id conv_relu(Graph<T>& g, const Model<T>& m, typename Graph<T>::Id x,
                                const std::string& name, int stride, int pad,
                                bool activate = true) {
  auto w = g.leaf(&m.params.get(name + ".w"), true);
  auto b = g.leaf(&m.params.get(name + ".b"), true);
  auto y = g.conv2d(x, w, b, stride, pad);
  return activate ? g.relu(y) : y;
}

template <typename T>
typename Graph<T>::Id dense_t(Graph<T>& g, const Model<T>& m, typename Graph<T>::Id x,
                              const std::string& name) {
  auto w = g.leaf(&m.params.get(name + ".w"), true);
  auto b = g.leaf(&m.params.get(name + ".b"), true);
  return g.linear(x, w, b);
}

}  // namespace netdetail

template <typename T>
PyramidIds<T> backbone_forward_g(Graph<T>& g, typename Graph<T>::Id image, const Model<T>& m) {
  const auto& img = g.value(image);
  check(img.ndim() == 3 && img.dim(0) == 3, "backbone: image must be 3xHxW");
  check(img.dim(1) % 32 == 0 && img.dim(2) % 32 == 0,
        "backbone: image size must be a multiple of 32");
  backbone_call_count()++;

  using netdetail::conv_relu;
  auto x = conv_relu(g, m, image, "backbone.stem", 2, 1);
  typename Graph<T>::Id c[5];
  for (int s = 1; s <= 4; ++s) {
    x = conv_relu(g, m, x, strprintf("backbone.s%d.conv1", s), 2, 1);
    x = conv_relu(g, m, x, strprintf("backbone.s%d.conv2", s), 1, 1);
    c[s] = x;
  }
  // laterals + top-down sum, then smoothing
  auto lat5 = conv_relu(g, m, c[4], "fpn.lat5", 1, 0, false);
  auto lat4 = conv_relu(g, m, c[3], "fpn.lat4", 1, 0, false);
  auto lat3 = conv_relu(g, m, c[2], "fpn.lat3", 1, 0, false);
  auto td4 = g.add(lat4, g.upsample_bilinear(lat5, 2));
  auto td3 = g.add(lat3, g.upsample_bilinear(td4, 2));
  PyramidIds<T> pyr;
  pyr.p5 = conv_relu(g, m, lat5, "fpn.out5", 1, 1, false);
  pyr.p4 = conv_relu(g, m, td4, "fpn.out4", 1, 1, false);
  pyr.p3 = conv_relu(g, m, td3, "fpn.out3", 1, 1, false);
  return pyr;
}

template <typename T>
typename Graph<T>::Id mask_branch_g(Graph<T>& g, const PyramidIds<T>& pyr, const Model<T>& m) {
  mask_branch_call_count()++;
  using netdetail::conv_relu;
  auto f3 = conv_relu(g, m, pyr.p3, "mask.proj3", 1, 0, false);
  auto f4 = conv_relu(g, m, pyr.p4, "mask.proj4", 1, 0, false);
  auto f5 = conv_relu(g, m, pyr.p5, "mask.proj5", 1, 0, false);
  auto fused = g.relu(g.add(f3, g.add(g.upsample_bilinear(f4, 2), g.upsample_bilinear(f5, 4))));
  auto r = conv_relu(g, m, fused, "mask.refine1", 1, 1);
  r = conv_relu(g, m, r, "mask.refine2", 1, 1);
  auto up = g.upsample_bilinear(r, 2);
  up = conv_relu(g, m, up, "mask.up_refine", 1, 1);
  return conv_relu(g, m, up, "mask.out", 1, 0, false);
}

// pyramid level per box by scale: small boxes pool from the finest level
inline int roi_level_for_box(const BoxCxcywh& b, int image_min_side) {
  double side = std::sqrt(std::max(1e-8, b.w * b.h)) * image_min_side;
  if (side <= 16.0) return 0;
  if (side <= 32.0) return 1;
  return 2;
}

template <typename T>
struct DecoderStageOutput {
  typename Graph<T>::Id boxes_id = -1;    // N x 4 normalized cxcywh
  typename Graph<T>::Id logits_id = -1;   // N x C
  typename Graph<T>::Id filters_id = -1;  // N x d
  std::vector<BoxCxcywh> boxes;           // refined boxes (values)
  Tensor<T> class_logits;                 // values
  Tensor<T> filters;                      // values
  ScaledBoxState<T> state;                // refined boxes in signed space
};

constexpr double kMinBoxSide = 0.01;

// One full decoder pass over all stages. The state (and each stage's refined
// boxes) enter the next stage as constants; gradients reach parameters
// through RoI features, embeddings and heads, stage by stage.
template <typename T>
std::vector<DecoderStageOutput<T>> decoder_forward_g(Graph<T>& g, const PyramidIds<T>& pyr,
                                                     const ScaledBoxState<T>& state, int t,
                                                     const Model<T>& m, int stages) {
  check(stages >= 1, "decoder: stages must be >= 1");
  check(t >= 0, "decoder: t must be >= 0");
  const ModelConfig& cfg = m.cfg;
  int n = state.size();
  int R = cfg.roi_size;
  int C = cfg.pyramid_channels;

  // time conditioning, shared by all stages
  TimeEmbedding temb = time_embedding(t, cfg.time_dim);
  Tensor<T> temb_t({1, cfg.time_dim});
  for (int i = 0; i < cfg.time_dim; ++i) temb_t[i] = static_cast<T>(temb.values[i]);
  auto temb_id = g.constant(std::move(temb_t));

  std::vector<BoxCxcywh> boxes = boxes_from_state(state);
  for (auto& b : boxes) {
    b.w = std::max(b.w, kMinBoxSide);
    b.h = std::max(b.h, kMinBoxSide);
  }

  std::vector<DecoderStageOutput<T>> out;
  int min_side = std::min(cfg.image_height, cfg.image_width);
  for (int s = 0; s < stages; ++s) {
    std::string base = strprintf("dec.s%d", std::min(s, cfg.decoder_stages - 1));
    std::vector<BoxXyxy> xyxy(n);
    std::vector<int> levels(n);
    Tensor<T> box_in({n, 4});
    for (int i = 0; i < n; ++i) {
      xyxy[i] = to_xyxy(boxes[i]);
      levels[i] = roi_level_for_box(boxes[i], min_side);
      box_in.at(i, 0) = static_cast<T>(boxes[i].cx);
      box_in.at(i, 1) = static_cast<T>(boxes[i].cy);
      box_in.at(i, 2) = static_cast<T>(boxes[i].w);
      box_in.at(i, 3) = static_cast<T>(boxes[i].h);
    }
    auto box_const = g.constant(box_in);

    auto roi = g.roi_align(pyr.p3, pyr.p4, pyr.p5, xyxy, levels, R, /*cell_major=*/true);
    auto cells = g.relu(netdetail::dense_t(g, m, g.reshape(roi, {n * R * R, C}), base + ".cell"));
    auto box_emb = g.relu(netdetail::dense_t(g, m, box_const, base + ".box"));
    auto feats = g.concat_cols({g.reshape(cells, {n, R * R * cfg.cell_channels}), box_emb});
    auto time_shift = g.reshape(netdetail::dense_t(g, m, temb_id, base + ".time"),
                                {cfg.d_model});
    auto h = g.relu(g.add_rowvec(netdetail::dense_t(g, m, feats, base + ".fuse"), time_shift));
    h = g.relu(netdetail::dense_t(g, m, h, base + ".mlp"));

    auto logits = netdetail::dense_t(g, m, h, base + ".cls");
    auto deltas = netdetail::dense_t(g, m, h, base + ".delta");
    auto filters = netdetail::dense_t(g, m, h, base + ".eta");

    // apply clamped deltas: shift relative to size, log-scale for extent
    auto dx = g.clamp(g.slice_cols(deltas, 0, 1), -2.0, 2.0);
    auto dy = g.clamp(g.slice_cols(deltas, 1, 1), -2.0, 2.0);
    auto dw = g.clamp(g.slice_cols(deltas, 2, 1), -3.0, 3.0);
    auto dh = g.clamp(g.slice_cols(deltas, 3, 1), -3.0, 3.0);
    auto cx0 = g.slice_cols(box_const, 0, 1);
    auto cy0 = g.slice_cols(box_const, 1, 1);
    auto w0 = g.slice_cols(box_const, 2, 1);
    auto h0 = g.slice_cols(box_const, 3, 1);
    auto cx = g.clamp(g.add(cx0, g.mul(dx, w0)), 0.0, 1.0);
    auto cy = g.clamp(g.add(cy0, g.mul(dy, h0)), 0.0, 1.0);
    auto bw = g.clamp(g.mul(w0, g.exp(dw)), kMinBoxSide, 1.0);
    auto bh = g.clamp(g.mul(h0, g.exp(dh)), kMinBoxSide, 1.0);
    auto refined = g.concat_cols({cx, cy, bw, bh});

    DecoderStageOutput<T> stage;
    stage.boxes_id = refined;
    stage.logits_id = logits;
    stage.filters_id = filters;
    stage.class_logits = g.value(logits);
    stage.filters = g.value(filters);
    const auto& rv = g.value(refined);
    stage.boxes.resize(n);
    for (int i = 0; i < n; ++i)
      stage.boxes[i] = {static_cast<double>(rv.at(i, 0)), static_cast<double>(rv.at(i, 1)),
                        static_cast<double>(rv.at(i, 2)), static_cast<double>(rv.at(i, 3))};
    stage.state = state_from_boxes<T>(stage.boxes, state.scale);
    boxes = stage.boxes;
    out.push_back(std::move(stage));
  }
  return out;
}

// ---- plain wrappers (no gradients) ----

template <typename T>
FeaturePyramid<T> backbone_forward(const Tensor<T>& image, const Model<T>& m) {
  Graph<T> g;
  auto img = g.leaf(&image, false);
  auto pyr = backbone_forward_g(g, img, m);
  return {g.value(pyr.p3), g.value(pyr.p4), g.value(pyr.p5)};
}

template <typename T>
Tensor<T> mask_branch(const FeaturePyramid<T>& pyr, const Model<T>& m) {
  Graph<T> g;
  PyramidIds<T> ids{g.leaf(&pyr.p3, false), g.leaf(&pyr.p4, false), g.leaf(&pyr.p5, false)};
  return g.value(mask_branch_g(g, ids, m));
}

// Spec-layout region features: N x ch x out x out (channel-major rows).
template <typename T>
Tensor<T> roi_features(const FeaturePyramid<T>& pyr, const BoxSet& boxes, int out_size,
                       int image_min_side) {
  Graph<T> g;
  PyramidIds<T> ids{g.leaf(&pyr.p3, false), g.leaf(&pyr.p4, false), g.leaf(&pyr.p5, false)};
  int n = boxes.size();
  std::vector<BoxXyxy> xyxy(n);
  std::vector<int> levels(n);
  for (int i = 0; i < n; ++i) {
    xyxy[i] = to_xyxy(boxes.boxes[i]);
    levels[i] = roi_level_for_box(boxes.boxes[i], image_min_side);
  }
  auto roi = g.roi_align(ids.p3, ids.p4, ids.p5, xyxy, levels, out_size);
  return g.value(roi).reshaped({n, pyr.p3.dim(0), out_size, out_size});
}

template <typename T>
std::vector<DecoderStageOutput<T>> decoder_forward(const FeaturePyramid<T>& pyr,
                                                   const ScaledBoxState<T>& state, int t,
                                                   const Model<T>& m, int stages) {
  Graph<T> g;
  PyramidIds<T> ids{g.leaf(&pyr.p3, false), g.leaf(&pyr.p4, false), g.leaf(&pyr.p5, false)};
  return decoder_forward_g(g, ids, state, t, m, stages);
}

// The filter head is one affine map from the per-box embedding.
template <typename T>
Tensor<T> eta_apply(const Model<T>& m, int stage, const Tensor<T>& embedding) {
  Graph<T> g;
  auto e = g.leaf(&embedding, false);
  return g.value(netdetail::dense_t(g, m, e, strprintf("dec.s%d.eta", stage)));
}

}  // namespace diffinst
