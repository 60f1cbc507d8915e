#pragma once

#include <vector>

#include "diffinst/autodiff.hpp"
#include "diffinst/common.hpp"
#include "diffinst/tensor.hpp"

namespace diffinst {

// Topology of the per-instance 1x1 conv stack. The flat filter vector packs,
// per layer in order, an out-major weight block followed by the bias block.
struct HeadTopology {
  int in_channels = 8;
  std::vector<int> layer_channels = {8, 8, 1};
};

inline int filter_dim(const HeadTopology& topo) {
  check(!topo.layer_channels.empty(), "filter_dim: empty layer list");
  check(topo.layer_channels.back() == 1, "filter_dim: last layer must output 1 channel");
  check(topo.in_channels >= 1, "filter_dim: in_channels must be >= 1");
  int d = 0;
  int in = topo.in_channels;
  for (int out : topo.layer_channels) {
    check(out >= 1, "filter_dim: layer channels must be >= 1");
    d += in * out + out;
    in = out;
  }
  return d;
}

template <typename T>
struct UnpackedFilter {
  std::vector<Tensor<T>> weights;  // per layer, out x in
  std::vector<Tensor<T>> biases;   // per layer, out
};

template <typename T>
UnpackedFilter<T> unpack_filter(const Tensor<T>& theta, const HeadTopology& topo) {
  int want = filter_dim(topo);
  if (theta.numel() != want)
    throw std::invalid_argument(strprintf("unpack_filter: expected %d entries, got %lld", want,
                                          static_cast<long long>(theta.numel())));
  UnpackedFilter<T> u;
  int64_t off = 0;
  int in = topo.in_channels;
  for (int out : topo.layer_channels) {
    Tensor<T> w({out, in});
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = theta[off + i];
    off += w.numel();
    Tensor<T> b({out});
    for (int i = 0; i < out; ++i) b[i] = theta[off + i];
    off += out;
    u.weights.push_back(std::move(w));
    u.biases.push_back(std::move(b));
    in = out;
  }
  return u;
}

template <typename T>
Tensor<T> repack_filter(const UnpackedFilter<T>& u, const HeadTopology& topo) {
  Tensor<T> theta({filter_dim(topo)});
  int64_t off = 0;
  for (size_t l = 0; l < u.weights.size(); ++l) {
    for (int64_t i = 0; i < u.weights[l].numel(); ++i) theta[off + i] = u.weights[l][i];
    off += u.weights[l].numel();
    for (int64_t i = 0; i < u.biases[l].numel(); ++i) theta[off + i] = u.biases[l][i];
    off += u.biases[l].numel();
  }
  return theta;
}

// Differentiable mask reconstruction. feature: c x h x w (stride-s map),
// theta: flat filter vector. The conv stack is per-pixel (1x1 kernels,
// rectifier between layers, none after the last), logits are bilinearly
// upsampled to out_h x out_w, then squashed. Returns the probability map id
// (shape out_h x out_w).
template <typename T>
typename Graph<T>::Id apply_mask_head_g(Graph<T>& g, typename Graph<T>::Id feature,
                                        typename Graph<T>::Id theta, const HeadTopology& topo,
                                        int out_h, int out_w) {
  const auto& f = g.value(feature);
  check(f.ndim() == 3, "apply_mask_head: feature must be c x h x w");
  check(f.dim(0) == topo.in_channels,
        strprintf("apply_mask_head: feature has %d channels, topology expects %d", f.dim(0),
                  topo.in_channels));
  check(g.value(theta).numel() == filter_dim(topo),
        strprintf("apply_mask_head: expected %d filter entries, got %lld", filter_dim(topo),
                  static_cast<long long>(g.value(theta).numel())));
  int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  check(out_h % h == 0 && out_w % w == 0 && out_h / h == out_w / w,
        "apply_mask_head: output size must be an integer multiple of the feature size");
  int factor = out_h / h;

  // pixels as rows: (h*w) x c
  auto x = g.transpose(g.reshape(feature, {c, h * w}));
  int64_t off = 0;
  int in = topo.in_channels;
  for (size_t l = 0; l < topo.layer_channels.size(); ++l) {
    int out = topo.layer_channels[l];
    auto wmat = g.reshape(g.slice_flat(theta, off, static_cast<int64_t>(in) * out), {out, in});
    off += static_cast<int64_t>(in) * out;
    auto bias = g.slice_flat(theta, off, out);
    off += out;
    x = g.add_rowvec(g.matmul(x, g.transpose(wmat)), bias);
    if (l + 1 < topo.layer_channels.size()) x = g.relu(x);
    in = out;
  }
  auto logits = g.reshape(g.transpose(x), {1, h, w});
  if (factor > 1) logits = g.upsample_bilinear(logits, factor);
  return g.reshape(g.sigmoid(logits), {out_h, out_w});
}

// Plain (non-training) variant.
template <typename T>
Tensor<T> apply_mask_head(const Tensor<T>& feature, const Tensor<T>& theta,
                          const HeadTopology& topo, int out_h, int out_w) {
  Graph<T> g;
  auto fid = g.leaf(&feature, false);
  auto tid = g.leaf(&theta, false);
  auto out = apply_mask_head_g(g, fid, tid, topo, out_h, out_w);
  return g.value(out);
}

}  // namespace diffinst
