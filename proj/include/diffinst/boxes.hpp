#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "diffinst/common.hpp"
#include "diffinst/diffusion.hpp"
#include "diffinst/rng.hpp"
#include "diffinst/tensor.hpp"

namespace diffinst {

// Normalized center/size box, coordinates in [0,1].
struct BoxCxcywh {
  double cx = 0, cy = 0, w = 0, h = 0;
};

// Corner box, x2 >= x1 and y2 >= y1.
struct BoxXyxy {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

inline BoxXyxy to_xyxy(const BoxCxcywh& b) {
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

inline BoxCxcywh to_cxcywh(const BoxXyxy& b) {
  check(b.x2 >= b.x1 && b.y2 >= b.y1, "to_cxcywh: negative extent in corner box");
  return {(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, b.x2 - b.x1, b.y2 - b.y1};
}

inline double box_area(const BoxXyxy& b) {
  return std::max(0.0, b.x2 - b.x1) * std::max(0.0, b.y2 - b.y1);
}

inline double box_iou(const BoxXyxy& a, const BoxXyxy& b) {
  double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
  double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
  double inter = std::max(0.0, ix2 - ix1) * std::max(0.0, iy2 - iy1);
  double uni = box_area(a) + box_area(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double box_giou(const BoxXyxy& a, const BoxXyxy& b) {
  double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
  double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
  double inter = std::max(0.0, ix2 - ix1) * std::max(0.0, iy2 - iy1);
  double uni = box_area(a) + box_area(b) - inter;
  double hx1 = std::min(a.x1, b.x1), hy1 = std::min(a.y1, b.y1);
  double hx2 = std::max(a.x2, b.x2), hy2 = std::max(a.y2, b.y2);
  double hull = (hx2 - hx1) * (hy2 - hy1);
  double iou = uni > 0.0 ? inter / uni : 0.0;
  return hull > 0.0 ? iou - (hull - uni) / hull : iou;
}

// Fixed-size candidate set: groundtruth boxes carried verbatim plus padding
// drawn to match the inference-time prior.
struct BoxSet {
  std::vector<BoxCxcywh> boxes;
  std::vector<uint8_t> is_real;

  int size() const { return static_cast<int>(boxes.size()); }
};

// Diffusion state for a candidate set: N x 4 entries in [-scale, scale].
template <typename T>
struct ScaledBoxState {
  Tensor<T> values;  // N x 4
  double scale = 2.0;

  int size() const { return values.dim(0); }
};

inline double signed_from_normalized(double v, double scale) { return (2.0 * v - 1.0) * scale; }
inline double normalized_from_signed(double v, double scale) {
  return std::clamp((v / scale + 1.0) / 2.0, 0.0, 1.0);
}

// Padding boxes are standard normal in signed space (matching inference
// initialization), clamped, then mapped back to normalized coordinates.
inline BoxCxcywh sample_padding_box(Rng& rng, double scale) {
  double v[4];
  for (double& x : v) {
    double z = std::clamp(rng.normal(), -scale, scale);
    x = normalized_from_signed(z, scale);
  }
  return {v[0], v[1], v[2], v[3]};
}

inline BoxSet pad_gt_boxes(const std::vector<BoxCxcywh>& gt, int n, Rng& rng,
                           double scale = 2.0) {
  check(n >= 1, "pad_gt_boxes: N must be >= 1");
  BoxSet out;
  out.boxes.reserve(n);
  out.is_real.reserve(n);
  if (static_cast<int>(gt.size()) > n) {
    log_warn(strprintf("pad_gt_boxes: %zu groundtruth boxes exceed N=%d, keeping a random subset",
                       gt.size(), n));
    std::vector<int> idx(gt.size());
    for (size_t i = 0; i < gt.size(); ++i) idx[i] = static_cast<int>(i);
    // Fisher-Yates prefix shuffle, keeps the first n
    for (int i = 0; i < n; ++i) {
      int j = rng.uniform_int(i, static_cast<int>(gt.size()) - 1);
      std::swap(idx[i], idx[j]);
    }
    for (int i = 0; i < n; ++i) {
      out.boxes.push_back(gt[idx[i]]);
      out.is_real.push_back(1);
    }
    return out;
  }
  for (const auto& b : gt) {
    out.boxes.push_back(b);
    out.is_real.push_back(1);
  }
  while (out.size() < n) {
    out.boxes.push_back(sample_padding_box(rng, scale));
    out.is_real.push_back(0);
  }
  return out;
}

// Map padded boxes to signed space, apply the marginal corruption at step t,
// clamp to the state range.
template <typename T>
ScaledBoxState<T> corrupt_boxes(const BoxSet& padded, int t, const NoiseSchedule& sched,
                                double scale, const Tensor<T>& eps) {
  int n = padded.size();
  check(eps.ndim() == 2 && eps.dim(0) == n && eps.dim(1) == 4, "corrupt_boxes: eps must be Nx4");
  Tensor<T> x0({n, 4});
  for (int i = 0; i < n; ++i) {
    const BoxCxcywh& b = padded.boxes[i];
    x0.at(i, 0) = static_cast<T>(signed_from_normalized(b.cx, scale));
    x0.at(i, 1) = static_cast<T>(signed_from_normalized(b.cy, scale));
    x0.at(i, 2) = static_cast<T>(signed_from_normalized(b.w, scale));
    x0.at(i, 3) = static_cast<T>(signed_from_normalized(b.h, scale));
  }
  Tensor<T> noisy = q_sample(x0, t, eps, sched);
  T lim = static_cast<T>(scale);
  for (auto& v : noisy.data) v = std::clamp(v, -lim, lim);
  return {std::move(noisy), scale};
}

// State rows back to normalized boxes (clamped).
template <typename T>
std::vector<BoxCxcywh> boxes_from_state(const ScaledBoxState<T>& state) {
  std::vector<BoxCxcywh> out(state.size());
  for (int i = 0; i < state.size(); ++i) {
    out[i].cx = normalized_from_signed(state.values.at(i, 0), state.scale);
    out[i].cy = normalized_from_signed(state.values.at(i, 1), state.scale);
    out[i].w = normalized_from_signed(state.values.at(i, 2), state.scale);
    out[i].h = normalized_from_signed(state.values.at(i, 3), state.scale);
  }
  return out;
}

template <typename T>
ScaledBoxState<T> state_from_boxes(const std::vector<BoxCxcywh>& boxes, double scale) {
  Tensor<T> v({static_cast<int>(boxes.size()), 4});
  for (size_t i = 0; i < boxes.size(); ++i) {
    v.at(static_cast<int>(i), 0) = static_cast<T>(signed_from_normalized(boxes[i].cx, scale));
    v.at(static_cast<int>(i), 1) = static_cast<T>(signed_from_normalized(boxes[i].cy, scale));
    v.at(static_cast<int>(i), 2) = static_cast<T>(signed_from_normalized(boxes[i].w, scale));
    v.at(static_cast<int>(i), 3) = static_cast<T>(signed_from_normalized(boxes[i].h, scale));
  }
  return {std::move(v), scale};
}

}  // namespace diffinst
