#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <tuple>
#include <vector>

#include "diffinst/boxes.hpp"
#include "diffinst/common.hpp"
#include "diffinst/tensor.hpp"

namespace diffinst {

// Reverse-mode tape. Nodes are created in topological order; backward walks
// ids in reverse. Leaves may view external tensors (model parameters) so a
// training step never copies the parameter set.
template <typename T>
class Graph {
 public:
  using Id = int;

  // Leaves are cached by address: registering the same tensor twice returns
  // the same node, so gradients from every use site accumulate together.
  Id leaf(const Tensor<T>* external, bool requires_grad) {
    auto it = leaf_cache_.find(external);
    if (it != leaf_cache_.end()) return it->second;
    Node n;
    n.external = external;
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    Id id = static_cast<Id>(nodes_.size()) - 1;
    leaf_cache_.emplace(external, id);
    return id;
  }

  Id constant(Tensor<T> v) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = false;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  Id constant_scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  const Tensor<T>& value(Id id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Id id) const { return nodes_[id].needs_grad; }

  // Gradient of the last backward() root w.r.t. this node; zeros if untouched.
  Tensor<T> grad(Id id) const {
    const Node& n = nodes_[id];
    if (!n.grad_alloc) return Tensor<T>::zeros(value(id).shape);
    return n.grad;
  }

  Id detach(Id id) { return constant(value(id)); }

  void backward(Id root) {
    check(value(root).numel() == 1, "backward: root must be scalar");
    grad_ref(root)[0] = T(1);
    for (Id id = root; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.needs_grad || !n.grad_alloc || !n.back) continue;
      n.back(*this);
    }
  }

  size_t size() const { return nodes_.size(); }
  void reserve(size_t n) { nodes_.reserve(n); }

  // ---- elementwise ----

  Id add(Id a, Id b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    check(va.same_shape(vb), "add: shape mismatch");
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] + vb[i];
    return make(std::move(out), {a, b}, [a, b](Graph& g) {
      const auto& go = g.grad_ref(g.cursor_);
      if (g.requires_grad(a)) g.accum(a, go, [](T gv, T) { return gv; });
      if (g.requires_grad(b)) g.accum(b, go, [](T gv, T) { return gv; });
    });
  }

  Id sub(Id a, Id b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    check(va.same_shape(vb), "sub: shape mismatch");
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] - vb[i];
    return make(std::move(out), {a, b}, [a, b](Graph& g) {
      const auto& go = g.grad_ref(g.cursor_);
      if (g.requires_grad(a)) g.accum(a, go, [](T gv, T) { return gv; });
      if (g.requires_grad(b)) g.accum(b, go, [](T gv, T) { return -gv; });
    });
  }

  Id mul(Id a, Id b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    check(va.same_shape(vb), "mul: shape mismatch");
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] * vb[i];
    return make(std::move(out), {a, b}, [a, b](Graph& g) {
      const auto& go = g.grad_ref(g.cursor_);
      if (g.requires_grad(a)) {
        const auto& vb2 = g.value(b);
        auto& ga = g.grad_ref(a);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * vb2[i];
      }
      if (g.requires_grad(b)) {
        const auto& va2 = g.value(a);
        auto& gb = g.grad_ref(b);
        for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * va2[i];
      }
    });
  }

  Id div(Id a, Id b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    check(va.same_shape(vb), "div: shape mismatch");
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] / vb[i];
    return make(std::move(out), {a, b}, [a, b](Graph& g) {
      const auto& go = g.grad_ref(g.cursor_);
      const auto& va2 = g.value(a);
      const auto& vb2 = g.value(b);
      if (g.requires_grad(a)) {
        auto& ga = g.grad_ref(a);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / vb2[i];
      }
      if (g.requires_grad(b)) {
        auto& gb = g.grad_ref(b);
        for (int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i] * va2[i] / (vb2[i] * vb2[i]);
      }
    });
  }

  // k * a + c
  Id affine(Id a, double k, double c) {
    const auto& va = value(a);
    Tensor<T> out(va.shape);
    T tk = static_cast<T>(k), tc = static_cast<T>(c);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = tk * va[i] + tc;
    return make(std::move(out), {a}, [a, k](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      auto& ga = g.grad_ref(a);
      T tk = static_cast<T>(k);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += tk * go[i];
    });
  }

  Id scale(Id a, double k) { return affine(a, k, 0.0); }

  Id relu(Id a) {
    const auto& va = value(a);
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] > T(0) ? va[i] : T(0);
    return make(std::move(out), {a}, [a](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      const auto& va2 = g.value(a);
      auto& ga = g.grad_ref(a);
      for (int64_t i = 0; i < go.numel(); ++i)
        if (va2[i] > T(0)) ga[i] += go[i];
    });
  }

  Id sigmoid(Id a) {
    const auto& va = value(a);
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = sigmoid_scalar(va[i]);
    Id id = make(std::move(out), {a}, [a](Graph& g) {
      if (!g.requires_grad(a)) return;
      Id self = g.cursor_;
      const auto& go = g.grad_ref(self);
      const auto& vo = g.value(self);
      auto& ga = g.grad_ref(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * vo[i] * (T(1) - vo[i]);
    });
    return id;
  }

  // log(1 + exp(x)), stable at both tails
  Id softplus(Id a) {
    const auto& va = value(a);
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
      double x = static_cast<double>(va[i]);
      out[i] = static_cast<T>(std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))));
    }
    return make(std::move(out), {a}, [a](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      const auto& va2 = g.value(a);
      auto& ga = g.grad_ref(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * sigmoid_scalar(va2[i]);
    });
  }

  Id exp(Id a) {
    const auto& va = value(a);
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(va[i]);
    return make(std::move(out), {a}, [a](Graph& g) {
      if (!g.requires_grad(a)) return;
      Id self = g.cursor_;
      const auto& go = g.grad_ref(self);
      const auto& vo = g.value(self);
      auto& ga = g.grad_ref(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * vo[i];
    });
  }

  Id abs(Id a) {
    const auto& va = value(a);
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(va[i]);
    return make(std::move(out), {a}, [a](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      const auto& va2 = g.value(a);
      auto& ga = g.grad_ref(a);
      for (int64_t i = 0; i < go.numel(); ++i)
        ga[i] += va2[i] > T(0) ? go[i] : (va2[i] < T(0) ? -go[i] : T(0));
    });
  }

  // a^p for a >= 0
  Id pow_const(Id a, double p) {
    const auto& va = value(a);
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
      out[i] = static_cast<T>(std::pow(static_cast<double>(va[i]), p));
    return make(std::move(out), {a}, [a, p](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      const auto& va2 = g.value(a);
      auto& ga = g.grad_ref(a);
      for (int64_t i = 0; i < go.numel(); ++i) {
        double base = static_cast<double>(va2[i]);
        double d = base > 0.0 ? p * std::pow(base, p - 1.0) : 0.0;
        ga[i] += go[i] * static_cast<T>(d);
      }
    });
  }

  // gradient passes only where the input was strictly inside the range
  Id clamp(Id a, double lo, double hi) {
    const auto& va = value(a);
    Tensor<T> out(va.shape);
    T tlo = static_cast<T>(lo), thi = static_cast<T>(hi);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(va[i], tlo, thi);
    return make(std::move(out), {a}, [a, lo, hi](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      const auto& va2 = g.value(a);
      auto& ga = g.grad_ref(a);
      T tlo = static_cast<T>(lo), thi = static_cast<T>(hi);
      for (int64_t i = 0; i < go.numel(); ++i)
        if (va2[i] > tlo && va2[i] < thi) ga[i] += go[i];
    });
  }

  Id minimum(Id a, Id b) { return extremum(a, b, /*take_min=*/true); }
  Id maximum(Id a, Id b) { return extremum(a, b, /*take_min=*/false); }

  // ---- shape ----

  Id reshape(Id a, std::vector<int> shape) {
    Tensor<T> out = value(a).reshaped(shape);
    return make(std::move(out), {a}, [a](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      auto& ga = g.grad_ref(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    });
  }

  Id transpose(Id a) {
    const auto& va = value(a);
    check(va.ndim() == 2, "transpose: rank-2 only");
    int m = va.dim(0), n = va.dim(1);
    Tensor<T> out({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(j, i) = va.at(i, j);
    return make(std::move(out), {a}, [a, m, n](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      auto& ga = g.grad_ref(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.at(i, j) += go.at(j, i);
    });
  }

  Id slice_cols(Id a, int j0, int len) {
    const auto& va = value(a);
    check(va.ndim() == 2 && j0 >= 0 && j0 + len <= va.dim(1), "slice_cols: out of range");
    int m = va.dim(0);
    Tensor<T> out({m, len});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < len; ++j) out.at(i, j) = va.at(i, j0 + j);
    return make(std::move(out), {a}, [a, j0, len, m](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      auto& ga = g.grad_ref(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j) ga.at(i, j0 + j) += go.at(i, j);
    });
  }

  // contiguous range of the flattened tensor -> rank-1
  Id slice_flat(Id a, int64_t start, int64_t len) {
    const auto& va = value(a);
    check(start >= 0 && start + len <= va.numel(), "slice_flat: out of range");
    Tensor<T> out({static_cast<int>(len)});
    for (int64_t i = 0; i < len; ++i) out[i] = va[start + i];
    return make(std::move(out), {a}, [a, start, len](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      auto& ga = g.grad_ref(a);
      for (int64_t i = 0; i < len; ++i) ga[start + i] += go[i];
    });
  }

  Id concat_cols(const std::vector<Id>& parts) {
    check(!parts.empty(), "concat_cols: empty");
    int m = value(parts[0]).dim(0);
    int total = 0;
    for (Id p : parts) {
      check(value(p).ndim() == 2 && value(p).dim(0) == m, "concat_cols: row mismatch");
      total += value(p).dim(1);
    }
    Tensor<T> out({m, total});
    int off = 0;
    for (Id p : parts) {
      const auto& vp = value(p);
      int w = vp.dim(1);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) out.at(i, off + j) = vp.at(i, j);
      off += w;
    }
    auto parts_copy = parts;
    return make(std::move(out), parts, [parts_copy, m](Graph& g) {
      const auto& go = g.grad_ref(g.cursor_);
      int off = 0;
      for (Id p : parts_copy) {
        int w = g.value(p).dim(1);
        if (g.requires_grad(p)) {
          auto& gp = g.grad_ref(p);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) gp.at(i, j) += go.at(i, off + j);
        }
        off += w;
      }
    });
  }

  Id gather_rows(Id a, std::vector<int> rows) {
    const auto& va = value(a);
    check(va.ndim() == 2, "gather_rows: rank-2 only");
    int n = va.dim(1);
    Tensor<T> out({static_cast<int>(rows.size()), n});
    for (size_t i = 0; i < rows.size(); ++i) {
      check(rows[i] >= 0 && rows[i] < va.dim(0), "gather_rows: index out of range");
      for (int j = 0; j < n; ++j) out.at(static_cast<int>(i), j) = va.at(rows[i], j);
    }
    return make(std::move(out), {a}, [a, rows = std::move(rows), n](Graph& g) {
      if (!g.requires_grad(a)) return;
      const auto& go = g.grad_ref(g.cursor_);
      auto& ga = g.grad_ref(a);
      for (size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < n; ++j) ga.at(rows[i], j) += go.at(static_cast<int>(i), j);
    });
  }

  // ---- reductions ----

  Id sum(Id a) {
    const auto& va = value(a);
    T s = T(0);
    for (int64_t i = 0; i < va.numel(); ++i) s += va[i];
    return make(Tensor<T>::scalar(s), {a}, [a](Graph& g) {
      if (!g.requires_grad(a)) return;
      T gv = g.grad_ref(g.cursor_)[0];
      auto& ga = g.grad_ref(a);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
    });
  }

  Id mean(Id a) { return scale(sum(a), 1.0 / static_cast<double>(value(a).numel())); }

  // ---- linear algebra ----

  Id matmul(Id a, Id b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    check(va.ndim() == 2 && vb.ndim() == 2 && va.dim(1) == vb.dim(0), "matmul: shape mismatch");
    int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Tensor<T> out({m, n});
    out.as_matrix(m, n).noalias() = va.as_matrix(m, k) * vb.as_matrix(k, n);
    return make(std::move(out), {a, b}, [a, b, m, k, n](Graph& g) {
      const auto& go = g.grad_ref(g.cursor_);
      auto gom = go.as_matrix(m, n);
      if (g.requires_grad(a)) {
        auto& ga = g.grad_ref(a);
        ga.as_matrix(m, k).noalias() += gom * g.value(b).as_matrix(k, n).transpose();
      }
      if (g.requires_grad(b)) {
        auto& gb = g.grad_ref(b);
        gb.as_matrix(k, n).noalias() += g.value(a).as_matrix(m, k).transpose() * gom;
      }
    });
  }

  Id add_rowvec(Id mat, Id vec) {
    const auto& vm = value(mat);
    const auto& vv = value(vec);
    check(vm.ndim() == 2 && vv.numel() == vm.dim(1), "add_rowvec: shape mismatch");
    int m = vm.dim(0), n = vm.dim(1);
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(i, j) = vm.at(i, j) + vv[j];
    return make(std::move(out), {mat, vec}, [mat, vec, m, n](Graph& g) {
      const auto& go = g.grad_ref(g.cursor_);
      if (g.requires_grad(mat)) {
        auto& gm = g.grad_ref(mat);
        for (int64_t i = 0; i < go.numel(); ++i) gm[i] += go[i];
      }
      if (g.requires_grad(vec)) {
        auto& gv = g.grad_ref(vec);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gv[j] += go.at(i, j);
      }
    });
  }

  // x (M x K) * w (K x N) + b (N)
  Id linear(Id x, Id w, Id b) { return add_rowvec(matmul(x, w), b); }

  // ---- conv / resampling ----

  // 3x3-style convolution via im2col. x: C x H x W, w: O x C x k x k, b: O.
  Id conv2d(Id x, Id w, Id b, int stride, int pad) {
    const auto& vx = value(x);
    const auto& vw = value(w);
    check(vx.ndim() == 3 && vw.ndim() == 4, "conv2d: bad ranks");
    int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    int O = vw.dim(0), kc = vw.dim(1), kh = vw.dim(2), kw = vw.dim(3);
    check(kc == C, "conv2d: channel mismatch");
    check(kh == kw, "conv2d: square kernels only");
    int k = kh;
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    check(Ho >= 1 && Wo >= 1, "conv2d: empty output");

    auto col = std::make_shared<Tensor<T>>(std::vector<int>{C * k * k, Ho * Wo});
    im2col(vx, k, stride, pad, Ho, Wo, *col);

    Tensor<T> out({O, Ho, Wo});
    out.as_matrix(O, Ho * Wo).noalias() =
        vw.as_matrix(O, C * k * k) * col->as_matrix(C * k * k, Ho * Wo);
    const auto& vb = value(b);
    check(vb.numel() == O, "conv2d: bias size mismatch");
    for (int o = 0; o < O; ++o) {
      T bias = vb[o];
      T* row = out.data.data() + static_cast<int64_t>(o) * Ho * Wo;
      for (int i = 0; i < Ho * Wo; ++i) row[i] += bias;
    }

    return make(std::move(out), {x, w, b},
                [x, w, b, col, C, H, W, O, k, stride, pad, Ho, Wo](Graph& g) {
                  const auto& go = g.grad_ref(g.cursor_);
                  auto gom = go.as_matrix(O, Ho * Wo);
                  if (g.requires_grad(w)) {
                    auto& gw = g.grad_ref(w);
                    gw.as_matrix(O, C * k * k).noalias() +=
                        gom * col->as_matrix(C * k * k, Ho * Wo).transpose();
                  }
                  if (g.requires_grad(b)) {
                    auto& gb = g.grad_ref(b);
                    for (int o = 0; o < O; ++o) {
                      T s = T(0);
                      const T* row = go.data.data() + static_cast<int64_t>(o) * Ho * Wo;
                      for (int i = 0; i < Ho * Wo; ++i) s += row[i];
                      gb[o] += s;
                    }
                  }
                  if (g.requires_grad(x)) {
                    Tensor<T> gcol({C * k * k, Ho * Wo});
                    gcol.as_matrix(C * k * k, Ho * Wo).noalias() =
                        g.value(w).as_matrix(O, C * k * k).transpose() * gom;
                    auto& gx = g.grad_ref(x);
                    col2im_accum(gcol, C, H, W, k, stride, pad, Ho, Wo, gx);
                  }
                });
  }

  // integer-factor bilinear upsampling, half-pixel centers
  Id upsample_bilinear(Id x, int factor) {
    const auto& vx = value(x);
    check(vx.ndim() == 3 && factor >= 1, "upsample_bilinear: bad input");
    int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    int Ho = H * factor, Wo = W * factor;
    Tensor<T> out({C, Ho, Wo});
    for (int y = 0; y < Ho; ++y) {
      auto [y0, y1, wy] = src_weight(y, factor, H);
      for (int xx = 0; xx < Wo; ++xx) {
        auto [x0, x1, wx] = src_weight(xx, factor, W);
        for (int c = 0; c < C; ++c) {
          T v00 = vx.at(c, y0, x0), v01 = vx.at(c, y0, x1);
          T v10 = vx.at(c, y1, x0), v11 = vx.at(c, y1, x1);
          T top = v00 + static_cast<T>(wx) * (v01 - v00);
          T bot = v10 + static_cast<T>(wx) * (v11 - v10);
          out.at(c, y, xx) = top + static_cast<T>(wy) * (bot - top);
        }
      }
    }
    return make(std::move(out), {x}, [x, factor, C, H, W, Ho, Wo](Graph& g) {
      if (!g.requires_grad(x)) return;
      const auto& go = g.grad_ref(g.cursor_);
      auto& gx = g.grad_ref(x);
      for (int y = 0; y < Ho; ++y) {
        auto [y0, y1, wy] = src_weight(y, factor, H);
        for (int xx = 0; xx < Wo; ++xx) {
          auto [x0, x1, wx] = src_weight(xx, factor, W);
          for (int c = 0; c < C; ++c) {
            T gv = go.at(c, y, xx);
            gx.at(c, y0, x0) += gv * static_cast<T>((1 - wy) * (1 - wx));
            gx.at(c, y0, x1) += gv * static_cast<T>((1 - wy) * wx);
            gx.at(c, y1, x0) += gv * static_cast<T>(wy * (1 - wx));
            gx.at(c, y1, x1) += gv * static_cast<T>(wy * wx);
          }
        }
      }
    });
  }

  // Region pooling over one of three pyramid levels per box. Boxes are
  // normalized xyxy and treated as constants; levels[i] in {0,1,2} selects
  // p3/p4/p5. Rows are flattened channel-major (c, cell) by default or
  // cell-major ((cell), c) when cell_major is set. Zero-area boxes produce
  // zero rows.
  Id roi_align(Id p3, Id p4, Id p5, const std::vector<BoxXyxy>& boxes,
               const std::vector<int>& levels, int out_size, bool cell_major = false) {
    check(out_size >= 1, "roi_align: out_size must be >= 1");
    check(boxes.size() == levels.size(), "roi_align: boxes/levels size mismatch");
    std::array<Id, 3> lv = {p3, p4, p5};
    int C = value(p3).dim(0);
    check(value(p4).dim(0) == C && value(p5).dim(0) == C, "roi_align: channel mismatch");
    int n = static_cast<int>(boxes.size());
    int R = out_size;
    Tensor<T> out({n, C * R * R});
    for (int i = 0; i < n; ++i) {
      int l = levels[i];
      check(l >= 0 && l < 3, "roi_align: level out of range");
      pool_one(value(lv[l]), boxes[i], R, cell_major,
               out.data.data() + static_cast<int64_t>(i) * C * R * R);
    }
    auto boxes_copy = boxes;
    auto levels_copy = levels;
    return make(std::move(out), {p3, p4, p5},
                [p3, p4, p5, boxes_copy, levels_copy, C, R, cell_major](Graph& g) {
                  std::array<Id, 3> lv = {p3, p4, p5};
                  const auto& go = g.grad_ref(g.cursor_);
                  for (size_t i = 0; i < boxes_copy.size(); ++i) {
                    Id level = lv[levels_copy[i]];
                    if (!g.requires_grad(level)) continue;
                    pool_one_backward(g.value(level), boxes_copy[i], R, cell_major,
                                      go.data.data() + static_cast<int64_t>(i) * C * R * R,
                                      g.grad_ref(level));
                  }
                });
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool needs_grad = false;
    bool grad_alloc = false;
    std::function<void(Graph&)> back;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, Id> leaf_cache_;
  Id cursor_ = -1;  // id of the node whose backward is running

  static T sigmoid_scalar(T x) {
    double v = static_cast<double>(x);
    return static_cast<T>(v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                 : std::exp(v) / (1.0 + std::exp(v)));
  }

  Tensor<T>& grad_ref(Id id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
      n.grad = Tensor<T>::zeros(value(id).shape);
      n.grad_alloc = true;
    }
    return n.grad;
  }

  template <typename F>
  void accum(Id id, const Tensor<T>& go, F f) {
    auto& ga = grad_ref(id);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += f(go[i], T(0));
  }

  Id make(Tensor<T> out, std::vector<Id> parents, std::function<void(Graph&)> back) {
    Node n;
    n.value = std::move(out);
    for (Id p : parents)
      if (nodes_[p].needs_grad) n.needs_grad = true;
    if (n.needs_grad) {
      Id self = static_cast<Id>(nodes_.size());
      n.back = [self, inner = std::move(back)](Graph& g) {
        g.cursor_ = self;
        inner(g);
      };
    }
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
  }

  Id extremum(Id a, Id b, bool take_min) {
    const auto& va = value(a);
    const auto& vb = value(b);
    check(va.same_shape(vb), "extremum: shape mismatch");
    Tensor<T> out(va.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
      out[i] = take_min ? std::min(va[i], vb[i]) : std::max(va[i], vb[i]);
    return make(std::move(out), {a, b}, [a, b, take_min](Graph& g) {
      const auto& go = g.grad_ref(g.cursor_);
      const auto& va2 = g.value(a);
      const auto& vb2 = g.value(b);
      bool need_a = g.requires_grad(a), need_b = g.requires_grad(b);
      for (int64_t i = 0; i < go.numel(); ++i) {
        bool pick_a = take_min ? va2[i] <= vb2[i] : va2[i] >= vb2[i];
        if (pick_a && need_a) g.grad_ref(a)[i] += go[i];
        if (!pick_a && need_b) g.grad_ref(b)[i] += go[i];
      }
    });
  }

  static void im2col(const Tensor<T>& x, int k, int stride, int pad, int Ho, int Wo,
                     Tensor<T>& col) {
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
          int row = (c * k + dy) * k + dx;
          T* dst = col.data.data() + static_cast<int64_t>(row) * Ho * Wo;
          for (int oy = 0; oy < Ho; ++oy) {
            int sy = oy * stride + dy - pad;
            for (int ox = 0; ox < Wo; ++ox) {
              int sx = ox * stride + dx - pad;
              dst[oy * Wo + ox] =
                  (sy >= 0 && sy < H && sx >= 0 && sx < W) ? x.at(c, sy, sx) : T(0);
            }
          }
        }
  }

  static void col2im_accum(const Tensor<T>& gcol, int C, int H, int W, int k, int stride,
                           int pad, int Ho, int Wo, Tensor<T>& gx) {
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
          int row = (c * k + dy) * k + dx;
          const T* src = gcol.data.data() + static_cast<int64_t>(row) * Ho * Wo;
          for (int oy = 0; oy < Ho; ++oy) {
            int sy = oy * stride + dy - pad;
            if (sy < 0 || sy >= H) continue;
            for (int ox = 0; ox < Wo; ++ox) {
              int sx = ox * stride + dx - pad;
              if (sx < 0 || sx >= W) continue;
              gx.at(c, sy, sx) += src[oy * Wo + ox];
            }
          }
        }
  }

  // half-pixel source mapping used by both directions of the upsampler
  static std::tuple<int, int, double> src_weight(int dst, int factor, int src_len) {
    double s = (dst + 0.5) / factor - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_len - 1));
    int s0 = static_cast<int>(std::floor(s));
    int s1 = std::min(s0 + 1, src_len - 1);
    return {s0, s1, s - s0};
  }

  struct Tap {
    int x0, y0, x1, y1;
    double wx, wy;
  };

  static bool roi_tap(const Tensor<T>& f, const BoxXyxy& b, int R, int cell_y, int cell_x,
                      Tap& tap) {
    int H = f.dim(1), W = f.dim(2);
    double bw = (b.x2 - b.x1) / R, bh = (b.y2 - b.y1) / R;
    if (bw <= 0.0 || bh <= 0.0) return false;
    // sample at the cell center, in pixel-center coordinates, clamped to border
    double sx = (b.x1 + (cell_x + 0.5) * bw) * W - 0.5;
    double sy = (b.y1 + (cell_y + 0.5) * bh) * H - 0.5;
    sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
    tap.x0 = static_cast<int>(std::floor(sx));
    tap.y0 = static_cast<int>(std::floor(sy));
    tap.x1 = std::min(tap.x0 + 1, W - 1);
    tap.y1 = std::min(tap.y0 + 1, H - 1);
    tap.wx = sx - tap.x0;
    tap.wy = sy - tap.y0;
    return true;
  }

  static int64_t roi_index(int c, int cy, int cx, int C, int R, bool cell_major) {
    return cell_major ? static_cast<int64_t>(cy * R + cx) * C + c
                      : (static_cast<int64_t>(c) * R + cy) * R + cx;
  }

  static void pool_one(const Tensor<T>& f, const BoxXyxy& b, int R, bool cell_major, T* dst) {
    int C = f.dim(0);
    std::fill(dst, dst + static_cast<int64_t>(C) * R * R, T(0));
    Tap tap;
    for (int cy = 0; cy < R; ++cy)
      for (int cx = 0; cx < R; ++cx) {
        if (!roi_tap(f, b, R, cy, cx, tap)) return;  // degenerate box: zeros
        for (int c = 0; c < C; ++c) {
          T v00 = f.at(c, tap.y0, tap.x0), v01 = f.at(c, tap.y0, tap.x1);
          T v10 = f.at(c, tap.y1, tap.x0), v11 = f.at(c, tap.y1, tap.x1);
          T top = v00 + static_cast<T>(tap.wx) * (v01 - v00);
          T bot = v10 + static_cast<T>(tap.wx) * (v11 - v10);
          dst[roi_index(c, cy, cx, C, R, cell_major)] =
              top + static_cast<T>(tap.wy) * (bot - top);
        }
      }
  }

  static void pool_one_backward(const Tensor<T>& f, const BoxXyxy& b, int R, bool cell_major,
                                const T* gsrc, Tensor<T>& gf) {
    int C = f.dim(0);
    Tap tap;
    for (int cy = 0; cy < R; ++cy)
      for (int cx = 0; cx < R; ++cx) {
        if (!roi_tap(f, b, R, cy, cx, tap)) return;
        for (int c = 0; c < C; ++c) {
          T gv = gsrc[roi_index(c, cy, cx, C, R, cell_major)];
          gf.at(c, tap.y0, tap.x0) += gv * static_cast<T>((1 - tap.wy) * (1 - tap.wx));
          gf.at(c, tap.y0, tap.x1) += gv * static_cast<T>((1 - tap.wy) * tap.wx);
          gf.at(c, tap.y1, tap.x0) += gv * static_cast<T>(tap.wy * (1 - tap.wx));
          gf.at(c, tap.y1, tap.x1) += gv * static_cast<T>(tap.wy * tap.wx);
        }
      }
  }
};

}  // namespace diffinst
