#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "diffinst/common.hpp"
#include "diffinst/rng.hpp"
#include "diffinst/tensor.hpp"

namespace diffinst {

enum class ScheduleKind { kCosine, kLinear };

inline std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::kCosine ? "cosine" : "linear";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::kCosine;
  if (s == "linear") return ScheduleKind::kLinear;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

// Variance schedule and cumulative signal retention. Tables are kept in
// double regardless of the scalar type used by the network. Convention:
// betas[i] is beta_{i+1} for i in [0,T); alpha_bars[t] for t in [0,T] with
// alpha_bars[0] = 1 (no noise) and alpha_bars[t] = alpha_bars[t-1]*(1-beta_t).
struct NoiseSchedule {
  int steps = 0;  // T
  std::vector<double> betas;
  std::vector<double> alpha_bars;
  ScheduleKind kind = ScheduleKind::kCosine;

  double beta(int t) const {
    check(t >= 1 && t <= steps, "beta: t out of range");
    return betas[t - 1];
  }
  double alpha_bar(int t) const {
    check(t >= 0 && t <= steps, "alpha_bar: t out of range");
    return alpha_bars[t];
  }
};

inline NoiseSchedule build_schedule(int T, ScheduleKind kind, double beta_start = 1e-4,
                                    double beta_end = 0.02) {
  check(T >= 1, "build_schedule: T must be >= 1");
  NoiseSchedule s;
  s.steps = T;
  s.kind = kind;
  s.betas.resize(T);
  s.alpha_bars.resize(T + 1);
  s.alpha_bars[0] = 1.0;

  if (kind == ScheduleKind::kLinear) {
    for (int i = 0; i < T; ++i) {
      double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
      s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    }
  } else {
    // squared-cosine alpha_bar curve; betas derived from consecutive ratios
    const double offset = 0.008;
    auto f = [&](double t) {
      double v = std::cos((t / T + offset) / (1.0 + offset) * M_PI / 2.0);
      return v * v;
    };
    double f0 = f(0.0);
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
      double ab = f(static_cast<double>(t)) / f0;
      double beta = 1.0 - ab / prev;
      s.betas[t - 1] = beta;
      prev = ab;
    }
  }

  for (int t = 1; t <= T; ++t) {
    double beta = std::min(std::max(s.betas[t - 1], 1e-8), 0.999);
    s.betas[t - 1] = beta;
    s.alpha_bars[t] = s.alpha_bars[t - 1] * (1.0 - beta);
  }
  return s;
}

// Single forward kernel application: sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps.
template <typename T>
Tensor<T> q_step(const Tensor<T>& x_prev, int t, const Tensor<T>& eps,
                 const NoiseSchedule& sched) {
  check(x_prev.same_shape(eps), "q_step: x_prev/eps shape mismatch");
  double beta = sched.beta(t);
  T a = static_cast<T>(std::sqrt(1.0 - beta));
  T b = static_cast<T>(std::sqrt(beta));
  Tensor<T> out(x_prev.shape);
  for (int64_t i = 0; i < x_prev.numel(); ++i) out[i] = a * x_prev[i] + b * eps[i];
  return out;
}

// Marginal corruption: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  check(t >= 1 && t <= sched.steps, "q_sample: t out of range");
  check(x0.same_shape(eps), "q_sample: x0/eps shape mismatch");
  double ab = sched.alpha_bar(t);
  T a = static_cast<T>(std::sqrt(ab));
  T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(x0.shape);
  for (int64_t i = 0; i < x0.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// Reverse jump t -> t_prev given a clean-sample prediction. Deterministic for
// eta = 0; rng may be null in that case.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& x0_pred, int t, int t_prev,
                    const NoiseSchedule& sched, double eta, Rng* rng = nullptr) {
  check(x_t.same_shape(x0_pred), "ddim_step: shape mismatch");
  check(t_prev >= 0 && t_prev <= t && t <= sched.steps, "ddim_step: need 0 <= t_prev <= t <= T");
  check(eta >= 0.0 && eta <= 1.0, "ddim_step: eta must be in [0,1]");
  double ab_t = sched.alpha_bar(t);
  check(ab_t < 1.0, "ddim_step: alpha_bar(t) == 1, noise direction undefined");
  if (t_prev == t) return x_t;
  double ab_p = sched.alpha_bar(t_prev);

  double sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
  double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
  T inv_noise_scale = static_cast<T>(1.0 / std::sqrt(1.0 - ab_t));
  T sqrt_ab_t = static_cast<T>(std::sqrt(ab_t));
  T sqrt_ab_p = static_cast<T>(std::sqrt(ab_p));

  Tensor<T> out(x_t.shape);
  for (int64_t i = 0; i < x_t.numel(); ++i) {
    T eps_hat = (x_t[i] - sqrt_ab_t * x0_pred[i]) * inv_noise_scale;
    T v = sqrt_ab_p * x0_pred[i] + static_cast<T>(dir) * eps_hat;
    if (sigma > 0.0) {
      check(rng != nullptr, "ddim_step: eta > 0 requires an rng");
      v += static_cast<T>(sigma * rng->normal());
    }
    out[i] = v;
  }
  return out;
}

struct TimeEmbedding {
  int dim = 0;
  std::vector<double> values;
};

// Sinusoids at geometrically spaced frequencies; first half sin, second cos.
inline TimeEmbedding time_embedding(int t, int dim) {
  check(dim >= 2 && dim % 2 == 0, "time_embedding: dim must be even and >= 2");
  check(t >= 0, "time_embedding: t must be >= 0");
  TimeEmbedding e;
  e.dim = dim;
  e.values.resize(dim);
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -static_cast<double>(i) / half);
    e.values[i] = std::sin(t * freq);
    e.values[half + i] = std::cos(t * freq);
  }
  return e;
}

}  // namespace diffinst
