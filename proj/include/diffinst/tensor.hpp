#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "diffinst/common.hpp"
#include "diffinst/rng.hpp"

namespace diffinst {

// Dense row-major tensor. Shapes are small (images, feature maps, parameter
// matrices), so everything is value-semantic vectors of scalars.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), T(0)) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    check(data.size() == static_cast<size_t>(numel_of(shape)), "Tensor: data/shape mismatch");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  static Tensor randn(std::vector<int> s, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[i]; }

  T& operator[](int64_t i) { return data[i]; }
  T operator[](int64_t i) const { return data[i]; }

  // Row-major indexing helpers for the common ranks.
  T& at(int i, int j) { return data[static_cast<int64_t>(i) * shape[1] + j]; }
  T at(int i, int j) const { return data[static_cast<int64_t>(i) * shape[1] + j]; }
  T& at(int c, int y, int x) {
    return data[(static_cast<int64_t>(c) * shape[1] + y) * shape[2] + x];
  }
  T at(int c, int y, int x) const {
    return data[(static_cast<int64_t>(c) * shape[1] + y) * shape[2] + x];
  }

  Tensor reshaped(std::vector<int> s) const {
    check(numel_of(s) == numel(), "reshape: element count mismatch");
    return Tensor(std::move(s), data);
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
  }

  using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<EigenMat>;
  using ConstMap = Eigen::Map<const EigenMat>;

  Map as_matrix(int rows, int cols) {
    check(static_cast<int64_t>(rows) * cols == numel(), "as_matrix: size mismatch");
    return Map(data.data(), rows, cols);
  }
  ConstMap as_matrix(int rows, int cols) const {
    check(static_cast<int64_t>(rows) * cols == numel(), "as_matrix: size mismatch");
    return ConstMap(data.data(), rows, cols);
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace diffinst
