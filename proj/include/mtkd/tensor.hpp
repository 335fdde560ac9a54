// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>

#include "mtkd/errors.hpp"

namespace mtkd {

using Index = Eigen::Index;

/// Row-major dense matrix, the storage type behind every tensor.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using IndexMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::array<Index, 2>;

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << '[' << rows << 'x' << cols << ']';
  return os.str();
}

template <typename Derived>
std::string shape_str(const Eigen::DenseBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

/// A named, persistent array (model parameter or frozen buffer).
///
/// All model math is batched over rows, so tensors are rank 2 with scalars
/// stored as 1x1 and vectors as 1xn. `grad` stays empty until a backward pass
/// delivers a gradient to a tensor with `requires_grad` set.
template <typename T>
struct Tensor {
  std::string name;
  Matrix<T> data;
  bool requires_grad = false;
  std::optional<Matrix<T>> grad;

  Tensor() = default;
  Tensor(std::string n, Matrix<T> d, bool trainable = false)
      : name(std::move(n)), data(std::move(d)), requires_grad(trainable) {}

  Shape shape() const { return {data.rows(), data.cols()}; }
  Index size() const { return data.size(); }

  void zero_grad() { grad.reset(); }

  void accumulate_grad(const Matrix<T>& g) {
    if (g.rows() != data.rows() || g.cols() != data.cols())
      throw DimensionError("gradient " + shape_str(g) + " does not match tensor '" + name + "' " +
                           shape_str(data));
    if (grad)
      *grad += g;
    else
      grad = g;
  }

  void accumulate_grad(Matrix<T>&& g) {
    if (g.rows() != data.rows() || g.cols() != data.cols())
      throw DimensionError("gradient " + shape_str(g) + " does not match tensor '" + name + "' " +
                           shape_str(data));
    if (grad)
      *grad += g;
    else
      grad = std::move(g);
  }
};

/// True when no entry is NaN or infinite. Any such entry turns x * 0 into NaN,
/// so a single vectorized sum answers the question.
template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  using S = typename Derived::Scalar;
  return !std::isnan((m.derived().array() * S(0)).sum());
}

}  // namespace mtkd
