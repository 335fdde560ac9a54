// SPDX-License-Identifier: Apache-2.0
#include "mtkd/ops.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace mtkd {
namespace {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::logic_error(std::string(op) + ": operands on different tapes");
}

[[noreturn]] void shape_fail(const char* op, const std::string& a, const std::string& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + a + " and " + b);
}

template <typename T>
void require_finite_input(const Matrix<T>& m, const char* op) {
  if (!all_finite(m)) throw NumericError(std::string(op) + ": non-finite input");
}

/// 1 x n sums over the rows of m, as a matrix-vector product.
template <typename T>
Matrix<T> column_sums(const Matrix<T>& m) {
  Matrix<T> out(1, m.cols());
  out.noalias() = RowVector<T>::Ones(m.rows()) * m;
  return out;
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) shape_fail("matmul", shape_str(a.value()), shape_str(b.value()));
  Matrix<T> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "matmul_nt");
  if (a.cols() != b.cols()) shape_fail("matmul_nt", shape_str(a.value()), shape_str(b.value()));
  Matrix<T> out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  return a.tape().record("matmul_nt", std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value());
    if (b.requires_grad()) t.accumulate(b, g.transpose() * a.value());
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "add");
  if (a.rows() != b.rows() || a.cols() != b.cols())
    shape_fail("add", shape_str(a.value()), shape_str(b.value()));
  Matrix<T> out = a.value() + b.value();
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "sub");
  if (a.rows() != b.rows() || a.cols() != b.cols())
    shape_fail("sub", shape_str(a.value()), shape_str(b.value()));
  Matrix<T> out = a.value() - b.value();
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, g);
    if (b.requires_grad()) t.accumulate(b, -g);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "mul");
  if (a.rows() != b.rows() || a.cols() != b.cols())
    shape_fail("mul", shape_str(a.value()), shape_str(b.value()));
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Matrix<T>& g) {
    if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

template <typename T>
Var<T> scale(Var<T> a, Scalar<T> s) {
  Matrix<T> out = a.value() * s;
  return a.tape().record("scale", std::move(out), {a},
                         [a, s](Tape<T>& t, const Matrix<T>& g) { t.accumulate(a, g * s); });
}

template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  require_same_tape(a, bias, "add_bias");
  if (bias.rows() != 1 || bias.cols() != a.cols())
    shape_fail("add_bias", shape_str(a.value()), shape_str(bias.value()));
  Matrix<T> out = a.value().rowwise() + bias.value().row(0);
  return a.tape().record("add_bias", std::move(out), {a, bias},
                         [a, bias](Tape<T>& t, const Matrix<T>& g) {
                           t.accumulate(a, g);
                           if (bias.requires_grad()) t.accumulate(bias, column_sums(g));
                         });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  require_same_tape(x, w, "linear");
  require_same_tape(x, bias, "linear");
  if (x.cols() != w.rows()) shape_fail("linear", shape_str(x.value()), shape_str(w.value()));
  if (bias.rows() != 1 || bias.cols() != w.cols())
    shape_fail("linear", shape_str(w.value()), shape_str(bias.value()));
  Matrix<T> out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += bias.value().row(0);
  return x.tape().record("linear", std::move(out), {x, w, bias}, [x, w, bias](Tape<T>& t, const Matrix<T>& g) {
    if (x.requires_grad()) t.accumulate(x, g * w.value().transpose());
    if (w.requires_grad()) t.accumulate(w, x.value().transpose() * g);
    if (bias.requires_grad()) t.accumulate(bias, column_sums(g));
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Matrix<T> out = a.value().transpose();
  return a.tape().record("transpose", std::move(out), {a},
                         [a](Tape<T>& t, const Matrix<T>& g) { t.accumulate(a, g.transpose()); });
}

template <typename T>
Var<T> reshape(Var<T> a, Index rows, Index cols) {
  if (rows <= 0 || cols <= 0 || rows * cols != a.value().size())
    shape_fail("reshape", shape_str(a.value()), shape_str(rows, cols));
  Matrix<T> out = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
  const Index r0 = a.rows(), c0 = a.cols();
  return a.tape().record("reshape", std::move(out), {a}, [a, r0, c0](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, Eigen::Map<const Matrix<T>>(g.data(), r0, c0));
  });
}

template <typename T>
Var<T> slice(Var<T> a, Index row0, Index col0, Index rows, Index cols) {
  if (row0 < 0 || col0 < 0 || rows <= 0 || cols <= 0 || row0 + rows > a.rows() || col0 + cols > a.cols())
    shape_fail("slice", shape_str(a.value()),
               "rows " + std::to_string(row0) + "+" + std::to_string(rows) + ", cols " +
                   std::to_string(col0) + "+" + std::to_string(cols));
  Matrix<T> out = a.value().block(row0, col0, rows, cols);
  return a.tape().record("slice", std::move(out), {a},
                         [a, row0, col0](Tape<T>& t, const Matrix<T>& g) {
                           Matrix<T> full = Matrix<T>::Zero(a.rows(), a.cols());
                           full.block(row0, col0, g.rows(), g.cols()) = g;
                           t.accumulate(a, std::move(full));
                         });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Index cols = 0;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p, "concat_cols");
    if (p.rows() != parts[0].rows())
      shape_fail("concat_cols", shape_str(parts[0].value()), shape_str(p.value()));
    cols += p.cols();
  }
  Matrix<T> out(parts[0].rows(), cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return parts[0].tape().record("concat_cols", std::move(out), parts, [inputs](Tape<T>& t, const Matrix<T>& g) {
    Index off = 0;
    for (const auto& p : inputs) {
      t.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Index rows = 0;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p, "concat_rows");
    if (p.cols() != parts[0].cols())
      shape_fail("concat_rows", shape_str(parts[0].value()), shape_str(p.value()));
    rows += p.rows();
  }
  Matrix<T> out(rows, parts[0].cols());
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return parts[0].tape().record("concat_rows", std::move(out), parts, [inputs](Tape<T>& t, const Matrix<T>& g) {
    Index off = 0;
    for (const auto& p : inputs) {
      t.accumulate(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

template <typename T>
Var<T> reduce_sum(Var<T> a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record("reduce_sum", std::move(out), {a}, [a](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, Matrix<T>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

template <typename T>
Var<T> reduce_mean(Var<T> a) {
  Matrix<T> out(1, 1);
  const T n = static_cast<T>(a.value().size());
  out(0, 0) = a.value().sum() / n;
  return a.tape().record("reduce_mean", std::move(out), {a}, [a, n](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(a, Matrix<T>::Constant(a.rows(), a.cols(), g(0, 0) / n));
  });
}

template <typename T>
Var<T> embedding_lookup(Var<T> table, std::span<const int> ids) {
  const Matrix<T>& tab = table.value();
  Matrix<T> out(static_cast<Index>(ids.size()), tab.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tab.rows())
      throw ValidationError("embedding_lookup: id " + std::to_string(ids[i]) + " out of range for table " +
                            shape_str(tab));
    out.row(static_cast<Index>(i)) = tab.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape().record("embedding_lookup", std::move(out), {table},
                             [table, idx = std::move(idx)](Tape<T>& t, const Matrix<T>& g) {
                               Matrix<T> d = Matrix<T>::Zero(table.rows(), table.cols());
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 d.row(idx[i]) += g.row(static_cast<Index>(i));
                               t.accumulate(table, std::move(d));
                             });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, Scalar<T> eps) {
  const Index n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n) shape_fail("layer_norm", shape_str(x.value()), shape_str(gain.value()));
  if (bias.rows() != 1 || bias.cols() != n) shape_fail("layer_norm", shape_str(x.value()), shape_str(bias.value()));
  const Matrix<T>& xv = x.value();
  auto xhat = std::make_shared<Matrix<T>>(xv.rows(), n);
  auto rstd = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)(r) = rs;
    xhat->row(r) = (xv.row(r).array() - mean) * rs;
  }
  Matrix<T> out = (xhat->array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return x.tape().record(
      "layer_norm", std::move(out), {x, gain, bias}, [x, gain, bias, xhat, rstd](Tape<T>& t, const Matrix<T>& g) {
        if (gain.requires_grad()) t.accumulate(gain, column_sums(Matrix<T>(g.cwiseProduct(*xhat))));
        if (bias.requires_grad()) t.accumulate(bias, column_sums(g));
        if (x.requires_grad()) {
          const Index n = g.cols();
          Matrix<T> gy = g.array().rowwise() * gain.value().row(0).array();
          Matrix<T> dx(g.rows(), n);
          for (Index r = 0; r < g.rows(); ++r) {
            const T m1 = gy.row(r).mean();
            const T m2 = gy.row(r).dot(xhat->row(r)) / static_cast<T>(n);
            dx.row(r) = (gy.row(r).array() - m1 - xhat->row(r).array() * m2) * (*rstd)(r);
          }
          t.accumulate(x, std::move(dx));
        }
      });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  const T c = static_cast<T>(kGeluSqrt2OverPi);
  const T k = static_cast<T>(kGeluCubic);
  const auto xa = x.value().array();
  Matrix<T> out = (T(0.5) * xa * (T(1) + ((xa + k * xa.cube()) * c).tanh())).matrix();
  return x.tape().record("gelu", std::move(out), {x}, [x, c, k](Tape<T>& t, const Matrix<T>& g) {
    const auto xa = x.value().array();
    const auto tt = ((xa + k * xa.cube()) * c).tanh();
    Matrix<T> d(xa.rows(), xa.cols());
    d.array() = tt;
    d.array() = g.array() * (T(0.5) * (T(1) + d.array()) +
                             T(0.5) * xa * (T(1) - d.array().square()) * c * (T(1) + T(3) * k * xa.square()));
    t.accumulate(x, std::move(d));
  });
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  if (logits.cols() < 1) throw DimensionError("softmax_rows: need at least one column");
  require_finite_input(logits, "softmax_rows");
  Matrix<T> out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename T>
Matrix<T> log_softmax_rows(const Matrix<T>& logits) {
  if (logits.cols() < 1) throw DimensionError("log_softmax_rows: need at least one column");
  require_finite_input(logits, "log_softmax_rows");
  Matrix<T> out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    const T lse = std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - mx - lse;
  }
  return out;
}

template <typename T>
Var<T> softmax_rows(Var<T> logits) {
  Matrix<T> out = softmax_rows<T>(logits.value());
  auto y = std::make_shared<Matrix<T>>(out);
  return logits.tape().record("softmax_rows", std::move(out), {logits}, [logits, y](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> d(g.rows(), g.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      const T dot = g.row(r).dot(y->row(r));
      d.row(r) = y->row(r).array() * (g.row(r).array() - dot);
    }
    t.accumulate(logits, std::move(d));
  });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> logits) {
  Matrix<T> out = log_softmax_rows<T>(logits.value());
  auto p = std::make_shared<Matrix<T>>(out.array().exp().matrix());
  return logits.tape().record("log_softmax_rows", std::move(out), {logits},
                              [logits, p](Tape<T>& t, const Matrix<T>& g) {
                                Matrix<T> d(g.rows(), g.cols());
                                for (Index r = 0; r < g.rows(); ++r) {
                                  const T s = g.row(r).sum();
                                  d.row(r) = g.row(r).array() - p->row(r).array() * s;
                                }
                                t.accumulate(logits, std::move(d));
                              });
}

template <typename T>
Var<T> causal_mask_fill(Var<T> scores, Index block, Scalar<T> fill) {
  if (block <= 0 || scores.cols() != block || scores.rows() % block != 0)
    shape_fail("causal_mask_fill", shape_str(scores.value()), "block " + std::to_string(block));
  Matrix<T> out = scores.value();
  for (Index r = 0; r < out.rows(); ++r) {
    const Index i = r % block;
    for (Index j = i + 1; j < block; ++j) out(r, j) = fill;
  }
  return scores.tape().record("causal_mask_fill", std::move(out), {scores},
                              [scores, block](Tape<T>& t, const Matrix<T>& g) {
                                Matrix<T> d = g;
                                for (Index r = 0; r < d.rows(); ++r) {
                                  const Index i = r % block;
                                  for (Index j = i + 1; j < block; ++j) d(r, j) = T(0);
                                }
                                t.accumulate(scores, std::move(d));
                              });
}

template <typename T>
Var<T> causal_self_attention(Var<T> qkv, int n_heads, Index seq_len) {
  if (seq_len <= 0 || qkv.rows() % seq_len != 0 || qkv.cols() % 3 != 0)
    shape_fail("causal_self_attention", shape_str(qkv.value()), "seq_len " + std::to_string(seq_len));
  const Index d = qkv.cols() / 3;
  if (n_heads <= 0 || d % n_heads != 0)
    throw DimensionError("causal_self_attention: " + std::to_string(n_heads) + " heads do not divide width " +
                         std::to_string(d));
  const Index dh = d / n_heads;
  const Index n_seq = qkv.rows() / seq_len;
  const Index T_ = seq_len;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  const Matrix<T>& x = qkv.value();

  // Attention probabilities, one T x T block per (sequence, head).
  auto probs = std::make_shared<Matrix<T>>(n_seq * n_heads * T_, T_);
  Matrix<T> out(qkv.rows(), d);
  Matrix<T> s(T_, T_);
  for (Index n = 0; n < n_seq; ++n) {
    for (Index h = 0; h < n_heads; ++h) {
      const auto q = x.block(n * T_, h * dh, T_, dh);
      const auto k = x.block(n * T_, d + h * dh, T_, dh);
      const auto v = x.block(n * T_, 2 * d + h * dh, T_, dh);
      s.noalias() = q * k.transpose();
      auto p = probs->block((n * n_heads + h) * T_, 0, T_, T_);
      for (Index i = 0; i < T_; ++i) {
        auto pr = p.row(i);
        const T mx = s.row(i).head(i + 1).maxCoeff() * sc;
        pr.head(i + 1) = (s.row(i).head(i + 1).array() * sc - mx).exp().matrix();
        pr.head(i + 1) *= T(1) / pr.head(i + 1).sum();
        pr.tail(T_ - i - 1).setZero();
      }
      out.block(n * T_, h * dh, T_, dh).noalias() = p * v;
    }
  }
  return qkv.tape().record(
      "causal_self_attention", std::move(out), {qkv},
      [qkv, probs, n_heads, n_seq, T_, d, dh, sc](Tape<T>& t, const Matrix<T>& g) {
        const Matrix<T>& x = qkv.value();
        Matrix<T> dx(x.rows(), x.cols());
        Matrix<T> dp(T_, T_);
        for (Index n = 0; n < n_seq; ++n) {
          for (Index h = 0; h < n_heads; ++h) {
            const auto q = x.block(n * T_, h * dh, T_, dh);
            const auto k = x.block(n * T_, d + h * dh, T_, dh);
            const auto v = x.block(n * T_, 2 * d + h * dh, T_, dh);
            const auto go = g.block(n * T_, h * dh, T_, dh);
            const auto p = probs->block((n * n_heads + h) * T_, 0, T_, T_);
            dx.block(n * T_, 2 * d + h * dh, T_, dh).noalias() = p.transpose() * go;
            dp.noalias() = go * v.transpose();
            for (Index i = 0; i < T_; ++i) {
              const auto pr = p.row(i).head(i + 1).array();
              auto dr = dp.row(i);
              const T dot = (pr * dr.head(i + 1).array()).sum();
              dr.head(i + 1) = (pr * (dr.head(i + 1).array() - dot) * sc).matrix();
              dr.tail(T_ - i - 1).setZero();
            }
            dx.block(n * T_, h * dh, T_, dh).noalias() = dp * k;
            dx.block(n * T_, d + h * dh, T_, dh).noalias() = dp.transpose() * q;
          }
        }
        t.accumulate(qkv, std::move(dx));
      });
}

template <typename T>
Var<T> weighted_sum(Var<T> x, const Matrix<T>& weights) {
  if (weights.rows() != x.rows() || weights.cols() != x.cols())
    shape_fail("weighted_sum", shape_str(x.value()), shape_str(weights));
  require_finite_input(weights, "weighted_sum");
  Matrix<T> out(1, 1);
  out(0, 0) = x.value().cwiseProduct(weights).sum();
  auto w = std::make_shared<Matrix<T>>(weights);
  return x.tape().record("weighted_sum", std::move(out), {x},
                         [x, w](Tape<T>& t, const Matrix<T>& g) { t.accumulate(x, *w * g(0, 0)); });
}

template <typename T>
Var<T> pick_weighted_sum(Var<T> x, std::span<const int> cols, std::span<const T> row_weights) {
  if (static_cast<Index>(cols.size()) != x.rows() || row_weights.size() != cols.size())
    shape_fail("pick_weighted_sum", shape_str(x.value()),
               std::to_string(cols.size()) + " picks / " + std::to_string(row_weights.size()) + " weights");
  const Matrix<T>& xv = x.value();
  T acc = 0;
  for (std::size_t r = 0; r < cols.size(); ++r) {
    if (row_weights[r] == T(0)) continue;
    if (cols[r] < 0 || cols[r] >= xv.cols())
      throw ValidationError("pick_weighted_sum: column " + std::to_string(cols[r]) + " out of range for " +
                            shape_str(xv));
    acc += row_weights[r] * xv(static_cast<Index>(r), cols[r]);
  }
  Matrix<T> out(1, 1);
  out(0, 0) = acc;
  std::vector<int> c(cols.begin(), cols.end());
  std::vector<T> w(row_weights.begin(), row_weights.end());
  return x.tape().record("pick_weighted_sum", std::move(out), {x},
                         [x, c = std::move(c), w = std::move(w)](Tape<T>& t, const Matrix<T>& g) {
                           Matrix<T> d = Matrix<T>::Zero(x.rows(), x.cols());
                           for (std::size_t r = 0; r < c.size(); ++r)
                             if (w[r] != T(0)) d(static_cast<Index>(r), c[r]) = w[r] * g(0, 0);
                           t.accumulate(x, std::move(d));
                         });
}

template <typename T>
Var<T> row_sq_dist(Var<T> x, const Matrix<T>& target, std::span<const T> row_weights) {
  if (target.rows() != x.rows() || target.cols() != x.cols())
    shape_fail("row_sq_dist", shape_str(x.value()), shape_str(target));
  if (static_cast<Index>(row_weights.size()) != x.rows())
    shape_fail("row_sq_dist", shape_str(x.value()), std::to_string(row_weights.size()) + " row weights");
  require_finite_input(target, "row_sq_dist");
  auto diff = std::make_shared<Matrix<T>>(x.value() - target);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> w(row_weights.data(), x.rows());
  Matrix<T> out(1, 1);
  out(0, 0) = diff->rowwise().squaredNorm().dot(w);
  Eigen::Matrix<T, Eigen::Dynamic, 1> wc = w;
  return x.tape().record("row_sq_dist", std::move(out), {x}, [x, diff, wc](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(x, (diff->array().colwise() * (wc.array() * (T(2) * g(0, 0)))).matrix());
  });
}

#define MTKD_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> matmul(Var<T>, Var<T>);                                                         \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                      \
  template Var<T> add(Var<T>, Var<T>);                                                            \
  template Var<T> sub(Var<T>, Var<T>);                                                            \
  template Var<T> mul(Var<T>, Var<T>);                                                            \
  template Var<T> scale(Var<T>, Scalar<T>);                                                       \
  template Var<T> add_bias(Var<T>, Var<T>);                                                       \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                 \
  template Var<T> transpose(Var<T>);                                                              \
  template Var<T> reshape(Var<T>, Index, Index);                                                  \
  template Var<T> slice(Var<T>, Index, Index, Index, Index);                                      \
  template Var<T> concat_cols(std::span<const Var<T>>);                                           \
  template Var<T> concat_rows(std::span<const Var<T>>);                                           \
  template Var<T> reduce_sum(Var<T>);                                                             \
  template Var<T> reduce_mean(Var<T>);                                                            \
  template Var<T> embedding_lookup(Var<T>, std::span<const int>);                                 \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, Scalar<T>);                                  \
  template Var<T> gelu(Var<T>);                                                                   \
  template Var<T> softmax_rows(Var<T>);                                                           \
  template Var<T> log_softmax_rows(Var<T>);                                                       \
  template Var<T> causal_mask_fill(Var<T>, Index, Scalar<T>);                                     \
  template Var<T> causal_self_attention(Var<T>, int, Index);                                      \
  template Var<T> weighted_sum(Var<T>, const Matrix<T>&);                                         \
  template Var<T> pick_weighted_sum(Var<T>, std::span<const int>, std::span<const T>);            \
  template Var<T> row_sq_dist(Var<T>, const Matrix<T>&, std::span<const T>);                      \
  template Matrix<T> softmax_rows(const Matrix<T>&);                                              \
  template Matrix<T> log_softmax_rows(const Matrix<T>&);

MTKD_INSTANTIATE_OPS(float)
MTKD_INSTANTIATE_OPS(double)

}  // namespace mtkd
