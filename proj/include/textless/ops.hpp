#pragma once

// Differentiable operations over Tape-recorded values.
//
// All ops read their operands as matrices (see Tensor::rows/cols). Packed
// batches put several sequences end to end in the row axis; ops that mix
// rows across time (attention) take the Segments that delimit them.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "textless/autograd.hpp"
#include "textless/tensor.hpp"

namespace textless {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ColVecMap = Eigen::Map<Eigen::VectorXd>;

inline ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_mat(Tensor& t) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_mat(std::vector<double>& g, std::size_t rows, std::size_t cols) {
  return MatMap(g.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatMap as_mat(const std::vector<double>& g, std::size_t rows, std::size_t cols) {
  return ConstMatMap(g.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& what, const Shape& a) {
  throw ShapeError(op + ": " + what + " (got " + to_string(a) + ")");
}
[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

inline Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands recorded on different tapes");
  return a.tape();
}

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const auto& v : vs) {
    if (v.needs_grad()) return true;
  }
  return false;
}

inline Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

inline Var matmul(const Var& a, const Var& b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows() || bv.rank() < 1) detail::shape_error("matmul", a.shape(), b.shape());
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  detail::as_mat(out).noalias() = detail::as_mat(av) * detail::as_mat(bv);
  return tape.push(std::move(out), detail::any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const auto& av = a.value();
    const auto& bv = b.value();
    auto gout = detail::as_mat(t.grad_buffer(self), av.rows(), bv.cols());
    if (a.needs_grad()) {
      detail::as_mat(t.grad_buffer(a.id()), av.rows(), av.cols()).noalias() += gout * detail::as_mat(bv).transpose();
    }
    if (b.needs_grad()) {
      detail::as_mat(t.grad_buffer(b.id()), bv.rows(), bv.cols()).noalias() += detail::as_mat(av).transpose() * gout;
    }
  });
}

/// x * weight + bias, weight in x out, bias a row of width out.
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  auto& tape = detail::same_tape(x, weight);
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  if (xv.cols() != wv.rows() || wv.rank() != 2) detail::shape_error("linear", x.shape(), weight.shape());
  if (bv.size() != wv.cols()) detail::shape_error("linear(bias)", weight.shape(), bias.shape());
  Tensor out = Tensor::matrix(xv.rows(), wv.cols());
  auto om = detail::as_mat(out);
  om.noalias() = detail::as_mat(xv) * detail::as_mat(wv);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data().data(), static_cast<Eigen::Index>(bv.size()));
  return tape.push(std::move(out), detail::any_grad({x, weight, bias}), [x, weight, bias](Tape& t, std::size_t self) {
    const auto& xv = x.value();
    const auto& wv = weight.value();
    auto gout = detail::as_mat(t.grad_buffer(self), xv.rows(), wv.cols());
    if (x.needs_grad()) {
      detail::as_mat(t.grad_buffer(x.id()), xv.rows(), xv.cols()).noalias() += gout * detail::as_mat(wv).transpose();
    }
    if (weight.needs_grad()) {
      detail::as_mat(t.grad_buffer(weight.id()), wv.rows(), wv.cols()).noalias() += detail::as_mat(xv).transpose() * gout;
    }
    if (bias.needs_grad()) {
      // explicit loop: Eigen's vectorized column sums depend on buffer alignment
      auto& gb = t.grad_buffer(bias.id());
      const auto& g = t.grad_buffer(self);
      const auto cols = wv.cols();
      for (std::size_t r = 0; r < xv.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    }
  });
}

namespace detail {

template <class Fwd, class Da, class Db>
Var binary_same_shape(const char* name, const Var& a, const Var& b, Fwd fwd, Da da, Db db) {
  auto& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.size() != bv.size() || av.cols() != bv.cols()) shape_error(name, a.shape(), b.shape());
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  return tape.push(std::move(out), any_grad({a, b}), [a, b, da, db](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (a.needs_grad()) {
      auto& ga = t.grad_buffer(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(av[i], bv[i]);
    }
    if (b.needs_grad()) {
      auto& gb = t.grad_buffer(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(av[i], bv[i]);
    }
  });
}

template <class Fwd, class Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  auto& tape = a.tape();
  const auto& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return tape.push(std::move(out), a.needs_grad(), [a, deriv](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = a.value();
    auto& ga = t.grad_buffer(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(av[i]);
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return detail::binary_same_shape(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary_same_shape(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary_same_shape(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var scale(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double) { return c; });
}

/// Adds a row vector to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  auto& tape = detail::same_tape(a, row);
  const auto& av = a.value();
  const auto& rv = row.value();
  if (rv.size() != av.cols()) detail::shape_error("add_row", a.shape(), row.shape());
  Tensor out = av;
  out.set_requires_grad(false);
  const auto c = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += rv[j];
  }
  return tape.push(std::move(out), detail::any_grad({a, row}), [a, row](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (a.needs_grad()) {
      auto& ga = t.grad_buffer(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (row.needs_grad()) {
      auto& gr = t.grad_buffer(row.id());
      const auto c = gr.size();
      for (std::size_t i = 0; i < g.size(); ++i) gr[i % c] += g[i];
    }
  });
}

/// Tanh approximation of GELU.
inline Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  const auto& av = a.value();
  Tensor out(av.shape());
  std::vector<double> th(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    const double u = k * (x + c * x * x * x);
    // tanh(u) = 1 - 2 / (e^{2u} + 1); saturates cleanly for large |u|
    th[i] = 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0);
    out[i] = 0.5 * x * (1.0 + th[i]);
  }
  return a.tape().push(std::move(out), a.needs_grad(), [a, th = std::move(th)](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = a.value();
    auto& ga = t.grad_buffer(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = av[i];
      const double du = k * (1.0 + 3.0 * c * x * x);
      ga[i] += g[i] * (0.5 * (1.0 + th[i]) + 0.5 * x * (1.0 - th[i] * th[i]) * du);
    }
  });
}

inline Var relu(const Var& a) {
  return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

/// Identity forward; blocks every gradient path through it.
inline Var stop_gradient(const Var& a) {
  Tensor v = a.value();
  v.set_requires_grad(false);
  return a.tape().push(std::move(v), false, {});
}

inline Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a.value().size()) detail::shape_error("reshape", a.shape(), shape);
  Tensor out = a.value().reshaped(std::move(shape));
  out.set_requires_grad(false);
  return a.tape().push(std::move(out), a.needs_grad(), [a](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Row gather; an index of -1 produces a zero row.
inline Var gather_rows(const Var& a, std::vector<long> index) {
  const auto& av = a.value();
  const auto c = av.cols();
  for (auto i : index) {
    if (i < -1 || i >= static_cast<long>(av.rows())) {
      throw std::out_of_range("gather_rows: index " + std::to_string(i) + " outside " + to_string(a.shape()));
    }
  }
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0) continue;
    const auto src = av.row(static_cast<std::size_t>(index[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return a.tape().push(std::move(out), a.needs_grad(), [a, index = std::move(index)](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(a.id());
    const auto c = a.value().cols();
    for (std::size_t r = 0; r < index.size(); ++r) {
      if (index[r] < 0) continue;
      const auto base = static_cast<std::size_t>(index[r]) * c;
      for (std::size_t j = 0; j < c; ++j) ga[base + j] += g[r * c + j];
    }
  });
}

/// Embedding lookup: rows of table selected by ids.
inline Var embedding(const Var& table, std::span<const int> ids) {
  std::vector<long> idx(ids.begin(), ids.end());
  for (auto i : idx) {
    if (i < 0) throw std::out_of_range("embedding: negative id " + std::to_string(i));
  }
  return gather_rows(table, std::move(idx));
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

inline Tensor normalize_rows(const Tensor& av, std::vector<double>& norms, double eps) {
  const auto rows = av.rows();
  const auto c = av.cols();
  Tensor out(av.shape());
  norms.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += av[r * c + j] * av[r * c + j];
    norms[r] = std::sqrt(ss);
    const double n = norms[r] < eps ? 1.0 : norms[r];
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = av[r * c + j] / n;
  }
  return out;
}

}  // namespace detail

/// Unit-norm rows of a plain tensor, bit-identical to the differentiable op.
inline Tensor l2_normalize(const Tensor& a, double eps = 1e-12) {
  std::vector<double> norms;
  return detail::normalize_rows(a, norms, eps);
}

/// Unit-norm rows. Rows with norm below eps pass through unchanged.
inline Var l2_normalize(const Var& a, double eps = 1e-12) {
  std::vector<double> norms;
  Tensor out = detail::normalize_rows(a.value(), norms, eps);
  Tensor saved = out;
  return a.tape().push(std::move(out), a.needs_grad(),
                       [a, eps, norms = std::move(norms), y = std::move(saved)](Tape& t, std::size_t self) {
                         const auto& g = t.grad_buffer(self);
                         auto& ga = t.grad_buffer(a.id());
                         const auto c = y.cols();
                         for (std::size_t r = 0; r < norms.size(); ++r) {
                           const auto base = r * c;
                           if (norms[r] < eps) {
                             for (std::size_t j = 0; j < c; ++j) ga[base + j] += g[base + j];
                             continue;
                           }
                           double dot = 0;
                           for (std::size_t j = 0; j < c; ++j) dot += g[base + j] * y[base + j];
                           for (std::size_t j = 0; j < c; ++j) ga[base + j] += (g[base + j] - dot * y[base + j]) / norms[r];
                         }
                       });
}

namespace detail {

inline Var layer_norm_impl(const Var& x, const Var* gain, const Var* bias, double eps) {
  const auto& xv = x.value();
  const auto rows = xv.rows();
  const auto c = xv.cols();
  if (gain && gain->value().size() != c) shape_error("layer_norm(gain)", x.shape(), gain->shape());
  if (bias && bias->value().size() != c) shape_error("layer_norm(bias)", x.shape(), bias->shape());
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  std::vector<double> inv_std(rows);
  const std::vector<double> ones(c, 1.0), zeros(c, 0.0);
  const auto& gv = gain ? gain->value().values() : ones;
  const auto& bv = bias ? bias->value().values() : zeros;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto base = r * c;
    double mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xv[base + j];
    mean /= static_cast<double>(c);
    double var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xv[base + j] - mean) * (xv[base + j] - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[base + j] = (xv[base + j] - mean) * inv_std[r];
      out[base + j] = xhat[base + j] * gv[j] + bv[j];
    }
  }
  const bool needs = x.needs_grad() || (gain && gain->needs_grad()) || (bias && bias->needs_grad());
  Var g = gain ? *gain : Var();
  Var b = bias ? *bias : Var();
  return x.tape().push(std::move(out), needs,
                       [x, g, b, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                         const auto& gout = t.grad_buffer(self);
                         const auto c = xhat.cols();
                         const auto rows = xhat.rows();
                         if (g.valid() && g.needs_grad()) {
                           auto& gg = t.grad_buffer(g.id());
                           for (std::size_t i = 0; i < gout.size(); ++i) gg[i % c] += gout[i] * xhat[i];
                         }
                         if (b.valid() && b.needs_grad()) {
                           auto& gb = t.grad_buffer(b.id());
                           for (std::size_t i = 0; i < gout.size(); ++i) gb[i % c] += gout[i];
                         }
                         if (!x.needs_grad()) return;
                         auto& gx = t.grad_buffer(x.id());
                         std::vector<double> dxhat(c);
                         const std::vector<double> ones(c, 1.0);
                         const auto& gv = g.valid() ? g.value().values() : ones;
                         for (std::size_t r = 0; r < rows; ++r) {
                           const auto base = r * c;
                           double m1 = 0, m2 = 0;
                           for (std::size_t j = 0; j < c; ++j) {
                             dxhat[j] = gout[base + j] * gv[j];
                             m1 += dxhat[j];
                             m2 += dxhat[j] * xhat[base + j];
                           }
                           m1 /= static_cast<double>(c);
                           m2 /= static_cast<double>(c);
                           for (std::size_t j = 0; j < c; ++j) {
                             gx[base + j] += inv_std[r] * (dxhat[j] - m1 - xhat[base + j] * m2);
                           }
                         }
                       });
}

}  // namespace detail

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  return detail::layer_norm_impl(x, &gain, &bias, eps);
}

/// Row standardization without the affine part.
inline Var layer_norm(const Var& x, double eps = 1e-5) { return detail::layer_norm_impl(x, nullptr, nullptr, eps); }

/// Row-wise softmax.
inline Var softmax(const Var& x) {
  const auto& xv = x.value();
  const auto c = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto base = r * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, xv[base + j]);
    double z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (out[base + j] = std::exp(xv[base + j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[base + j] /= z;
  }
  Tensor y = out;
  return x.tape().push(std::move(out), x.needs_grad(), [x, y = std::move(y)](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(x.id());
    const auto c = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const auto base = r * c;
      double dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < c; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
    }
  });
}

/// Mean negative log-likelihood of labels under row-wise softmax(logits).
/// Rows labelled -1 are ignored; with no labelled rows the loss is 0.
inline Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  const auto c = lv.cols();
  if (labels.size() != lv.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(logits.shape()));
  }
  Tensor probs(lv.shape());
  double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    const auto base = r * c;
    std::size_t top = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (lv[base + j] > lv[base + top]) top = j;
    }
    const double mx = lv[base + top];
    double rest = 0;  // partition function minus the max term's exact 1
    for (std::size_t j = 0; j < c; ++j) {
      probs[base + j] = std::exp(lv[base + j] - mx);
      if (j != top) rest += probs[base + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[base + j] /= 1.0 + rest;
    if (labels[r] < 0) continue;
    if (static_cast<std::size_t>(labels[r]) >= c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) + " >= " + std::to_string(c));
    }
    total += std::log1p(rest) + (mx - lv[base + static_cast<std::size_t>(labels[r])]);
    ++count;
  }
  const double norm = count ? 1.0 / static_cast<double>(count) : 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape().push(Tensor::scalar(total * norm), logits.needs_grad(),
                            [logits, lab = std::move(lab), probs = std::move(probs), norm](Tape& t, std::size_t self) {
                              const double g = t.grad_buffer(self)[0] * norm;
                              auto& gl = t.grad_buffer(logits.id());
                              const auto c = probs.cols();
                              for (std::size_t r = 0; r < lab.size(); ++r) {
                                if (lab[r] < 0) continue;
                                const auto base = r * c;
                                for (std::size_t j = 0; j < c; ++j) gl[base + j] += g * probs[base + j];
                                gl[base + static_cast<std::size_t>(lab[r])] -= g;
                              }
                            });
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product multi-head attention over packed sequences.
///
/// q, k and v are (rows x width) with heads laid out as contiguous column
/// blocks. Query segment i attends only to key segment i; with causal set,
/// query row t of a segment sees key rows <= t of the same segment.
inline Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const Segments& q_segs,
                                const Segments& k_segs, bool causal) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const auto width = qv.cols();
  if (kv.cols() != width || vv.cols() != width || kv.rows() != vv.rows()) {
    throw ShapeError("multi_head_attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                     to_string(v.shape()));
  }
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("multi_head_attention: width " + std::to_string(width) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (q_segs.count() != k_segs.count() || q_segs.total() != qv.rows() || k_segs.total() != kv.rows()) {
    throw ShapeError("multi_head_attention: segments do not cover q " + to_string(q.shape()) + " / k " +
                     to_string(k.shape()));
  }
  const auto dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  using detail::RowMat;
  using Stride = Eigen::OuterStride<>;
  using Block = Eigen::Map<const RowMat, 0, Stride>;

  Tensor out = Tensor::matrix(qv.rows(), width);
  // attention probabilities per (segment, head), kept for backward
  std::vector<RowMat> probs;
  probs.reserve(q_segs.count() * heads);
  for (std::size_t s = 0; s < q_segs.count(); ++s) {
    const auto lq = static_cast<Eigen::Index>(q_segs.length[s]);
    const auto lk = static_cast<Eigen::Index>(k_segs.length[s]);
    for (std::size_t h = 0; h < heads; ++h) {
      Block qb(qv.data().data() + q_segs.offset[s] * width + h * dh, lq, static_cast<Eigen::Index>(dh),
               Stride(static_cast<Eigen::Index>(width)));
      Block kb(kv.data().data() + k_segs.offset[s] * width + h * dh, lk, static_cast<Eigen::Index>(dh),
               Stride(static_cast<Eigen::Index>(width)));
      Block vb(vv.data().data() + k_segs.offset[s] * width + h * dh, lk, static_cast<Eigen::Index>(dh),
               Stride(static_cast<Eigen::Index>(width)));
      RowMat scores = (qb * kb.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < lq; ++i) {
        const Eigen::Index visible = causal ? std::min(i + 1, lk) : lk;
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < visible; ++j) mx = std::max(mx, scores(i, j));
        double z = 0;
        for (Eigen::Index j = 0; j < lk; ++j) {
          const double e = j < visible ? std::exp(scores(i, j) - mx) : 0.0;
          scores(i, j) = e;
          z += e;
        }
        if (z > 0) scores.row(i) /= z;
      }
      Eigen::Map<RowMat, 0, Stride> ob(out.data().data() + q_segs.offset[s] * width + h * dh, lq,
                                       static_cast<Eigen::Index>(dh), Stride(static_cast<Eigen::Index>(width)));
      ob.noalias() = scores * vb;
      probs.push_back(std::move(scores));
    }
  }
  return q.tape().push(
      std::move(out), detail::any_grad({q, k, v}),
      [q, k, v, heads, dh, inv_sqrt, q_segs, k_segs, probs = std::move(probs)](Tape& t, std::size_t self) {
        const auto& qv = q.value();
        const auto& kv = k.value();
        const auto& vv = v.value();
        const auto width = qv.cols();
        const auto& gout = t.grad_buffer(self);
        double* gq = q.needs_grad() ? t.grad_buffer(q.id()).data() : nullptr;
        double* gk = k.needs_grad() ? t.grad_buffer(k.id()).data() : nullptr;
        double* gv = v.needs_grad() ? t.grad_buffer(v.id()).data() : nullptr;
        const auto W = static_cast<Eigen::Index>(width);
        const auto D = static_cast<Eigen::Index>(dh);
        std::size_t p = 0;
        for (std::size_t s = 0; s < q_segs.count(); ++s) {
          const auto lq = static_cast<Eigen::Index>(q_segs.length[s]);
          const auto lk = static_cast<Eigen::Index>(k_segs.length[s]);
          for (std::size_t h = 0; h < heads; ++h, ++p) {
            const auto qoff = q_segs.offset[s] * width + h * dh;
            const auto koff = k_segs.offset[s] * width + h * dh;
            Block qb(qv.data().data() + qoff, lq, D, Stride(W));
            Block kb(kv.data().data() + koff, lk, D, Stride(W));
            Block vb(vv.data().data() + koff, lk, D, Stride(W));
            Block go(gout.data() + qoff, lq, D, Stride(W));
            const RowMat& P = probs[p];
            if (gv) {
              Eigen::Map<RowMat, 0, Stride>(gv + koff, lk, D, Stride(W)).noalias() += P.transpose() * go;
            }
            if (!gq && !gk) continue;
            RowMat dP = go * vb.transpose();
            RowMat dS = P.cwiseProduct(dP);
            const Eigen::VectorXd rowdot = dS.rowwise().sum();
            dS -= P.cwiseProduct(rowdot.replicate(1, lk));
            dS *= inv_sqrt;
            if (gq) Eigen::Map<RowMat, 0, Stride>(gq + qoff, lq, D, Stride(W)).noalias() += dS * kb;
            if (gk) Eigen::Map<RowMat, 0, Stride>(gk + koff, lk, D, Stride(W)).noalias() += dS.transpose() * qb;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Upsampling

/// Transposed 1-D convolution with kernel width equal to the stride.
///
/// seq is (M x h), kernel has shape {h, stride, h_out}; output row m*stride+j
/// is seq[m] * kernel[:, j, :]. Output length is exactly M * stride.
inline Var conv_transpose_1d(const Var& seq, const Var& kernel, std::size_t stride) {
  if (stride < 1) throw std::invalid_argument("conv_transpose_1d: stride must be >= 1");
  const auto& kv = kernel.value();
  const auto& sv = seq.value();
  if (kv.rank() != 3 || kv.shape()[1] != stride || kv.shape()[0] != sv.cols()) {
    throw ShapeError("conv_transpose_1d: kernel " + to_string(kernel.shape()) + " does not fit input " +
                     to_string(seq.shape()) + " at stride " + std::to_string(stride));
  }
  const auto h_out = kv.shape()[2];
  Var flat_kernel = reshape(kernel, Shape{kv.shape()[0], stride * h_out});
  Var wide = matmul(seq, flat_kernel);
  return reshape(wide, Shape{sv.rows() * stride, h_out});
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
  double s = 0;
  for (double x : a.value().data()) s += x;
  return a.tape().push(Tensor::scalar(s), a.needs_grad(), [a](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0];
    for (auto& x : t.grad_buffer(a.id())) x += g;
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Mean absolute value (L1 averaged over entries).
inline Var mean_abs(const Var& a) {
  const auto n = static_cast<double>(a.value().size());
  double s = 0;
  for (double x : a.value().data()) s += std::abs(x);
  return a.tape().push(Tensor::scalar(s / n), a.needs_grad(), [a, n](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0] / n;
    const auto& av = a.value();
    auto& ga = t.grad_buffer(a.id());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (av[i] > 0 ? 1.0 : (av[i] < 0 ? -1.0 : 0.0));
  });
}

inline Var sum_squares(const Var& a) {
  double s = 0;
  for (double x : a.value().data()) s += x * x;
  return a.tape().push(Tensor::scalar(s), a.needs_grad(), [a](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0];
    const auto& av = a.value();
    auto& ga = t.grad_buffer(a.id());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * av[i];
  });
}

/// Euclidean norm of every row, sqrt(|row|^2 + eps), as a (rows x 1) column.
inline Var row_norms(const Var& a, double eps = 1e-12) {
  const auto& av = a.value();
  const auto c = av.cols();
  Tensor out = Tensor::matrix(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double ss = eps;
    for (std::size_t j = 0; j < c; ++j) ss += av[r * c + j] * av[r * c + j];
    out[r] = std::sqrt(ss);
  }
  Tensor saved = out;
  return a.tape().push(std::move(out), a.needs_grad(), [a, n = std::move(saved)](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = a.value();
    auto& ga = t.grad_buffer(a.id());
    const auto c = av.cols();
    for (std::size_t r = 0; r < n.size(); ++r) {
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r] * av[r * c + j] / n[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers

inline std::vector<int> argmax_rows(const Tensor& t) {
  std::vector<int> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const auto row = t.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace textless
