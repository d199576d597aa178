#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "flowcast/errors.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

/// Handle to a value recorded on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

class Gradients;

/// Reverse-mode tape over the primitive set used by conditioners, flow
/// layers and losses. The tape owns copies of all forward values; replaying
/// it backward from a recorded scalar yields gradients for every leaf
/// registered with requires_grad.
///
/// Tapes are single-threaded scratch objects: build a graph, read values,
/// optionally call backward, then clear() or discard. Mask tensors passed to
/// matmul_masked are held by pointer and must outlive the tape.
class Tape {
 public:
  enum class Op : std::uint8_t {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kAddRow,
    kSubRow,
    kMulRow,
    kAddScalar,
    kMulScalar,
    kExp,
    kLog,
    kTanh,
    kRelu,
    kMatMul,
    kMatMulMasked,
    kSumAll,
    kSumCols,
    kMeanRows,
    kLogSumExpGroups,
    kRepeatGroups,
    kSliceCols,
    kGatherCols,
    kScatterCols,
    kConcatCols,
    kExpandRows,
  };

  Var leaf(const Tensor& value, bool requires_grad = false) {
    Node n;
    n.op = Op::kLeaf;
    n.value = value;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(const Tensor& value) { return leaf(value, false); }
  Var constant(double v) { return leaf(Tensor::scalar(v), false); }

  Var add(Var a, Var b) { return binary_same(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary_same(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return binary_same(Op::kMul, a, b); }

  Var add_row(Var m, Var r) { return binary_row(Op::kAddRow, m, r); }
  Var sub_row(Var m, Var r) { return binary_row(Op::kSubRow, m, r); }
  Var mul_row(Var m, Var r) { return binary_row(Op::kMulRow, m, r); }

  Var add_scalar(Var a, double c) {
    Node n = unary(Op::kAddScalar, a);
    n.aux_d = c;
    for (double& v : n.value.raw()) v += c;
    return push(std::move(n));
  }

  Var mul_scalar(Var a, double c) {
    Node n = unary(Op::kMulScalar, a);
    n.aux_d = c;
    for (double& v : n.value.raw()) v *= c;
    return push(std::move(n));
  }

  Var exp(Var a) {
    Node n = unary(Op::kExp, a);
    for (double& v : n.value.raw()) v = std::exp(v);
    return push(std::move(n));
  }

  Var log(Var a) {
    Node n = unary(Op::kLog, a);
    for (double& v : n.value.raw()) v = std::log(v);
    return push(std::move(n));
  }

  Var tanh(Var a) {
    Node n = unary(Op::kTanh, a);
    for (double& v : n.value.raw()) v = std::tanh(v);
    return push(std::move(n));
  }

  Var relu(Var a) {
    Node n = unary(Op::kRelu, a);
    for (double& v : n.value.raw()) v = v > 0.0 ? v : 0.0;
    return push(std::move(n));
  }

  Var matmul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require_matrix(ta, "matmul");
    require_matrix(tb, "matmul");
    if (ta.cols() != tb.rows())
      throw UsageError("matmul: inner dimensions differ, " + ta.shape_string() + " vs " + tb.shape_string());
    Node n;
    n.op = Op::kMatMul;
    n.a = a.id;
    n.b = b.id;
    n.value = mm(ta, tb, nullptr);
    return push(std::move(n));
  }

  /// a . (w (.) mask). Gradient flows only through unmasked entries of w.
  Var matmul_masked(Var a, Var w, const Tensor& mask) {
    const Tensor& ta = value(a);
    const Tensor& tw = value(w);
    require_matrix(ta, "matmul_masked");
    require_matrix(tw, "matmul_masked");
    require_same_shape(tw, mask, "matmul_masked mask");
    if (ta.cols() != tw.rows())
      throw UsageError("matmul_masked: inner dimensions differ, " + ta.shape_string() + " vs " + tw.shape_string());
    for (double v : mask.raw())
      if (v != 0.0 && v != 1.0) throw UsageError("matmul_masked: mask entries must be 0 or 1");
    Node n;
    n.op = Op::kMatMulMasked;
    n.a = a.id;
    n.b = w.id;
    n.mask = &mask;
    n.value = mm(ta, tw, &mask);
    return push(std::move(n));
  }

  Var sum_all(Var a) {
    Node n;
    n.op = Op::kSumAll;
    n.a = a.id;
    double s = 0.0;
    for (double v : value(a).raw()) s += v;
    n.value = Tensor::scalar(s);
    return push(std::move(n));
  }

  /// [N x D] -> [N]: per-row sum.
  Var sum_cols(Var a) {
    const Tensor& t = value(a);
    require_matrix(t, "sum_cols");
    Node n;
    n.op = Op::kSumCols;
    n.a = a.id;
    n.value = Tensor::zeros({t.rows()});
    for (std::size_t i = 0; i < t.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < t.cols(); ++j) s += t(i, j);
      n.value[i] = s;
    }
    return push(std::move(n));
  }

  /// [N x D] -> [D]: per-column mean over rows.
  Var mean_rows(Var a) {
    const Tensor& t = value(a);
    require_matrix(t, "mean_rows");
    if (t.rows() == 0) throw UsageError("mean_rows: empty matrix");
    Node n;
    n.op = Op::kMeanRows;
    n.a = a.id;
    n.value = Tensor::zeros({t.cols()});
    for (std::size_t j = 0; j < t.cols(); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < t.rows(); ++i) s += t(i, j);
      n.value[j] = s / static_cast<double>(t.rows());
    }
    return push(std::move(n));
  }

  /// [N x D*C] -> [N x D]: log-sum-exp over each contiguous group of C columns.
  Var logsumexp_groups(Var a, std::size_t group) {
    const Tensor& t = value(a);
    require_matrix(t, "logsumexp_groups");
    if (group == 0 || t.cols() % group != 0)
      throw UsageError("logsumexp_groups: column count not divisible by group size");
    const std::size_t d = t.cols() / group;
    Node n;
    n.op = Op::kLogSumExpGroups;
    n.a = a.id;
    n.aux_i = group;
    n.value = Tensor::zeros({t.rows(), d});
    for (std::size_t i = 0; i < t.rows(); ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < group; ++c) m = std::max(m, t(i, k * group + c));
        double s = 0.0;
        for (std::size_t c = 0; c < group; ++c) s += std::exp(t(i, k * group + c) - m);
        n.value(i, k) = m + std::log(s);
      }
    }
    return push(std::move(n));
  }

  /// [N x D] -> [N x D*C]: each column repeated C times contiguously.
  Var repeat_groups(Var a, std::size_t group) {
    const Tensor& t = value(a);
    require_matrix(t, "repeat_groups");
    Node n;
    n.op = Op::kRepeatGroups;
    n.a = a.id;
    n.aux_i = group;
    n.value = Tensor::zeros({t.rows(), t.cols() * group});
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t k = 0; k < t.cols(); ++k)
        for (std::size_t c = 0; c < group; ++c) n.value(i, k * group + c) = t(i, k);
    return push(std::move(n));
  }

  /// Columns [c0, c1) of a matrix.
  Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Tensor& t = value(a);
    require_matrix(t, "slice_cols");
    if (c0 >= c1 || c1 > t.cols()) throw UsageError("slice_cols: bad range");
    Node n;
    n.op = Op::kSliceCols;
    n.a = a.id;
    n.aux_i = c0;
    n.aux_j = c1;
    n.value = Tensor::zeros({t.rows(), c1 - c0});
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = c0; j < c1; ++j) n.value(i, j - c0) = t(i, j);
    return push(std::move(n));
  }

  Var gather_cols(Var a, std::vector<std::size_t> idx) {
    const Tensor& t = value(a);
    require_matrix(t, "gather_cols");
    for (std::size_t j : idx)
      if (j >= t.cols()) throw UsageError("gather_cols: index out of range");
    Node n;
    n.op = Op::kGatherCols;
    n.a = a.id;
    n.value = Tensor::zeros({t.rows(), idx.size()});
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t k = 0; k < idx.size(); ++k) n.value(i, k) = t(i, idx[k]);
    n.index = std::move(idx);
    return push(std::move(n));
  }

  /// Place the k columns of a into a zero matrix of the given width.
  Var scatter_cols(Var a, std::vector<std::size_t> idx, std::size_t width) {
    const Tensor& t = value(a);
    require_matrix(t, "scatter_cols");
    if (idx.size() != t.cols()) throw UsageError("scatter_cols: index count mismatch");
    for (std::size_t j : idx)
      if (j >= width) throw UsageError("scatter_cols: index out of range");
    Node n;
    n.op = Op::kScatterCols;
    n.a = a.id;
    n.aux_i = width;
    n.value = Tensor::zeros({t.rows(), width});
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t k = 0; k < idx.size(); ++k) n.value(i, idx[k]) = t(i, k);
    n.index = std::move(idx);
    return push(std::move(n));
  }

  Var concat_cols(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require_matrix(ta, "concat_cols");
    require_matrix(tb, "concat_cols");
    if (ta.rows() != tb.rows()) throw UsageError("concat_cols: row counts differ");
    Node n;
    n.op = Op::kConcatCols;
    n.a = a.id;
    n.b = b.id;
    n.aux_i = ta.cols();
    n.value = Tensor::zeros({ta.rows(), ta.cols() + tb.cols()});
    for (std::size_t i = 0; i < ta.rows(); ++i) {
      for (std::size_t j = 0; j < ta.cols(); ++j) n.value(i, j) = ta(i, j);
      for (std::size_t j = 0; j < tb.cols(); ++j) n.value(i, ta.cols() + j) = tb(i, j);
    }
    return push(std::move(n));
  }

  /// [1] -> [n]: broadcast a scalar to a vector.
  Var expand_rows(Var a, std::size_t nrows) {
    const Tensor& t = value(a);
    if (t.numel() != 1) throw UsageError("expand_rows: source must be scalar");
    Node n;
    n.op = Op::kExpandRows;
    n.a = a.id;
    n.value = Tensor::full({nrows}, t[0]);
    return push(std::move(n));
  }

  const Tensor& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }

  Gradients backward(Var loss) const;

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  friend class Gradients;

  struct Node {
    Op op = Op::kLeaf;
    std::int32_t a = -1;
    std::int32_t b = -1;
    Tensor value;
    const Tensor* mask = nullptr;
    std::size_t aux_i = 0;
    std::size_t aux_j = 0;
    double aux_d = 0.0;
    std::vector<std::size_t> index;
    bool requires_grad = false;
  };

  void check(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw UsageError("tape: handle does not refer to a recorded value");
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Node unary(Op op, Var a) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.value = value(a);
    return n;
  }

  Var binary_same(Op op, Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require_same_shape(ta, tb, "tape elementwise op");
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.value = ta;
    const double* pb = tb.data();
    double* pv = n.value.data();
    const std::size_t m = n.value.numel();
    switch (op) {
      case Op::kAdd:
        for (std::size_t i = 0; i < m; ++i) pv[i] += pb[i];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < m; ++i) pv[i] -= pb[i];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < m; ++i) pv[i] *= pb[i];
        break;
      default:
        break;
    }
    return push(std::move(n));
  }

  Var binary_row(Op op, Var m, Var r) {
    const Tensor& tm = value(m);
    const Tensor& tr = value(r);
    require_matrix(tm, "tape row op");
    if (tr.ndim() != 1 || tr.numel() != tm.cols())
      throw UsageError("tape row op: row operand must be a vector matching the matrix width");
    Node n;
    n.op = op;
    n.a = m.id;
    n.b = r.id;
    n.value = tm;
    for (std::size_t i = 0; i < tm.rows(); ++i) {
      for (std::size_t j = 0; j < tm.cols(); ++j) {
        switch (op) {
          case Op::kAddRow:
            n.value(i, j) += tr[j];
            break;
          case Op::kSubRow:
            n.value(i, j) -= tr[j];
            break;
          case Op::kMulRow:
            n.value(i, j) *= tr[j];
            break;
          default:
            break;
        }
      }
    }
    return push(std::move(n));
  }

  static Tensor mm(const Tensor& a, const Tensor& b, const Tensor* mask) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a(i, p);
        if (av == 0.0) continue;
        const double* brow = b.data() + p * n;
        const double* mrow = mask ? mask->data() + p * n : nullptr;
        double* orow = out.data() + i * n;
        if (mrow) {
          for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j] * mrow[j];
        } else {
          for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      }
    }
    return out;
  }

  std::vector<Node> nodes_;
};

/// Result of Tape::backward. Leaves registered with requires_grad that the
/// loss never touched report zero gradients.
class Gradients {
 public:
  const Tensor& at(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= grads_.size())
      throw UsageError("gradients: handle does not refer to a recorded value");
    return grads_[v.id];
  }

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
};

inline Gradients Tape::backward(Var loss) const {
  check(loss);
  if (nodes_[loss.id].value.numel() != 1)
    throw UsageError("backward: loss must be a scalar, got shape " + nodes_[loss.id].value.shape_string());

  std::vector<Tensor> adj(nodes_.size());
  auto bump = [&](std::int32_t id) {
    if (adj[id].numel() == 0) adj[id] = Tensor::zeros(nodes_[id].value.shape());
  };
  adj[loss.id] = Tensor::ones(nodes_[loss.id].value.shape());

  for (std::int32_t i = loss.id; i >= 0; --i) {
    if (adj[i].numel() == 0) continue;
    const Node& n = nodes_[i];
    const Tensor& g = adj[i];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        bump(n.a);
        bump(n.b);
        for (std::size_t k = 0; k < g.numel(); ++k) {
          adj[n.a][k] += g[k];
          adj[n.b][k] += g[k];
        }
        break;
      }
      case Op::kSub: {
        bump(n.a);
        bump(n.b);
        for (std::size_t k = 0; k < g.numel(); ++k) {
          adj[n.a][k] += g[k];
          adj[n.b][k] -= g[k];
        }
        break;
      }
      case Op::kMul: {
        bump(n.a);
        bump(n.b);
        const Tensor& va = nodes_[n.a].value;
        const Tensor& vb = nodes_[n.b].value;
        for (std::size_t k = 0; k < g.numel(); ++k) {
          adj[n.a][k] += g[k] * vb[k];
          adj[n.b][k] += g[k] * va[k];
        }
        break;
      }
      case Op::kAddRow:
      case Op::kSubRow: {
        bump(n.a);
        bump(n.b);
        const double sign = n.op == Op::kAddRow ? 1.0 : -1.0;
        const std::size_t rows = n.value.rows(), cols = n.value.cols();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            adj[n.a](r, c) += g(r, c);
            adj[n.b][c] += sign * g(r, c);
          }
        break;
      }
      case Op::kMulRow: {
        bump(n.a);
        bump(n.b);
        const Tensor& vm = nodes_[n.a].value;
        const Tensor& vr = nodes_[n.b].value;
        const std::size_t rows = n.value.rows(), cols = n.value.cols();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            adj[n.a](r, c) += g(r, c) * vr[c];
            adj[n.b][c] += g(r, c) * vm(r, c);
          }
        break;
      }
      case Op::kAddScalar: {
        bump(n.a);
        for (std::size_t k = 0; k < g.numel(); ++k) adj[n.a][k] += g[k];
        break;
      }
      case Op::kMulScalar: {
        bump(n.a);
        for (std::size_t k = 0; k < g.numel(); ++k) adj[n.a][k] += g[k] * n.aux_d;
        break;
      }
      case Op::kExp: {
        bump(n.a);
        for (std::size_t k = 0; k < g.numel(); ++k) adj[n.a][k] += g[k] * n.value[k];
        break;
      }
      case Op::kLog: {
        bump(n.a);
        const Tensor& va = nodes_[n.a].value;
        for (std::size_t k = 0; k < g.numel(); ++k) adj[n.a][k] += g[k] / va[k];
        break;
      }
      case Op::kTanh: {
        bump(n.a);
        for (std::size_t k = 0; k < g.numel(); ++k) adj[n.a][k] += g[k] * (1.0 - n.value[k] * n.value[k]);
        break;
      }
      case Op::kRelu: {
        bump(n.a);
        const Tensor& va = nodes_[n.a].value;
        for (std::size_t k = 0; k < g.numel(); ++k) adj[n.a][k] += va[k] > 0.0 ? g[k] : 0.0;
        break;
      }
      case Op::kMatMul:
      case Op::kMatMulMasked: {
        bump(n.a);
        bump(n.b);
        const Tensor& va = nodes_[n.a].value;
        const Tensor& vb = nodes_[n.b].value;
        const std::size_t m = va.rows(), kk = va.cols(), nn = vb.cols();
        const Tensor* mask = n.mask;
        // dA += g . (B (.) M)^T
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t p = 0; p < kk; ++p) {
            double s = 0.0;
            for (std::size_t c = 0; c < nn; ++c) {
              const double w = mask ? vb(p, c) * (*mask)(p, c) : vb(p, c);
              s += g(r, c) * w;
            }
            adj[n.a](r, p) += s;
          }
        // dB += (A^T . g) (.) M
        for (std::size_t p = 0; p < kk; ++p)
          for (std::size_t c = 0; c < nn; ++c) {
            if (mask && (*mask)(p, c) == 0.0) continue;
            double s = 0.0;
            for (std::size_t r = 0; r < m; ++r) s += va(r, p) * g(r, c);
            adj[n.b](p, c) += s;
          }
        break;
      }
      case Op::kSumAll: {
        bump(n.a);
        for (std::size_t k = 0; k < adj[n.a].numel(); ++k) adj[n.a][k] += g[0];
        break;
      }
      case Op::kSumCols: {
        bump(n.a);
        const std::size_t rows = nodes_[n.a].value.rows(), cols = nodes_[n.a].value.cols();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) adj[n.a](r, c) += g[r];
        break;
      }
      case Op::kMeanRows: {
        bump(n.a);
        const std::size_t rows = nodes_[n.a].value.rows(), cols = nodes_[n.a].value.cols();
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) adj[n.a](r, c) += g[c] * inv;
        break;
      }
      case Op::kLogSumExpGroups: {
        bump(n.a);
        const Tensor& va = nodes_[n.a].value;
        const std::size_t group = n.aux_i, d = n.value.cols();
        for (std::size_t r = 0; r < va.rows(); ++r)
          for (std::size_t k = 0; k < d; ++k)
            for (std::size_t c = 0; c < group; ++c)
              adj[n.a](r, k * group + c) += g(r, k) * std::exp(va(r, k * group + c) - n.value(r, k));
        break;
      }
      case Op::kRepeatGroups: {
        bump(n.a);
        const std::size_t group = n.aux_i, d = nodes_[n.a].value.cols();
        for (std::size_t r = 0; r < n.value.rows(); ++r)
          for (std::size_t k = 0; k < d; ++k)
            for (std::size_t c = 0; c < group; ++c) adj[n.a](r, k) += g(r, k * group + c);
        break;
      }
      case Op::kSliceCols: {
        bump(n.a);
        for (std::size_t r = 0; r < n.value.rows(); ++r)
          for (std::size_t c = 0; c < n.value.cols(); ++c) adj[n.a](r, n.aux_i + c) += g(r, c);
        break;
      }
      case Op::kGatherCols: {
        bump(n.a);
        for (std::size_t r = 0; r < n.value.rows(); ++r)
          for (std::size_t k = 0; k < n.index.size(); ++k) adj[n.a](r, n.index[k]) += g(r, k);
        break;
      }
      case Op::kScatterCols: {
        bump(n.a);
        for (std::size_t r = 0; r < n.value.rows(); ++r)
          for (std::size_t k = 0; k < n.index.size(); ++k) adj[n.a](r, k) += g(r, n.index[k]);
        break;
      }
      case Op::kConcatCols: {
        bump(n.a);
        bump(n.b);
        const std::size_t split = n.aux_i;
        for (std::size_t r = 0; r < n.value.rows(); ++r) {
          for (std::size_t c = 0; c < split; ++c) adj[n.a](r, c) += g(r, c);
          for (std::size_t c = split; c < n.value.cols(); ++c) adj[n.b](r, c - split) += g(r, c);
        }
        break;
      }
      case Op::kExpandRows: {
        bump(n.a);
        double s = 0.0;
        for (std::size_t k = 0; k < g.numel(); ++k) s += g[k];
        adj[n.a][0] += s;
        break;
      }
    }
  }

  Gradients out;
  out.grads_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].requires_grad) continue;
    out.grads_[i] = adj[i].numel() ? std::move(adj[i]) : Tensor::zeros(nodes_[i].value.shape());
  }
  return out;
}

}  // namespace flowcast
