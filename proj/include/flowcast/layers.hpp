#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "flowcast/conditioner.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/masks.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tape.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

/// Layer output paired with the per-row log |det| of the direction applied.
struct LayerResult {
  Var value;
  Var logdet;
};

/// Plain fully connected network with a linear output, used by coupling
/// layers for the scale and shift functions.
class Mlp {
 public:
  Mlp() = default;

  Mlp(int in_width, std::vector<int> hidden_sizes, int out_width, Activation act, Rng init_rng,
      const std::string& name)
      : in_(in_width), out_(out_width), hidden_(std::move(hidden_sizes)), act_(act) {
    int prev = in_;
    std::vector<int> dims = hidden_;
    dims.push_back(out_);
    for (std::size_t l = 0; l < dims.size(); ++l) {
      Param w;
      w.name = name + ".w" + std::to_string(l);
      w.l2 = true;
      w.value = Tensor::zeros({static_cast<std::size_t>(prev), static_cast<std::size_t>(dims[l])});
      const double bound = prev > 0 ? 1.0 / std::sqrt(static_cast<double>(prev)) : 0.0;
      for (double& v : w.value.raw()) v = (2.0 * init_rng.uniform() - 1.0) * bound;
      weights_.push_back(std::move(w));
      Param b;
      b.name = name + ".b" + std::to_string(l);
      b.value = Tensor::zeros({static_cast<std::size_t>(dims[l])});
      biases_.push_back(std::move(b));
      prev = dims[l];
    }
  }

  int in_width() const { return in_; }
  int out_width() const { return out_; }
  const std::vector<int>& hidden_sizes() const { return hidden_; }
  Activation activation() const { return act_; }
  std::vector<Param>& weights() { return weights_; }
  std::vector<Param>& biases() { return biases_; }
  const std::vector<Param>& weights() const { return weights_; }
  const std::vector<Param>& biases() const { return biases_; }

  void collect_params(std::vector<Param*>& out) {
    for (auto& p : weights_) out.push_back(&p);
    for (auto& p : biases_) out.push_back(&p);
  }

  long weight_count() const {
    long n = 0;
    for (const auto& w : weights_) n += static_cast<long>(w.value.numel());
    return n;
  }

  Var forward_t(TapeBinding& tb, Var x) const {
    Var h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = tb.tape.add_row(tb.tape.matmul(h, tb.bind(weights_[l])), tb.bind(biases_[l]));
      if (l + 1 < weights_.size())
        h = act_ == Activation::kRelu ? tb.tape.relu(h) : tb.tape.tanh(h);
    }
    return h;
  }

 private:
  int in_ = 0;
  int out_ = 0;
  std::vector<int> hidden_;
  Activation act_ = Activation::kRelu;
  std::vector<Param> weights_;
  std::vector<Param> biases_;
};

/// Affine autoregressive layer. The inverse (data -> random numbers) is a
/// single conditioner pass; the forward direction is a sequential recursion
/// over order positions. With iaf_mode the roles swap: parameters are read
/// from the random numbers, making the forward single-pass instead.
class AffineARLayer {
 public:
  AffineARLayer() = default;

  explicit AffineARLayer(Conditioner cond, bool iaf_mode = false)
      : cond_(std::move(cond)), iaf_mode_(iaf_mode) {
    if (cond_.head() != HeadKind::kGaussian)
      throw UsageError("affine autoregressive layer needs a gaussian-head conditioner");
  }

  const Conditioner& conditioner() const { return cond_; }
  Conditioner& conditioner() { return cond_; }
  bool iaf_mode() const { return iaf_mode_; }
  int dim() const { return cond_.dim(); }

  void collect_params(std::vector<Param*>& out) { cond_.collect_params(out); }

  LayerResult inverse_t(TapeBinding& tb, Var x, std::optional<Var> y) const {
    if (!iaf_mode_) {
      CondParamsT p = cond_.forward_t(tb, x, y);
      check_alpha(tb, p.alpha);
      Tape& t = tb.tape;
      Var u = t.mul(t.sub(x, p.mu), t.exp(t.mul_scalar(p.alpha, -1.0)));
      return {u, t.mul_scalar(t.sum_cols(p.alpha), -1.0)};
    }
    return recurse(tb, x, y, /*to_data=*/false);
  }

  LayerResult forward_t(TapeBinding& tb, Var u, std::optional<Var> y) const {
    if (iaf_mode_) {
      CondParamsT p = cond_.forward_t(tb, u, y);
      check_alpha(tb, p.alpha);
      Tape& t = tb.tape;
      Var x = t.add(t.mul(u, t.exp(p.alpha)), p.mu);
      return {x, t.sum_cols(p.alpha)};
    }
    return recurse(tb, u, y, /*to_data=*/true);
  }

 private:
  void check_alpha(TapeBinding& tb, Var alpha) const {
    if (!tb.tape.value(alpha).all_finite())
      throw NumericError("autoregressive layer produced non-finite log scale");
  }

  /// Sequential direction. Fills one order position per conditioner pass;
  /// parameters for position k only see positions < k, so the pass-D output
  /// carries the final mu and alpha for every position. Only the active
  /// column is exponentiated: columns of later positions are computed from
  /// still-unfilled inputs and must not leak into the update.
  LayerResult recurse(TapeBinding& tb, Var src, std::optional<Var> y, bool to_data) const {
    Tape& t = tb.tape;
    const std::size_t n = t.value(src).rows();
    const std::size_t d = static_cast<std::size_t>(cond_.dim());
    Var w = t.constant(Tensor::zeros({n, d}));
    CondParamsT p{};
    for (int k = 1; k <= cond_.dim(); ++k) {
      p = cond_.forward_t(tb, w, y);
      const std::size_t i = cond_.index_at_position(k);
      Var mu_col = t.slice_cols(p.mu, i, i + 1);
      Var al_col = t.slice_cols(p.alpha, i, i + 1);
      check_alpha(tb, al_col);
      Var src_col = t.slice_cols(src, i, i + 1);
      Var filled = to_data
                       ? t.add(t.mul(src_col, t.exp(al_col)), mu_col)
                       : t.mul(t.sub(src_col, mu_col), t.exp(t.mul_scalar(al_col, -1.0)));
      Tensor keep = Tensor::ones({d});
      keep[i] = 0.0;
      w = t.add(t.mul_row(w, t.constant(keep)), t.scatter_cols(filled, {i}, d));
    }
    check_alpha(tb, p.alpha);
    Var ld = t.sum_cols(p.alpha);
    if (!to_data) ld = t.mul_scalar(ld, -1.0);
    return {w, ld};
  }

  Conditioner cond_;
  bool iaf_mode_ = false;
};

/// Real NVP coupling layer over a fixed even/odd index partition. The scale
/// net uses tanh hidden units and the shift net rectified linear ones; both
/// have linear outputs.
class CouplingLayer {
 public:
  enum class Parity { kCopyOdd, kCopyEven };

  CouplingLayer() = default;

  CouplingLayer(int dim, std::vector<int> hidden_sizes, Parity parity, int cond_width, Rng init_rng)
      : dim_(dim), cond_width_(cond_width), parity_(parity) {
    if (dim < 2) throw UsageError("coupling layer needs D >= 2");
    for (int i = 0; i < dim; ++i) {
      const bool odd_variable = i % 2 == 0;  // 1-based odd index
      if ((parity == Parity::kCopyOdd) == odd_variable)
        copied_.push_back(static_cast<std::size_t>(i));
      else
        transformed_.push_back(static_cast<std::size_t>(i));
    }
    const int in_w = static_cast<int>(copied_.size()) + cond_width;
    const int out_w = static_cast<int>(transformed_.size());
    scale_net_ = Mlp(in_w, hidden_sizes, out_w, Activation::kTanh, init_rng.child("scale"), "scale");
    shift_net_ = Mlp(in_w, hidden_sizes, out_w, Activation::kRelu, init_rng.child("shift"), "shift");
  }

  int dim() const { return dim_; }
  Parity parity() const { return parity_; }
  const std::vector<std::size_t>& copied() const { return copied_; }
  const std::vector<std::size_t>& transformed() const { return transformed_; }
  const Mlp& scale_net() const { return scale_net_; }
  const Mlp& shift_net() const { return shift_net_; }
  Mlp& scale_net() { return scale_net_; }
  Mlp& shift_net() { return shift_net_; }

  void collect_params(std::vector<Param*>& out) {
    scale_net_.collect_params(out);
    shift_net_.collect_params(out);
  }

  LayerResult inverse_t(TapeBinding& tb, Var x, std::optional<Var> y) const {
    return apply(tb, x, y, /*to_data=*/false);
  }

  LayerResult forward_t(TapeBinding& tb, Var u, std::optional<Var> y) const {
    return apply(tb, u, y, /*to_data=*/true);
  }

 private:
  LayerResult apply(TapeBinding& tb, Var src, std::optional<Var> y, bool to_data) const {
    Tape& t = tb.tape;
    Var a = t.gather_cols(src, copied_);
    Var b = t.gather_cols(src, transformed_);
    Var in = cond_width_ > 0 ? t.concat_cols(a, *y) : a;
    Var alpha = scale_net_.forward_t(tb, in);
    Var mu = shift_net_.forward_t(tb, in);
    if (!t.value(alpha).all_finite())
      throw NumericError("coupling layer produced non-finite log scale");
    Var out_b = to_data ? t.add(t.mul(b, t.exp(alpha)), mu)
                        : t.mul(t.sub(b, mu), t.exp(t.mul_scalar(alpha, -1.0)));
    Var out = t.add(t.scatter_cols(a, copied_, static_cast<std::size_t>(dim_)),
                    t.scatter_cols(out_b, transformed_, static_cast<std::size_t>(dim_)));
    Var ld = t.sum_cols(alpha);
    if (!to_data) ld = t.mul_scalar(ld, -1.0);
    return {out, ld};
  }

  int dim_ = 0;
  int cond_width_ = 0;
  Parity parity_ = Parity::kCopyOdd;
  std::vector<std::size_t> copied_;
  std::vector<std::size_t> transformed_;
  Mlp scale_net_;
  Mlp shift_net_;
};

/// Invertible batch normalization. In train mode the statistics come from
/// the current batch (and gradients flow through them); in eval mode the
/// stored statistics are used. finalize() freezes full-train-set statistics
/// and switches to eval mode.
class BatchNormLayer {
 public:
  BatchNormLayer() = default;

  explicit BatchNormLayer(int dim) : dim_(dim) {
    beta_.name = "bn.beta";
    beta_.value = Tensor::zeros({static_cast<std::size_t>(dim)});
    gamma_.name = "bn.gamma";
    gamma_.value = Tensor::zeros({static_cast<std::size_t>(dim)});
    m_ = Tensor::zeros({static_cast<std::size_t>(dim)});
    v_ = Tensor::full({static_cast<std::size_t>(dim)}, 1.0 - kEps);
  }

  static constexpr double kEps = 1e-5;

  int dim() const { return dim_; }
  bool train_mode() const { return train_mode_; }
  void set_train_mode(bool train) { train_mode_ = train; }
  const Tensor& mean() const { return m_; }
  const Tensor& variance() const { return v_; }
  void set_statistics(Tensor m, Tensor v) {
    m_ = std::move(m);
    v_ = std::move(v);
  }
  Param& beta() { return beta_; }
  Param& gamma() { return gamma_; }
  const Param& beta() const { return beta_; }
  const Param& gamma() const { return gamma_; }

  void collect_params(std::vector<Param*>& out) {
    out.push_back(&beta_);
    out.push_back(&gamma_);
  }

  LayerResult inverse_t(TapeBinding& tb, Var x, std::optional<Var> = std::nullopt) {
    Tape& t = tb.tape;
    const std::size_t n = t.value(x).rows();
    Var m, v, diff;
    if (train_mode_) {
      if (n < 2) throw UsageError("batch norm in train mode needs at least 2 rows");
      m = t.mean_rows(x);
      diff = t.sub_row(x, m);
      v = t.mean_rows(t.mul(diff, diff));
      m_ = t.value(m);
      v_ = t.value(v);
    } else {
      m = t.constant(m_);
      v = t.constant(v_);
      diff = t.sub_row(x, m);
    }
    Var g = tb.bind(gamma_);
    Var half_log_var = t.mul_scalar(t.log(t.add_scalar(v, kEps)), 0.5);
    Var log_scale = t.sub(g, half_log_var);
    Var u = t.add_row(t.mul_row(diff, t.exp(log_scale)), tb.bind(beta_));
    Var ld = t.expand_rows(t.sum_all(log_scale), n);
    return {u, ld};
  }

  LayerResult forward_t(TapeBinding& tb, Var u, std::optional<Var> = std::nullopt) const {
    if (train_mode_) throw UsageError("batch norm forward requires eval mode");
    Tape& t = tb.tape;
    const std::size_t n = t.value(u).rows();
    Var m = t.constant(m_);
    Var v = t.constant(v_);
    Var g = tb.bind(gamma_);
    Var half_log_var = t.mul_scalar(t.log(t.add_scalar(v, kEps)), 0.5);
    Var log_scale = t.sub(g, half_log_var);
    Var x = t.add_row(t.mul_row(t.sub_row(u, tb.bind(beta_)), t.exp(t.mul_scalar(log_scale, -1.0))), m);
    Var ld = t.expand_rows(t.mul_scalar(t.sum_all(log_scale), -1.0), n);
    return {x, ld};
  }

  /// Freezes statistics to the sample mean and (biased) variance of the
  /// full train set as transformed up to this layer, then switches to eval.
  void finalize(const Tensor& data_at_depth) {
    require_matrix(data_at_depth, "batch norm finalize");
    const std::size_t n = data_at_depth.rows(), d = data_at_depth.cols();
    if (n == 0) throw UsageError("batch norm finalize: empty data");
    Tensor m = Tensor::zeros({d});
    Tensor v = Tensor::zeros({d});
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += data_at_depth(i, j);
      m[j] = s / static_cast<double>(n);
      double q = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dd = data_at_depth(i, j) - m[j];
        q += dd * dd;
      }
      v[j] = q / static_cast<double>(n);
    }
    m_ = std::move(m);
    v_ = std::move(v);
    train_mode_ = false;
  }

 private:
  int dim_ = 0;
  Param beta_;
  Param gamma_;
  Tensor m_;
  Tensor v_;
  bool train_mode_ = true;
};

/// Fixed permutation; volume preserving.
class PermutationLayer {
 public:
  PermutationLayer() = default;

  explicit PermutationLayer(Order order) : order_(std::move(order)) {
    validate_order(order_);
    perm_.resize(order_.size());
    for (std::size_t i = 0; i < order_.size(); ++i)
      perm_[static_cast<std::size_t>(order_[i] - 1)] = i;
  }

  const Order& order() const { return order_; }

  void collect_params(std::vector<Param*>&) {}

  LayerResult inverse_t(TapeBinding& tb, Var x, std::optional<Var> = std::nullopt) const {
    Tape& t = tb.tape;
    Var u = t.gather_cols(x, perm_);
    return {u, t.constant(Tensor::zeros({t.value(x).rows()}))};
  }

  LayerResult forward_t(TapeBinding& tb, Var u, std::optional<Var> = std::nullopt) const {
    Tape& t = tb.tape;
    Var x = t.scatter_cols(u, perm_, perm_.size());
    return {x, t.constant(Tensor::zeros({t.value(u).rows()}))};
  }

 private:
  Order order_;
  std::vector<std::size_t> perm_;  // perm_[k] = variable index at position k+1
};

using FlowLayer = std::variant<AffineARLayer, CouplingLayer, BatchNormLayer, PermutationLayer>;

}  // namespace flowcast
