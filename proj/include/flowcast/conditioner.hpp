#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flowcast/errors.hpp"
#include "flowcast/masks.hpp"
#include "flowcast/normal.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tape.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

/// A named, trainable tensor. Weight matrices set l2 = true and are the only
/// parameters touched by the regularizer.
struct Param {
  std::string name;
  Tensor value;
  bool l2 = false;
};

/// Per-pass registry pairing bound parameters with their tape handles so
/// gradients can be routed back after backward().
struct TapeBinding {
  explicit TapeBinding(Tape& t, bool track_gradients = true) : tape(t), track(track_gradients) {}

  Var bind(const Param& p) {
    Var v = tape.leaf(p.value, track);
    if (track) bound.emplace_back(&p, v);
    return v;
  }

  Var constant(const Tensor& t) { return tape.constant(t); }

  Tape& tape;
  bool track;
  std::vector<std::pair<const Param*, Var>> bound;
};

enum class Activation { kRelu, kTanh };

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw UsageError("unknown activation '" + s + "' (allowed: relu, tanh)");
}

inline const char* to_string(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }

enum class HeadKind { kGaussian, kMog };

/// Conditional-density parameters emitted by a conditioner, one row per
/// sample. Mixture tensors are [N x D*C] with the C entries of each
/// dimension contiguous; weights are normalized probabilities.
struct CondParams {
  Tensor mu;
  Tensor alpha;
  Tensor weights;
  Tensor means;
  Tensor log_stds;
};

/// On-tape view of CondParams. Mixture log-weights are already normalized.
struct CondParamsT {
  Var mu;
  Var alpha;
  Var log_weights;
  Var means;
  Var log_stds;
};

/// MADE-style masked feedforward network producing per-dimension conditional
/// parameters. Every weight matrix is applied through its binary mask, so
/// parameters for the variable at order position k depend only on variables
/// at positions < k (and on all label inputs, which are never masked).
class Conditioner {
 public:
  Conditioner() = default;

  Conditioner(int dim, std::vector<int> hidden_sizes, Order order, DegreeAssignment assignment,
              int cond_width, Activation act, HeadKind head, int components, Rng init_rng,
              std::uint64_t mask_seed)
      : dim_(dim),
        cond_width_(cond_width),
        hidden_sizes_(std::move(hidden_sizes)),
        order_(std::move(order)),
        assignment_(assignment),
        act_(act),
        head_(head),
        components_(head == HeadKind::kMog ? components : 1),
        mask_seed_(mask_seed) {
    if (head_ == HeadKind::kMog && components_ < 1)
      throw UsageError("mixture head needs at least one component");
    masks_ = build_masks(dim_, hidden_sizes_, order_, assignment_, cond_width_, mask_seed_);
    output_mask_ = head_ == HeadKind::kGaussian
                       ? replicate_output_mask(masks_.output_block_mask, 2, 1)
                       : replicate_output_mask(masks_.output_block_mask, 3, components_);
    init_params(init_rng);
  }

  int dim() const { return dim_; }
  int cond_width() const { return cond_width_; }
  HeadKind head() const { return head_; }
  int components() const { return components_; }
  Activation activation() const { return act_; }
  const Order& order() const { return order_; }
  const MaskSet& masks() const { return masks_; }
  const Tensor& output_mask() const { return output_mask_; }
  const std::vector<int>& hidden_sizes() const { return hidden_sizes_; }
  DegreeAssignment assignment() const { return assignment_; }
  std::uint64_t mask_seed() const { return mask_seed_; }

  std::vector<Param>& weights() { return weights_; }
  std::vector<Param>& biases() { return biases_; }
  const std::vector<Param>& weights() const { return weights_; }
  const std::vector<Param>& biases() const { return biases_; }

  void collect_params(std::vector<Param*>& out) {
    for (auto& p : weights_) out.push_back(&p);
    for (auto& p : biases_) out.push_back(&p);
  }

  /// Mask paired with weights()[i].
  const Tensor& mask_for(std::size_t i) const {
    return i + 1 == weights_.size() ? output_mask_ : masks_.masks[i];
  }

  CondParamsT forward_t(TapeBinding& tb, Var x, std::optional<Var> y) const {
    check_labels(y.has_value());
    Var h = cond_width_ > 0 ? tb.tape.concat_cols(x, *y) : x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Var w = tb.bind(weights_[l]);
      Var b = tb.bind(biases_[l]);
      h = tb.tape.add_row(tb.tape.matmul_masked(h, w, mask_for(l)), b);
      if (l + 1 < weights_.size())
        h = act_ == Activation::kRelu ? tb.tape.relu(h) : tb.tape.tanh(h);
    }
    const std::size_t d = static_cast<std::size_t>(dim_);
    CondParamsT out;
    if (head_ == HeadKind::kGaussian) {
      out.mu = tb.tape.slice_cols(h, 0, d);
      out.alpha = tb.tape.slice_cols(h, d, 2 * d);
    } else {
      const std::size_t cw = d * static_cast<std::size_t>(components_);
      Var logits = tb.tape.slice_cols(h, 0, cw);
      out.means = tb.tape.slice_cols(h, cw, 2 * cw);
      out.log_stds = tb.tape.slice_cols(h, 2 * cw, 3 * cw);
      Var norm = tb.tape.logsumexp_groups(logits, static_cast<std::size_t>(components_));
      out.log_weights =
          tb.tape.sub(logits, tb.tape.repeat_groups(norm, static_cast<std::size_t>(components_)));
    }
    return out;
  }

  /// Off-tape forward pass; accepts a [D] vector or [N x D] matrix.
  CondParams forward(const Tensor& x, const Tensor* y = nullptr) const {
    Tape tape;
    TapeBinding tb(tape, false);
    const Tensor xm = as_matrix(x, dim_, "conditioner input");
    std::optional<Var> yv;
    if (y) yv = tb.constant(as_matrix(*y, cond_width_, "conditioner labels"));
    CondParamsT p = forward_t(tb, tb.constant(xm), yv);
    CondParams out;
    if (head_ == HeadKind::kGaussian) {
      out.mu = tape.value(p.mu);
      out.alpha = tape.value(p.alpha);
      check_finite(out.mu, "mu");
      check_finite(out.alpha, "alpha");
    } else {
      out.means = tape.value(p.means);
      out.log_stds = tape.value(p.log_stds);
      out.weights = tape.value(p.log_weights);
      for (double& v : out.weights.raw()) v = std::exp(v);
      check_finite(out.means, "means");
      check_finite(out.log_stds, "log_stds");
      check_finite(out.weights, "weights");
    }
    return out;
  }

  /// Per-sample log density under the autoregressive model, on tape.
  Var log_prob_t(TapeBinding& tb, Var x, std::optional<Var> y) const {
    CondParamsT p = forward_t(tb, x, y);
    Tape& t = tb.tape;
    if (head_ == HeadKind::kGaussian) {
      check_finite(t.value(p.alpha), "alpha");
      Var z = t.mul(t.sub(x, p.mu), t.exp(t.mul_scalar(p.alpha, -1.0)));
      Var elem = t.sub(t.add_scalar(t.mul_scalar(t.mul(z, z), -0.5), -0.5 * kLog2Pi), p.alpha);
      return t.sum_cols(elem);
    }
    check_finite(t.value(p.log_stds), "log_stds");
    const std::size_t c = static_cast<std::size_t>(components_);
    Var xr = t.repeat_groups(x, c);
    Var z = t.mul(t.sub(xr, p.means), t.exp(t.mul_scalar(p.log_stds, -1.0)));
    Var comp = t.add(
        t.sub(t.add_scalar(t.mul_scalar(t.mul(z, z), -0.5), -0.5 * kLog2Pi), p.log_stds),
        p.log_weights);
    return t.sum_cols(t.logsumexp_groups(comp, c));
  }

  /// Off-tape log density; accepts [D] or [N x D], returns [N].
  Tensor log_prob(const Tensor& x, const Tensor* y = nullptr) const {
    Tape tape;
    TapeBinding tb(tape, false);
    const Tensor xm = as_matrix(x, dim_, "conditioner input");
    std::optional<Var> yv;
    if (y) yv = tb.constant(as_matrix(*y, cond_width_, "conditioner labels"));
    return tape.value(log_prob_t(tb, tb.constant(xm), yv));
  }

  /// Sequential generation: one conditioner pass per order position.
  Tensor sample(std::size_t n, Rng& rng, const Tensor* y = nullptr) const {
    check_labels(y != nullptr);
    Tensor x = Tensor::zeros({n, static_cast<std::size_t>(dim_)});
    Tensor ym;
    if (y) ym = as_matrix(*y, cond_width_, "conditioner labels", n);
    for (int k = 1; k <= dim_; ++k) {
      const std::size_t i = index_at_position(k);
      CondParams p = forward(x, y ? &ym : nullptr);
      if (head_ == HeadKind::kGaussian) {
        for (std::size_t r = 0; r < n; ++r)
          x(r, i) = rng.normal() * std::exp(p.alpha(r, i)) + p.mu(r, i);
      } else {
        const std::size_t c = static_cast<std::size_t>(components_);
        for (std::size_t r = 0; r < n; ++r) {
          const double pick = rng.uniform();
          double acc = 0.0;
          std::size_t comp = c - 1;
          for (std::size_t j = 0; j < c; ++j) {
            acc += p.weights(r, i * c + j);
            if (pick < acc) {
              comp = j;
              break;
            }
          }
          x(r, i) = rng.normal() * std::exp(p.log_stds(r, i * c + comp)) + p.means(r, i * c + comp);
        }
      }
    }
    return x;
  }

  /// Exact number of unmasked weight entries.
  long exact_param_count() const {
    long n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) n += ones_count(mask_for(l));
    return n;
  }

  /// The coarse parameter-count model: 3/2 DH + 1/2 (L-1) H^2 for a Gaussian
  /// head, (C + 1/2) DH + 1/2 (L-1) H^2 for a mixture head.
  double approx_param_count() const {
    const double d = dim_;
    const double spread = static_cast<double>(hidden_sizes_.size());
    const double h = hidden_sizes_.empty() ? 0.0 : static_cast<double>(hidden_sizes_[0]);
    const double core = 0.5 * (spread - 1.0) * h * h;
    if (head_ == HeadKind::kGaussian) return 1.5 * d * h + core;
    return (static_cast<double>(components_) + 0.5) * d * h + core;
  }

  static Tensor as_matrix(const Tensor& t, int width, const char* who, std::size_t rows = 1) {
    if (t.ndim() == 1) {
      if (t.numel() != static_cast<std::size_t>(width))
        throw UsageError(std::string(who) + ": expected width " + std::to_string(width));
      Tensor m = Tensor::zeros({rows, t.numel()});
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < t.numel(); ++j) m(r, j) = t[j];
      return m;
    }
    require_matrix(t, who);
    if (t.cols() != static_cast<std::size_t>(width))
      throw UsageError(std::string(who) + ": expected width " + std::to_string(width));
    return t;
  }

  std::size_t index_at_position(int k) const {
    for (std::size_t i = 0; i < order_.size(); ++i)
      if (order_[i] == k) return i;
    throw UsageError("order position out of range");
  }

 private:
  void check_labels(bool have) const {
    if (cond_width_ > 0 && !have)
      throw UsageError("conditioner requires label inputs (cond_width > 0)");
    if (cond_width_ == 0 && have)
      throw UsageError("conditioner is unconditional but labels were supplied");
  }

  void check_finite(const Tensor& t, const char* what) const {
    if (!t.all_finite())
      throw NumericError(std::string("conditioner produced non-finite ") + what);
  }

  void init_params(Rng& rng) {
    const std::size_t n_mats = masks_.masks.size() + 1;
    weights_.reserve(n_mats);
    biases_.reserve(n_mats);
    for (std::size_t l = 0; l < n_mats; ++l) {
      const Tensor& mask = l + 1 == n_mats ? output_mask_ : masks_.masks[l];
      Param w;
      w.name = "w" + std::to_string(l);
      w.l2 = true;
      w.value = Tensor::zeros(mask.shape());
      // fan-in counted over unmasked entries of each destination column
      std::vector<double> bound(mask.cols(), 0.0);
      for (std::size_t j = 0; j < mask.cols(); ++j) {
        long fan = 0;
        for (std::size_t i = 0; i < mask.rows(); ++i) fan += mask(i, j) != 0.0 ? 1 : 0;
        bound[j] = fan > 0 ? 1.0 / std::sqrt(static_cast<double>(fan)) : 0.0;
      }
      for (std::size_t i = 0; i < mask.rows(); ++i)
        for (std::size_t j = 0; j < mask.cols(); ++j)
          if (mask(i, j) != 0.0) w.value(i, j) = (2.0 * rng.uniform() - 1.0) * bound[j];
      weights_.push_back(std::move(w));

      Param b;
      b.name = "b" + std::to_string(l);
      b.value = Tensor::zeros({mask.cols()});
      biases_.push_back(std::move(b));
    }
  }

  int dim_ = 0;
  int cond_width_ = 0;
  std::vector<int> hidden_sizes_;
  Order order_;
  DegreeAssignment assignment_ = DegreeAssignment::kSequential;
  Activation act_ = Activation::kRelu;
  HeadKind head_ = HeadKind::kGaussian;
  int components_ = 1;
  std::uint64_t mask_seed_ = 0;
  MaskSet masks_;
  Tensor output_mask_;
  std::vector<Param> weights_;
  std::vector<Param> biases_;
};

}  // namespace flowcast
