#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "flowcast/errors.hpp"
#include "flowcast/flow.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tape.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

struct TrainConfig {
  double step_size = 1e-3;  // 1e-3 for made/made_mog, 1e-4 for realnvp/maf
  int batch = 100;
  double l2 = 1e-6;
  int patience = 30;
  int max_epochs = 1000;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool verbose = false;

  void validate() const {
    if (step_size <= 0 || batch <= 0 || l2 < 0 || patience < 1 || max_epochs < 0)
      throw UsageError("train config: step_size/batch must be positive, l2 >= 0, patience >= 1");
  }
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long t = 0;

  explicit AdamState(const std::vector<Param*>& params) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Param* p : params) {
      m.push_back(Tensor::zeros(p->value.shape()));
      v.push_back(Tensor::zeros(p->value.shape()));
    }
  }
};

/// Bias-corrected Adam update. Masked weight entries have exactly zero
/// gradients, so their moments and values stay exactly zero.
inline void adam_step(AdamState& state, const std::vector<Param*>& params,
                      const std::vector<Tensor>& grads, const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw UsageError("adam_step: gradient count mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& g = grads[i];
    if (!g.same_shape(params[i]->value)) throw UsageError("adam_step: gradient shape mismatch");
    if (!g.all_finite())
      throw NumericError("non-finite gradient for parameter " + params[i]->name);
    Tensor& pm = state.m[i];
    Tensor& pv = state.v[i];
    Tensor& val = params[i]->value;
    for (std::size_t k = 0; k < g.numel(); ++k) {
      pm[k] = cfg.beta1 * pm[k] + (1.0 - cfg.beta1) * g[k];
      pv[k] = cfg.beta2 * pv[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = pm[k] / bc1;
      const double vhat = pv[k] / bc2;
      val[k] -= cfg.step_size * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

struct EpochStats {
  int epoch = 0;
  double train_nll = 0.0;
  double val_ll = 0.0;
  bool best = false;
};

struct TrainResult {
  std::vector<EpochStats> history;
  double best_val_ll = -std::numeric_limits<double>::infinity();
  int best_epoch = 0;
};

inline Tensor take_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
  Tensor out = Tensor::zeros({rows.size(), m.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(rows[i], j);
  return out;
}

/// Builds the regularized minibatch loss on the given tape: mean NLL over
/// the batch plus (l2/2) ||W||^2 over weight matrices only. If mean_nll is
/// given it receives the unregularized data term.
inline Var training_loss(FlowModel& model, TapeBinding& tb, const Tensor& xb, const Tensor* yb,
                         double l2, double* mean_nll = nullptr) {
  Tape& t = tb.tape;
  std::optional<Var> yv;
  if (yb) yv = tb.constant(*yb);
  Var ll = model.log_prob_t(tb, tb.constant(xb), yv);
  Var loss = t.mul_scalar(t.sum_all(ll), -1.0 / static_cast<double>(xb.rows()));
  if (mean_nll) *mean_nll = t.value(loss)[0];
  if (l2 > 0.0) {
    Var reg{};
    bool have = false;
    for (const auto& [param, var] : tb.bound) {
      if (!param->l2) continue;
      Var term = t.sum_all(t.mul(var, var));
      reg = have ? t.add(reg, term) : term;
      have = true;
    }
    if (have) loss = t.add(loss, t.mul_scalar(reg, 0.5 * l2));
  }
  return loss;
}

/// Routes tape gradients back to the parameter list (zeros for parameters
/// the loss never touched).
inline std::vector<Tensor> collect_gradients(const std::vector<Param*>& params,
                                             const TapeBinding& tb, const Gradients& grads) {
  std::map<const Param*, Tensor> acc;
  for (const auto& [param, var] : tb.bound) {
    const Tensor& g = grads.at(var);
    auto it = acc.find(param);
    if (it == acc.end()) {
      acc.emplace(param, g);
    } else {
      for (std::size_t k = 0; k < g.numel(); ++k) it->second[k] += g[k];
    }
  }
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (Param* p : params) {
    auto it = acc.find(p);
    out.push_back(it != acc.end() ? it->second : Tensor::zeros(p->value.shape()));
  }
  return out;
}

/// Maximum-likelihood training with minibatch Adam, early stopping on
/// validation log likelihood and best-parameter restoration. Validation
/// after each epoch uses batch-norm statistics of a full pass over the
/// train set; the returned model is left finalized the same way.
inline TrainResult train(FlowModel& model, const Tensor& train_x, const Tensor* train_y,
                         const Tensor& val_x, const Tensor* val_y, const TrainConfig& cfg) {
  cfg.validate();
  if (train_x.rows() == 0 || val_x.rows() == 0)
    throw UsageError("train: empty train or validation split");

  std::vector<Param*> params = model.collect_params();
  AdamState adam(params);
  Rng shuffle_rng = Rng(cfg.seed).child("minibatch-shuffle");

  TrainResult result;
  std::vector<Tensor> best_params;
  int since_best = 0;

  bool has_bn = false;
  for (const auto& l : model.layers())
    if (std::holds_alternative<BatchNormLayer>(l)) has_bn = true;

  std::vector<std::size_t> indices(train_x.rows());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    model.set_train_mode(true);
    shuffle_rng.shuffle(indices);

    double nll_sum = 0.0;
    std::size_t nll_count = 0;
    const std::size_t b = static_cast<std::size_t>(cfg.batch);
    for (std::size_t start = 0; start < indices.size(); start += b) {
      std::size_t stop = std::min(start + b, indices.size());
      // a trailing single row cannot provide batch statistics
      if (has_bn && indices.size() - start > b && indices.size() - (start + b) == 1) stop = indices.size();
      std::vector<std::size_t> batch_idx(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                         indices.begin() + static_cast<std::ptrdiff_t>(stop));
      if (has_bn && batch_idx.size() < 2) break;
      Tensor xb = take_rows(train_x, batch_idx);
      Tensor yb;
      if (train_y) yb = take_rows(*train_y, batch_idx);

      Tape tape;
      TapeBinding tb(tape, true);
      double batch_nll = 0.0;
      Var loss = training_loss(model, tb, xb, train_y ? &yb : nullptr, cfg.l2, &batch_nll);
      if (!std::isfinite(tape.value(loss)[0]))
        throw NumericError("training aborted: non-finite loss at epoch " + std::to_string(epoch));
      Gradients grads = tape.backward(loss);
      std::vector<Tensor> g = collect_gradients(params, tb, grads);
      adam_step(adam, params, g, cfg);

      nll_sum += batch_nll * static_cast<double>(batch_idx.size());
      nll_count += batch_idx.size();
      if (stop == indices.size()) break;
    }

    model.finalize_batchnorm(train_x, train_y);
    const Tensor val_ll = model.log_prob(val_x, val_y);
    double vll = 0.0;
    for (double v : val_ll.raw()) vll += v;
    vll /= static_cast<double>(val_ll.numel());

    EpochStats st;
    st.epoch = epoch;
    st.train_nll = nll_sum / static_cast<double>(nll_count);
    st.val_ll = vll;
    st.best = vll > result.best_val_ll;
    result.history.push_back(st);
    if (st.best) {
      result.best_val_ll = vll;
      result.best_epoch = epoch;
      best_params.clear();
      for (Param* p : params) best_params.push_back(p->value);
      since_best = 0;
    } else {
      ++since_best;
    }
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %d: train nll %.6g val ll %.6g%s\n", epoch, st.train_nll, vll,
                   st.best ? " *" : "");
    if (since_best >= cfg.patience) break;
  }

  if (!best_params.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
  }
  model.finalize_batchnorm(train_x, train_y);
  return result;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream os(path);
  if (!os) throw UsageError("cannot open history file for writing: " + path);
  os << "epoch,train_nll,val_ll,best_flag\n";
  os.precision(17);
  for (const auto& st : history)
    os << st.epoch << "," << st.train_nll << "," << st.val_ll << "," << (st.best ? 1 : 0) << "\n";
}

}  // namespace flowcast
