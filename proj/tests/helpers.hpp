#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "flowcast/flowcast.hpp"

namespace fct {

using flowcast::Tensor;

/// Central finite differences of a scalar function with respect to every
/// entry of the given parameter tensor.
inline Tensor fd_gradient(flowcast::Param& p, const std::function<double()>& f,
                          double step = 1e-5) {
  Tensor g = Tensor::zeros(p.value.shape());
  for (std::size_t k = 0; k < p.value.numel(); ++k) {
    const double saved = p.value[k];
    p.value[k] = saved + step;
    const double hi = f();
    p.value[k] = saved - step;
    const double lo = f();
    p.value[k] = saved;
    g[k] = (hi - lo) / (2.0 * step);
  }
  return g;
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

/// Central-difference Jacobian of a vector->vector map.
inline Tensor fd_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                          double step = 1e-6) {
  const Tensor y0 = f(x);
  const std::size_t n = y0.numel(), d = x.numel();
  Tensor jac = Tensor::zeros({n, d});
  for (std::size_t j = 0; j < d; ++j) {
    Tensor hi = x, lo = x;
    hi[j] += step;
    lo[j] -= step;
    const Tensor yh = f(hi);
    const Tensor yl = f(lo);
    for (std::size_t i = 0; i < n; ++i) jac(i, j) = (yh[i] - yl[i]) / (2.0 * step);
  }
  return jac;
}

/// log |det| of a square matrix by partially pivoted LU elimination.
inline double log_abs_det(Tensor a) {
  const std::size_t n = a.rows();
  double result = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t pivot = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(pivot, c))) pivot = r;
    if (a(pivot, c) == 0.0) return -std::numeric_limits<double>::infinity();
    if (pivot != c)
      for (std::size_t k = 0; k < n; ++k) std::swap(a(pivot, k), a(c, k));
    result += std::log(std::abs(a(c, c)));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double factor = a(r, c) / a(c, c);
      for (std::size_t k = c; k < n; ++k) a(r, k) -= factor * a(c, k);
    }
  }
  return result;
}

inline Tensor random_matrix(std::size_t rows, std::size_t cols, flowcast::Rng& rng,
                            double scale = 1.0) {
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.raw()) v = scale * rng.normal();
  return t;
}

inline Tensor row_of(const Tensor& m, std::size_t i) {
  Tensor r = Tensor::zeros({m.cols()});
  for (std::size_t j = 0; j < m.cols(); ++j) r[j] = m(i, j);
  return r;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Randomizes the parameters of a conditioner or model in place.
inline void randomize_params(std::vector<flowcast::Param*> params, flowcast::Rng& rng,
                             double scale = 0.5) {
  for (flowcast::Param* p : params)
    for (double& v : p->value.raw()) v = scale * rng.normal();
}

/// Randomizes conditioner weights but keeps masked entries at zero.
inline void randomize_conditioner(flowcast::Conditioner& c, flowcast::Rng& rng, double scale = 0.5) {
  for (std::size_t l = 0; l < c.weights().size(); ++l) {
    const Tensor& mask = c.mask_for(l);
    flowcast::Param& w = c.weights()[l];
    for (std::size_t k = 0; k < w.value.numel(); ++k)
      w.value[k] = mask[k] != 0.0 ? scale * rng.normal() : 0.0;
  }
  for (auto& b : c.biases())
    for (double& v : b.value.raw()) v = scale * rng.normal();
}

/// Randomizes a whole model, respecting conditioner masks.
inline void randomize_model(flowcast::FlowModel& model, flowcast::Rng& rng, double scale = 0.3) {
  for (auto& layer : model.layers()) {
    if (auto* ar = std::get_if<flowcast::AffineARLayer>(&layer)) {
      randomize_conditioner(ar->conditioner(), rng, scale);
    } else if (auto* cp = std::get_if<flowcast::CouplingLayer>(&layer)) {
      std::vector<flowcast::Param*> ps;
      cp->collect_params(ps);
      randomize_params(ps, rng, scale);
    } else if (auto* bn = std::get_if<flowcast::BatchNormLayer>(&layer)) {
      for (double& v : bn->beta().value.raw()) v = scale * rng.normal();
      for (double& v : bn->gamma().value.raw()) v = scale * rng.normal();
      flowcast::Tensor m = bn->mean();
      flowcast::Tensor var = bn->variance();
      for (double& v : m.raw()) v = scale * rng.normal();
      for (double& v : var.raw()) v = 0.5 + std::abs(rng.normal());
      bn->set_statistics(m, var);
    }
  }
  if (auto* mog = std::get_if<flowcast::MadeMogBase>(&model.base()))
    randomize_conditioner(mog->cond, rng, scale);
}

}  // namespace fct
