#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "flowcast/checkpoint.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/flow.hpp"
#include "flowcast/normal.hpp"
#include "flowcast/tensor.hpp"

#include <json.hpp>

namespace flowcast {

// ---------------------------------------------------------------------------
// Student-t tail probabilities via the regularized incomplete beta function
// (Lentz continued fraction).
// ---------------------------------------------------------------------------

namespace detail {

inline double log_gamma(double x) { return std::lgamma(x); }

inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front =
      log_gamma(a + b) - log_gamma(a) - log_gamma(b) + a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

}  // namespace detail

inline double student_t_cdf(double t, double dof) {
  if (dof <= 0.0) throw UsageError("student_t_cdf: dof must be positive");
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * detail::incomplete_beta(dof / 2.0, 0.5, x);
  return t >= 0.0 ? 1.0 - tail : tail;
}

// ---------------------------------------------------------------------------
// Gaussian baseline
// ---------------------------------------------------------------------------

/// Full multivariate normal fitted by maximum likelihood (biased
/// covariance). Falls back to a small ridge when the covariance is not
/// positive definite.
class GaussianModel {
 public:
  GaussianModel() = default;

  static GaussianModel fit(const Tensor& train) {
    require_matrix(train, "gaussian baseline");
    const std::size_t n = train.rows(), d = train.cols();
    if (n == 0) throw UsageError("gaussian baseline: empty train data");
    GaussianModel g;
    g.mean_ = Tensor::zeros({d});
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += train(i, j);
      g.mean_[j] = s / static_cast<double>(n);
    }
    g.cov_ = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t a = 0; a < d; ++a) {
        const double da = train(i, a) - g.mean_[a];
        for (std::size_t b = a; b < d; ++b)
          g.cov_(a, b) += da * (train(i, b) - g.mean_[b]);
      }
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) {
        g.cov_(a, b) /= static_cast<double>(n);
        g.cov_(b, a) = g.cov_(a, b);
      }
    if (!g.factorize()) {
      for (std::size_t a = 0; a < d; ++a) g.cov_(a, a) += 1e-6;
      g.ridged_ = true;
      if (!g.factorize()) throw NumericError("gaussian baseline: covariance not factorizable");
    }
    return g;
  }

  const Tensor& mean() const { return mean_; }
  const Tensor& covariance() const { return cov_; }
  bool ridged() const { return ridged_; }
  int dim() const { return static_cast<int>(mean_.numel()); }

  /// Log density for each row of x.
  Tensor log_prob(const Tensor& x) const {
    const Tensor xm = x.ndim() == 1 ? Tensor({1, x.numel()}, x.raw()) : x;
    require_matrix(xm, "gaussian log_prob");
    if (xm.cols() != mean_.numel()) throw UsageError("gaussian log_prob: dimension mismatch");
    const std::size_t n = xm.rows(), d = xm.cols();
    Tensor out = Tensor::zeros({n});
    std::vector<double> w(d);
    for (std::size_t i = 0; i < n; ++i) {
      // solve L w = (x - mean), quadratic form = |w|^2
      for (std::size_t a = 0; a < d; ++a) {
        double s = xm(i, a) - mean_[a];
        for (std::size_t b = 0; b < a; ++b) s -= chol_(a, b) * w[b];
        w[a] = s / chol_(a, a);
      }
      double q = 0.0;
      for (std::size_t a = 0; a < d; ++a) q += w[a] * w[a];
      out[i] = -0.5 * (static_cast<double>(d) * kLog2Pi + log_det_ + q);
    }
    return out;
  }

  void save(const std::string& path) const {
    nlohmann::json j;
    j["dim"] = dim();
    j["ridged"] = ridged_;
    checkpoint::save(path, checkpoint::Kind::kGaussianBaseline, j, {&mean_, &cov_});
  }

  static GaussianModel load(const std::string& path) {
    checkpoint::Contents c = checkpoint::load(path);
    if (c.kind != checkpoint::Kind::kGaussianBaseline)
      throw UsageError("checkpoint does not contain a gaussian baseline: " + path);
    GaussianModel g;
    g.mean_ = c.blocks.at(0);
    g.cov_ = c.blocks.at(1);
    g.ridged_ = c.header.value("ridged", false);
    if (!g.factorize()) throw NumericError("gaussian baseline: covariance not factorizable");
    return g;
  }

 private:
  bool factorize() {
    const std::size_t d = mean_.numel();
    chol_ = Tensor::zeros({d, d});
    log_det_ = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b <= a; ++b) {
        double s = cov_(a, b);
        for (std::size_t k = 0; k < b; ++k) s -= chol_(a, k) * chol_(b, k);
        if (a == b) {
          if (s <= 0.0) return false;
          chol_(a, a) = std::sqrt(s);
          log_det_ += 2.0 * std::log(chol_(a, a));
        } else {
          chol_(a, b) = s / chol_(b, b);
        }
      }
    }
    return true;
  }

  Tensor mean_;
  Tensor cov_;
  Tensor chol_;
  double log_det_ = 0.0;
  bool ridged_ = false;
};

// ---------------------------------------------------------------------------
// Reports and comparisons
// ---------------------------------------------------------------------------

struct EvalReport {
  std::string model;
  std::string dataset;
  Tensor per_example;
  double mean_ll = 0.0;
  double two_sigma = 0.0;
  std::size_t n = 0;
  std::optional<double> bpp;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = model;
    j["dataset"] = dataset;
    j["mean_ll"] = mean_ll;
    j["two_sigma"] = two_sigma;
    j["n"] = n;
    if (bpp) j["bpp"] = *bpp;
    return j;
  }
};

inline double sample_std(const Tensor& xs, double mean) {
  if (xs.numel() < 2) return 0.0;
  double q = 0.0;
  for (double v : xs.raw()) q += (v - mean) * (v - mean);
  return std::sqrt(q / static_cast<double>(xs.numel() - 1));
}

/// Builds a report from per-example log likelihoods: mean and a 2 x
/// standard-error band.
inline EvalReport make_report(Tensor per_example, std::string model, std::string dataset) {
  EvalReport r;
  r.model = std::move(model);
  r.dataset = std::move(dataset);
  r.n = per_example.numel();
  if (r.n == 0) throw UsageError("eval report: no examples");
  double s = 0.0;
  for (double v : per_example.raw()) s += v;
  r.mean_ll = s / static_cast<double>(r.n);
  r.two_sigma = 2.0 * sample_std(per_example, r.mean_ll) / std::sqrt(static_cast<double>(r.n));
  r.per_example = std::move(per_example);
  return r;
}

struct PairedComparison {
  double mean_diff = 0.0;
  double two_sigma = 0.0;
  double t_stat = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

/// Paired t-test on per-example log-likelihood differences (a - b).
inline PairedComparison paired_compare(const Tensor& ll_a, const Tensor& ll_b) {
  if (ll_a.numel() != ll_b.numel()) throw UsageError("paired_compare: length mismatch");
  const std::size_t n = ll_a.numel();
  if (n < 2) throw UsageError("paired_compare: needs at least 2 paired examples");
  Tensor diff = Tensor::zeros({n});
  for (std::size_t i = 0; i < n; ++i) diff[i] = ll_a[i] - ll_b[i];
  PairedComparison c;
  c.n = n;
  double s = 0.0;
  for (double v : diff.raw()) s += v;
  c.mean_diff = s / static_cast<double>(n);
  const double sd = sample_std(diff, c.mean_diff);
  const double se = sd / std::sqrt(static_cast<double>(n));
  c.two_sigma = 2.0 * se;
  if (se == 0.0) {
    c.t_stat = 0.0;
    c.p_value = c.mean_diff == 0.0 ? 1.0 : 0.0;
    return c;
  }
  c.t_stat = c.mean_diff / se;
  c.p_value = 2.0 * (1.0 - student_t_cdf(std::abs(c.t_stat), static_cast<double>(n - 1)));
  return c;
}

// ---------------------------------------------------------------------------
// Bits per pixel
// ---------------------------------------------------------------------------

inline double log_sigmoid(double x) {
  return x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
}

/// Converts a logit-space log density to a per-pixel compression rate:
/// b(x) = -logp / (D log 2) - log2(1 - 2 lambda) + 8
///        + (1/D) sum_i [log2 sigma(x_i) + log2(1 - sigma(x_i))].
inline double bits_per_pixel(double logp, const Tensor& x_logit, double lambda) {
  if (lambda < 0.0 || lambda >= 0.5) throw UsageError("bits_per_pixel: lambda must be in [0, 0.5)");
  const double d = static_cast<double>(x_logit.numel());
  const double ln2 = std::log(2.0);
  double s = 0.0;
  for (double x : x_logit.raw()) s += log_sigmoid(x) / ln2 + log_sigmoid(-x) / ln2;
  return -logp / (d * ln2) - std::log2(1.0 - 2.0 * lambda) + 8.0 + s / d;
}

// ---------------------------------------------------------------------------
// Conditional marginalization
// ---------------------------------------------------------------------------

/// log p(x) = logsumexp_y [ log p(x|y) + log p(y) ] over one-hot labels.
inline double conditional_marginal_logprob(FlowModel& model, const Tensor& x,
                                           const Tensor& prior) {
  if (model.cond_width() <= 0) throw UsageError("model is not conditional");
  if (static_cast<int>(prior.numel()) != model.cond_width())
    throw UsageError("prior length must match the label width");
  double psum = 0.0;
  for (double p : prior.raw()) {
    if (p < 0.0) throw UsageError("prior must be nonnegative");
    psum += p;
  }
  if (std::abs(psum - 1.0) > 1e-9) throw UsageError("prior must sum to 1");
  const std::size_t labels = prior.numel();
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(labels, -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < labels; ++k) {
    if (prior[k] == 0.0) continue;
    Tensor y = Tensor::zeros({labels});
    y[k] = 1.0;
    terms[k] = model.log_prob(x, &y)[0] + std::log(prior[k]);
    best = std::max(best, terms[k]);
  }
  double acc = 0.0;
  for (double t : terms)
    if (std::isfinite(t)) acc += std::exp(t - best);
  return best + std::log(acc);
}

// ---------------------------------------------------------------------------
// Parallel evaluation
// ---------------------------------------------------------------------------

inline int eval_thread_cap() {
  if (const char* env = std::getenv("FLOWCAST_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(std::min(hw, 8u));
}

/// Per-example log likelihoods over a test set, chunked across threads.
/// Results are identical for any thread count.
inline Tensor batched_log_prob(FlowModel& model, const Tensor& data, const Tensor* labels,
                               int threads = 0) {
  require_matrix(data, "batched_log_prob");
  if (!model.eval_mode())
    throw UsageError("batched_log_prob requires eval mode (finalize batch norm first)");
  const std::size_t n = data.rows();
  if (threads <= 0) threads = eval_thread_cap();
  threads = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  if (threads < 1) threads = 1;
  Tensor out = Tensor::zeros({n});
  std::exception_ptr error;
  std::mutex error_mu;
  auto work = [&](std::size_t lo, std::size_t hi) {
    if (lo >= hi) return;
    try {
      Tensor chunk = Tensor::zeros({hi - lo, data.cols()});
      for (std::size_t i = lo; i < hi; ++i)
        for (std::size_t j = 0; j < data.cols(); ++j) chunk(i - lo, j) = data(i, j);
      Tensor ychunk;
      if (labels) {
        ychunk = Tensor::zeros({hi - lo, labels->cols()});
        for (std::size_t i = lo; i < hi; ++i)
          for (std::size_t j = 0; j < labels->cols(); ++j) ychunk(i - lo, j) = (*labels)(i, j);
      }
      Tensor ll = model.log_prob(chunk, labels ? &ychunk : nullptr);
      for (std::size_t i = lo; i < hi; ++i) out[i] = ll[i - lo];
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mu);
      if (!error) error = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      const std::size_t lo = n * static_cast<std::size_t>(t) / static_cast<std::size_t>(threads);
      const std::size_t hi = n * static_cast<std::size_t>(t + 1) / static_cast<std::size_t>(threads);
      pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace flowcast
