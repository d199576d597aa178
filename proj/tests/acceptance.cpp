// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criterion 1 drives the CLI binary end to end; the rest use the
// library directly.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "flowcast/flowcast.hpp"

#include <json.hpp>

namespace fc = flowcast;
namespace fs = std::filesystem;
using fc::Tensor;

namespace {

int g_failures = 0;

void report(int id, const std::string& label, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s  (%s)\n", pass ? "PASS" : "FAIL", id, label.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FLOWCAST_CLI_PATH) + " " + args + " > cli_log.txt 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

double json_mean_ll(const std::string& path) {
  std::ifstream is(path);
  nlohmann::json j = nlohmann::json::parse(is);
  return j.at("mean_ll").get<double>();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
}

Tensor random_matrix(std::size_t rows, std::size_t cols, fc::Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.raw()) v = scale * rng.normal();
  return t;
}

Tensor row_of(const Tensor& m, std::size_t i) {
  Tensor r = Tensor::zeros({m.cols()});
  for (std::size_t j = 0; j < m.cols(); ++j) r[j] = m(i, j);
  return r;
}

void randomize_conditioner(fc::Conditioner& c, fc::Rng& rng, double scale) {
  for (std::size_t l = 0; l < c.weights().size(); ++l) {
    const Tensor& mask = c.mask_for(l);
    for (std::size_t k = 0; k < mask.numel(); ++k)
      c.weights()[l].value[k] = mask[k] != 0.0 ? scale * rng.normal() : 0.0;
  }
  for (auto& b : c.biases())
    for (double& v : b.value.raw()) v = scale * rng.normal();
}

void randomize_model(fc::FlowModel& model, fc::Rng& rng, double scale) {
  for (auto& layer : model.layers()) {
    if (auto* ar = std::get_if<fc::AffineARLayer>(&layer)) {
      randomize_conditioner(ar->conditioner(), rng, scale);
    } else if (auto* cp = std::get_if<fc::CouplingLayer>(&layer)) {
      std::vector<fc::Param*> ps;
      cp->collect_params(ps);
      for (fc::Param* p : ps)
        for (double& v : p->value.raw()) v = scale * rng.normal();
    } else if (auto* bn = std::get_if<fc::BatchNormLayer>(&layer)) {
      for (double& v : bn->beta().value.raw()) v = scale * rng.normal();
      for (double& v : bn->gamma().value.raw()) v = scale * rng.normal();
      Tensor m = bn->mean();
      Tensor var = bn->variance();
      for (double& v : m.raw()) v = scale * rng.normal();
      for (double& v : var.raw()) v = 0.5 + std::abs(rng.normal());
      bn->set_statistics(m, var);
    }
  }
  if (auto* mog = std::get_if<fc::MadeMogBase>(&model.base()))
    randomize_conditioner(mog->cond, rng, scale);
}

Tensor fd_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                   double step = 1e-6) {
  const Tensor y0 = f(x);
  Tensor jac = Tensor::zeros({y0.numel(), x.numel()});
  for (std::size_t j = 0; j < x.numel(); ++j) {
    Tensor hi = x, lo = x;
    hi[j] += step;
    lo[j] -= step;
    const Tensor yh = f(hi), yl = f(lo);
    for (std::size_t i = 0; i < y0.numel(); ++i) jac(i, j) = (yh[i] - yl[i]) / (2.0 * step);
  }
  return jac;
}

double log_abs_det(Tensor a) {
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

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// expected log density of the banana target under itself, derived in closed
// form from its two gaussian factors and cross-checked by Monte Carlo below
constexpr double kBananaExpectedLL = -3.5310242469692907;

fc::FlowModel small_flow(const std::string& family, int d, int k, std::uint64_t seed) {
  fc::ModelSpec s;
  s.family = family;
  s.dim = d;
  s.num_layers = k;
  s.hidden_layers = 1;
  s.hidden_units = 8;
  s.components = 4;
  s.seed = seed;
  return fc::build_model(s);
}

// ---------------------------------------------------------------------------

void criterion_1_banana_reproduction() {
  const auto t0 = std::chrono::steady_clock::now();

  // Monte Carlo oracle for the expected log likelihood (1e6 draws), checked
  // against the closed form before it is used as the yardstick.
  fc::Rng mc_rng(2024);
  double mc = 0.0;
  const std::size_t n_mc = 1000000;
  Tensor draws = fc::synthetic_banana(n_mc, mc_rng);
  for (std::size_t i = 0; i < n_mc; ++i) mc += fc::banana_logpdf(row_of(draws, i));
  mc /= static_cast<double>(n_mc);
  if (std::abs(mc - kBananaExpectedLL) > 0.005) {
    report(1, "banana-density reproduction", false,
           "Monte Carlo oracle disagrees with the closed form: " + std::to_string(mc));
    return;
  }

  fs::create_directories("acc_run");
  write_file("acc_run/maf5.ini",
             "[dataset]\nsource = banana\nn = 10000\nseed = 42\n"
             "[model]\nfamily = maf\nnum_layers = 5\nhidden_layers = 1\nhidden_units = 32\nseed = 1\n"
             "[train]\nstep_size = 1e-3\nbatch = 100\nmax_epochs = 150\npatience = 30\nseed = 3\n"
             "[output]\ndir = acc_run/maf5\n");
  write_file("acc_run/made.ini",
             "[dataset]\nsource = banana\nn = 10000\nseed = 42\n"
             "[model]\nfamily = made\nhidden_layers = 1\nhidden_units = 100\nseed = 1\n"
             "[train]\nbatch = 100\nmax_epochs = 200\npatience = 30\nseed = 3\n"
             "[output]\ndir = acc_run/made\n");

  if (run_cli("train acc_run/maf5.ini") != 0 || run_cli("train acc_run/made.ini") != 0) {
    report(1, "banana-density reproduction", false, "training command failed");
    return;
  }
  const double maf_ll = json_mean_ll("acc_run/maf5/eval.json");
  const double made_ll = json_mean_ll("acc_run/made/eval.json");

  // the gaussian baseline must sit strictly below the trained flow
  fc::ExperimentConfig cfg = fc::parse_experiment_config("acc_run/maf5.ini");
  fc::Rng data_rng = fc::Rng(cfg.dataset.seed).child("banana");
  Tensor all = fc::synthetic_banana(static_cast<std::size_t>(cfg.dataset.n), data_rng);
  fc::Dataset ds = fc::make_dataset(all, "banana", "none", 0.0, cfg.dataset.seed);
  fc::GaussianModel baseline = fc::GaussianModel::fit(ds.train);
  Tensor base_lls = baseline.log_prob(ds.test);
  double base_ll = 0.0;
  for (double v : base_lls.raw()) base_ll += v;
  base_ll /= static_cast<double>(base_lls.numel());

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool maf_close = std::abs(maf_ll - kBananaExpectedLL) < 0.10;
  const bool made_gap = made_ll <= maf_ll - 0.10;
  const bool base_below = base_ll < maf_ll;
  const bool in_budget = secs < 600.0;

  std::ostringstream os;
  os.precision(4);
  os << "oracle " << kBananaExpectedLL << ", mc " << mc << ", maf5 " << maf_ll << ", made "
     << made_ll << ", gaussian " << base_ll << ", " << secs << "s";
  report(1, "banana-density reproduction at desk scale",
         maf_close && made_gap && base_below && in_budget, os.str());
}

void criterion_2_jacobians() {
  double worst = 0.0;
  int checked = 0;
  fc::Rng rng(11);

  auto check_model = [&](fc::FlowModel& model, int d) {
    Tensor x0 = random_matrix(1, static_cast<std::size_t>(d), rng);
    auto inv = [&](const Tensor& row) {
      Tensor xm = Tensor::zeros({1, static_cast<std::size_t>(d)});
      for (std::size_t j = 0; j < static_cast<std::size_t>(d); ++j) xm(0, j) = row[j];
      return row_of(model.inverse(xm).first, 0);
    };
    Tensor jac = fd_jacobian(inv, row_of(x0, 0));
    const double analytic = model.inverse(x0).second[0];
    worst = std::max(worst, std::abs(log_abs_det(jac) - analytic));
    ++checked;
  };

  std::uint64_t seed = 500;
  for (int d = 2; d <= 6; ++d) {
    for (int rep = 0; rep < 10; ++rep) {
      fc::ModelSpec base_spec;
      base_spec.family = "made";
      base_spec.dim = d;
      base_spec.hidden_layers = 1;
      base_spec.hidden_units = 8;
      base_spec.seed = ++seed;

      fc::FlowModel ar = fc::build_model(base_spec);
      randomize_model(ar, rng, 0.4);
      check_model(ar, d);

      fc::FlowModel coupling(base_spec,
                             {fc::CouplingLayer(d, {8},
                                                rep % 2 ? fc::CouplingLayer::Parity::kCopyEven
                                                        : fc::CouplingLayer::Parity::kCopyOdd,
                                                0, fc::Rng(++seed))},
                             fc::StandardGaussianBase{});
      randomize_model(coupling, rng, 0.4);
      coupling.set_train_mode(false);
      check_model(coupling, d);

      fc::FlowModel bn(base_spec, {fc::BatchNormLayer(d)}, fc::StandardGaussianBase{});
      randomize_model(bn, rng, 0.4);
      bn.set_train_mode(false);
      check_model(bn, d);

      fc::FlowModel maf3 = small_flow("maf", d, 3, ++seed);
      randomize_model(maf3, rng, 0.3);
      maf3.set_train_mode(false);
      check_model(maf3, d);

      fc::FlowModel nvp4 = small_flow("realnvp", d, 4, ++seed);
      randomize_model(nvp4, rng, 0.3);
      nvp4.set_train_mode(false);
      check_model(nvp4, d);
    }
  }
  std::ostringstream os;
  os << checked << " instances over D=2..6, worst |delta| " << worst;
  report(2, "analytic log-determinants match numerical Jacobians", worst < 1e-5, os.str());
}

void criterion_3_invertibility() {
  double worst = 0.0;
  int checked = 0;
  int resampled = 0;
  fc::Rng rng(13);
  std::uint64_t seed = 900;

  // a random deep stack can push exp-scales past double range; such draws
  // define no usable flow, so they are resampled (and counted)
  auto round_trip = [&](fc::FlowModel& model, int d) {
    Tensor x = random_matrix(4, static_cast<std::size_t>(d), rng);
    auto [u, ldi] = model.inverse(x);
    auto [x2, ldf] = model.forward(u);
    worst = std::max(worst, max_abs_diff(x, x2));
    Tensor u0 = random_matrix(4, static_cast<std::size_t>(d), rng);
    auto [x3, l3] = model.forward(u0);
    auto [u3, l4] = model.inverse(x3);
    worst = std::max(worst, max_abs_diff(u0, u3));
  };

  for (int rep = 0; rep < 20; ++rep) {
    const int d = 2 + rep % 5;
    for (const char* family : {"made", "maf", "realnvp", "maf_mog"}) {
      for (int attempt = 0; attempt < 8; ++attempt) {
        fc::FlowModel model = small_flow(family, d, 2 + rep % 3, ++seed);
        randomize_model(model, rng, 0.15);
        model.set_train_mode(false);
        try {
          round_trip(model, d);
          ++checked;
          break;
        } catch (const fc::NumericError&) {
          ++resampled;
        }
      }
    }
    fc::ModelSpec s;
    s.family = "made";
    s.dim = d;
    s.seed = ++seed;
    fc::FlowModel bn(s, {fc::BatchNormLayer(d)}, fc::StandardGaussianBase{});
    randomize_model(bn, rng, 0.4);
    bn.set_train_mode(false);
    round_trip(bn, d);
    ++checked;
  }
  std::ostringstream os;
  os << checked << " instances (" << resampled << " degenerate draws resampled), "
     << "worst round-trip error " << worst;
  report(3, "forward/inverse round trips close", checked >= 100 && worst < 1e-8, os.str());
}

void criterion_4_autoregressive_property() {
  fc::Rng rng(17);
  bool ok = true;
  int checked = 0;
  std::string detail;
  for (int d : {1, 2, 3, 5, 7, 10}) {
    for (fc::HeadKind head : {fc::HeadKind::kGaussian, fc::HeadKind::kMog}) {
      for (int cond_width : {0, 4}) {
        fc::Conditioner c(d, {16, 16}, fc::identity_order(d), fc::DegreeAssignment::kSequential,
                          cond_width, fc::Activation::kRelu, head, 3,
                          fc::Rng(1000 + static_cast<std::uint64_t>(d)).child("weight-init"),
                          static_cast<std::uint64_t>(d));
        randomize_conditioner(c, rng, 0.5);
        Tensor x = random_matrix(1, static_cast<std::size_t>(d), rng);
        Tensor y = random_matrix(1, 4, rng);
        const Tensor* yp = cond_width > 0 ? &y : nullptr;
        fc::CondParams base = c.forward(x, yp);
        for (int k = 1; k <= d; ++k) {
          Tensor xp = x;
          for (int pos = k; pos <= d; ++pos) xp(0, c.index_at_position(pos)) -= 3.0 + 2.0 * pos;
          fc::CondParams pert = c.forward(xp, yp);
          const std::size_t i = c.index_at_position(k);
          bool same = true;
          if (head == fc::HeadKind::kGaussian) {
            same = base.mu(0, i) == pert.mu(0, i) && base.alpha(0, i) == pert.alpha(0, i);
          } else {
            for (int cc = 0; cc < 3 && same; ++cc) {
              const std::size_t idx = i * 3 + static_cast<std::size_t>(cc);
              same = base.means(0, idx) == pert.means(0, idx) &&
                     base.log_stds(0, idx) == pert.log_stds(0, idx) &&
                     base.weights(0, idx) == pert.weights(0, idx);
            }
          }
          if (!same && ok) {
            ok = false;
            detail = "violated at D=" + std::to_string(d) + " k=" + std::to_string(k);
          }
          ++checked;
        }
      }
    }
  }
  if (ok) detail = std::to_string(checked) + " (D, head, labels, k) combinations bitwise clean";
  report(4, "autoregressive property holds bitwise", ok, detail);
}

void criterion_5_gradients() {
  fc::Rng rng(19);
  double worst = 0.0;
  long params_checked = 0;

  auto check_family = [&](const std::string& family, int k) {
    fc::ModelSpec s;
    s.family = family;
    s.dim = 3;
    s.num_layers = k;
    s.hidden_layers = 1;
    s.hidden_units = 6;
    s.components = 3;
    s.seed = 300 + static_cast<std::uint64_t>(k);
    fc::FlowModel model = fc::build_model(s);
    randomize_model(model, rng, 0.3);
    model.set_train_mode(true);
    Tensor xb = random_matrix(5, 3, rng);

    std::vector<fc::Param*> params = model.collect_params();
    auto loss_value = [&]() {
      fc::Tape tape;
      fc::TapeBinding tb(tape, false);
      fc::Var loss = fc::training_loss(model, tb, xb, nullptr, 0.0);
      return tape.value(loss)[0];
    };
    fc::Tape tape;
    fc::TapeBinding tb(tape, true);
    fc::Var loss = fc::training_loss(model, tb, xb, nullptr, 0.0);
    fc::Gradients grads = tape.backward(loss);
    std::vector<Tensor> g = fc::collect_gradients(params, tb, grads);

    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i]->value.numel(); ++j) {
        const double saved = params[i]->value[j];
        params[i]->value[j] = saved + 1e-5;
        const double hi = loss_value();
        params[i]->value[j] = saved - 1e-5;
        const double lo = loss_value();
        params[i]->value[j] = saved;
        const double fd = (hi - lo) / 2e-5;
        const double denom = std::max({std::abs(fd), std::abs(g[i][j]), 1e-6});
        worst = std::max(worst, std::abs(fd - g[i][j]) / denom);
        ++params_checked;
      }
    }
  };

  check_family("made", 1);
  check_family("made_mog", 1);
  check_family("maf", 2);
  check_family("realnvp", 2);

  std::ostringstream os;
  os << params_checked << " parameters, worst relative error " << worst;
  report(5, "full-model gradients match central differences", worst < 1e-4, os.str());
}

void criterion_6_density_identity() {
  fc::Rng rng(23);
  fc::FlowModel maf = small_flow("maf", 2, 2, 777);
  randomize_model(maf, rng, 0.3);
  maf.set_train_mode(false);
  fc::Rng data_rng(29);
  Tensor xs = fc::synthetic_banana(1000, data_rng);
  auto [lhs, rhs] = maf.kl_identity_check(fc::banana_logpdf, xs);
  double worst = 0.0;
  for (std::size_t i = 0; i < xs.rows(); ++i) worst = std::max(worst, std::abs(lhs[i] - rhs[i]));
  std::ostringstream os;
  os << "1000 samples, worst per-sample |lhs - rhs| " << worst;
  report(6, "per-sample density identity between flow readings", worst < 1e-9, os.str());
}

void criterion_7_normalization() {
  bool ok = true;
  std::ostringstream os;
  for (const char* run : {"acc_run/maf5/model.fcpt", "acc_run/made/model.fcpt"}) {
    fc::FlowModel model = fc::FlowModel::load(run);
    // +-8 sigma of the banana target per dimension (sd ~ sqrt(3) and 2)
    const double x1_lo = 1.0 - 8.0 * std::sqrt(3.0), x1_hi = 1.0 + 8.0 * std::sqrt(3.0);
    const double x2_lo = -16.0, x2_hi = 16.0;
    const std::size_t res = 400;
    Tensor grid = Tensor::zeros({res * res, 2});
    const double d1 = (x1_hi - x1_lo) / static_cast<double>(res);
    const double d2 = (x2_hi - x2_lo) / static_cast<double>(res);
    std::size_t r = 0;
    for (std::size_t i = 0; i < res; ++i)
      for (std::size_t j = 0; j < res; ++j, ++r) {
        grid(r, 0) = x1_lo + (static_cast<double>(i) + 0.5) * d1;
        grid(r, 1) = x2_lo + (static_cast<double>(j) + 0.5) * d2;
      }
    Tensor ll = fc::batched_log_prob(model, grid, nullptr);
    double mass = 0.0;
    for (double v : ll.raw()) mass += std::exp(v);
    mass *= d1 * d2;
    ok = ok && std::abs(mass - 1.0) < 1e-2;
    os << fs::path(run).parent_path().filename().string() << " mass " << mass << "; ";
  }

  fc::Rng rng(31);
  fc::Conditioner mog(1, {4}, fc::identity_order(1), fc::DegreeAssignment::kSequential, 0,
                      fc::Activation::kRelu, fc::HeadKind::kMog, 10, fc::Rng(37), 37);
  for (auto& w : mog.weights())
    for (double& v : w.value.raw()) v = 0.0;
  for (auto& b : mog.biases())
    for (double& v : b.value.raw()) v = 0.0;
  Tensor& bias = mog.biases().back().value;
  for (int k = 0; k < 10; ++k) {
    bias[static_cast<std::size_t>(k)] = rng.normal();
    bias[static_cast<std::size_t>(10 + k)] = 3.0 * rng.normal();
    bias[static_cast<std::size_t>(20 + k)] = -0.5 + 0.5 * rng.normal();
  }
  const double lo = -40.0, hi = 40.0;
  const std::size_t n = 40000;
  const double h = (hi - lo) / static_cast<double>(n);
  double integral = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double x = lo + static_cast<double>(i) * h;
    const double f = std::exp(mog.log_prob(Tensor::row({x}))[0]);
    integral += ((i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0)) * f;
  }
  integral *= h / 3.0;
  ok = ok && std::abs(integral - 1.0) < 1e-6;
  os << "1-d mixture quadrature " << integral;
  report(7, "densities integrate to one", ok, os.str());
}

void criterion_8_bits_per_pixel() {
  fc::Rng rng(41);
  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const double lambda = 0.45 * rng.uniform();
    const double x = 6.0 * rng.normal();
    // uniform 8-bit source pushed through dequantize+logit:
    // p(x) = sigma(x) (1 - sigma(x)) / (1 - 2 lambda), which must convert
    // back to exactly 8 bits per pixel
    const double logp = fc::log_sigmoid(x) + fc::log_sigmoid(-x) - std::log(1.0 - 2.0 * lambda);
    worst = std::max(worst, std::abs(fc::bits_per_pixel(logp, Tensor::row({x}), lambda) - 8.0));
  }
  const double logp = -2.31;
  const double closed = -logp / std::log(2.0) + 6.0;
  const double got = fc::bits_per_pixel(logp, Tensor::row({0.0}), 0.0);
  const bool ok = worst < 1e-10 && std::abs(got - closed) < 1e-12;
  std::ostringstream os;
  os << "uniform-source oracle worst |delta| " << worst << ", closed form |delta| "
     << std::abs(got - closed);
  report(8, "bits-per-pixel conversion matches the change-of-variables oracle", ok, os.str());
}

void criterion_9_parameter_counts() {
  bool exact_ok = true;
  bool approx_ok = true;
  std::ostringstream os;

  for (const char* family : {"made", "made_mog", "maf", "maf_mog", "realnvp"}) {
    fc::ModelSpec s;
    s.family = family;
    s.dim = 5;
    s.num_layers = 3;
    s.hidden_layers = 2;
    s.hidden_units = 12;
    s.components = 6;
    s.seed = 5;
    fc::FlowModel model = fc::build_model(s);
    long independent = 0;
    for (auto& layer : model.layers()) {
      if (auto* ar = std::get_if<fc::AffineARLayer>(&layer)) {
        fc::Conditioner& c = ar->conditioner();
        for (std::size_t l = 0; l < c.weights().size(); ++l)
          for (double v : c.mask_for(l).raw()) independent += v != 0.0 ? 1 : 0;
      } else if (auto* cp = std::get_if<fc::CouplingLayer>(&layer)) {
        for (const auto& w : cp->scale_net().weights())
          independent += static_cast<long>(w.value.numel());
        for (const auto& w : cp->shift_net().weights())
          independent += static_cast<long>(w.value.numel());
      }
    }
    if (auto* mog = std::get_if<fc::MadeMogBase>(&model.base())) {
      for (std::size_t l = 0; l < mog->cond.weights().size(); ++l)
        for (double v : mog->cond.mask_for(l).raw()) independent += v != 0.0 ? 1 : 0;
    }
    exact_ok = exact_ok && model.exact_weight_count() == independent;
  }

  // coarse-formula agreement within 10% at D = H for the families whose
  // formula assumes half-masked (or unmasked) connectivity
  double worst_ratio_err = 0.0;
  for (int dh : {8, 16, 32}) {
    for (int l : {1, 2}) {
      for (const char* family : {"made", "maf", "realnvp"}) {
        fc::ModelSpec s;
        s.family = family;
        s.dim = dh;
        s.num_layers = 4;
        s.hidden_layers = l;
        s.hidden_units = dh;
        s.seed = 9;
        fc::FlowModel model = fc::build_model(s);
        const double ratio = static_cast<double>(model.exact_weight_count()) / fc::approx_weight_count(s);
        worst_ratio_err = std::max(worst_ratio_err, std::abs(ratio - 1.0));
        approx_ok = approx_ok && std::abs(ratio - 1.0) < 0.10;
      }
    }
  }

  // the mixture-head formula counts each extra component as DH rather than
  // the three half-masked output blocks the construction actually adds, so
  // its ratio sits far above one; surfaced for visibility, not gated
  fc::ModelSpec mog;
  mog.family = "made_mog";
  mog.dim = 16;
  mog.hidden_layers = 1;
  mog.hidden_units = 16;
  mog.components = 10;
  mog.seed = 9;
  fc::FlowModel mog_model = fc::build_model(mog);
  const double mog_ratio =
      static_cast<double>(mog_model.exact_weight_count()) / fc::approx_weight_count(mog);

  os << "exact==independent: " << (exact_ok ? "yes" : "NO") << "; worst |ratio-1| "
     << worst_ratio_err << " over made/maf/realnvp at D=H in {8,16,32}, L in {1,2}"
     << "; mixture-head ratio " << mog_ratio << " (coarse formula undercounts by construction)";
  report(9, "parameter counts: exact and approximate", exact_ok && approx_ok, os.str());
}

void criterion_10_tabular_pipeline() {
  // synthesize a tabular file shaped like a household-power table: six
  // partially correlated columns, values snapped to coarse grids
  fc::Rng rng(47);
  const std::size_t n = 4000;
  Tensor all = Tensor::zeros({n, 6});
  for (std::size_t i = 0; i < n; ++i) {
    const double a = rng.normal(), b = rng.normal(), c = rng.normal();
    all(i, 0) = std::round((2.0 + 0.8 * a) * 100.0) / 100.0;
    all(i, 1) = std::round((240.0 + 3.0 * b) * 10.0) / 10.0;
    all(i, 2) = std::round((10.0 + 2.0 * (0.6 * a + 0.4 * c)) * 10.0) / 10.0;
    all(i, 3) = std::round(std::abs(6.0 * c));
    all(i, 4) = std::round(std::abs(3.0 * b + 1.0));
    all(i, 5) = std::round(1440.0 * rng.uniform());
  }
  fs::create_directories("acc_run");
  fc::save_matrix_csv("acc_run/power_like.csv", all);

  bool ok = true;
  std::ostringstream os;
  try {
    Tensor loaded = fc::load_matrix("acc_run/power_like.csv");
    fc::Dataset ds = fc::make_dataset(loaded, "power_like", "power", 0.0, 7);

    // the gaussian baseline is exactly recomputable: refits and checkpoint
    // round trips are bitwise, and an independent evaluation agrees
    fc::GaussianModel g1 = fc::GaussianModel::fit(ds.train);
    fc::GaussianModel g2 = fc::GaussianModel::fit(ds.train);
    Tensor l1 = g1.log_prob(ds.test);
    Tensor l2 = g2.log_prob(ds.test);
    ok = ok && max_abs_diff(l1, l2) == 0.0;
    g1.save("acc_run/power_gaussian.fcpt");
    fc::GaussianModel g3 = fc::GaussianModel::load("acc_run/power_gaussian.fcpt");
    Tensor l3 = g3.log_prob(ds.test);
    ok = ok && max_abs_diff(l1, l3) == 0.0;

    // independent evaluation: dense inverse via Gauss-Jordan elimination
    const std::size_t d = ds.train.cols();
    Tensor cov = g1.covariance();
    Tensor aug = Tensor::zeros({d, 2 * d});
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) aug(i, j) = cov(i, j);
      aug(i, d + i) = 1.0;
    }
    double logdet = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      std::size_t pivot = c;
      for (std::size_t r = c + 1; r < d; ++r)
        if (std::abs(aug(r, c)) > std::abs(aug(pivot, c))) pivot = r;
      for (std::size_t k = 0; k < 2 * d; ++k) std::swap(aug(pivot, k), aug(c, k));
      logdet += std::log(std::abs(aug(c, c)));
      const double piv = aug(c, c);
      for (std::size_t k = 0; k < 2 * d; ++k) aug(c, k) /= piv;
      for (std::size_t r = 0; r < d; ++r) {
        if (r == c) continue;
        const double f = aug(r, c);
        for (std::size_t k = 0; k < 2 * d; ++k) aug(r, k) -= f * aug(c, k);
      }
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < std::min<std::size_t>(ds.test.rows(), 200); ++i) {
      double q = 0.0;
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b)
          q += (ds.test(i, a) - g1.mean()[a]) * aug(a, d + b) * (ds.test(i, b) - g1.mean()[b]);
      const double independent = -0.5 * (static_cast<double>(d) * fc::kLog2Pi + logdet + q);
      worst = std::max(worst, std::abs(independent - l1[i]));
    }
    ok = ok && worst < 1e-9;
    os << "baseline recompute bitwise, independent-eval |delta| " << worst;

    // one training epoch of a 5-layer flow completes without numeric failure
    fc::ModelSpec s;
    s.family = "maf";
    s.dim = static_cast<int>(ds.dim());
    s.num_layers = 5;
    s.hidden_layers = 1;
    s.hidden_units = 32;
    s.seed = 21;
    fc::FlowModel model = fc::build_model(s);
    fc::TrainConfig tc;
    tc.step_size = 1e-4;
    tc.max_epochs = 1;
    tc.seed = 13;
    fc::TrainResult r = fc::train(model, ds.train, nullptr, ds.val, nullptr, tc);
    ok = ok && r.history.size() == 1 && std::isfinite(r.history[0].train_nll) &&
         std::isfinite(r.history[0].val_ll);
    os << "; one flow epoch: train nll " << r.history[0].train_nll << ", val ll "
       << r.history[0].val_ll;
  } catch (const std::exception& e) {
    ok = false;
    os << "exception: " << e.what();
  }
  report(10, "tabular pipeline with user-supplied data", ok, os.str());
}

}  // namespace

int main() {
  criterion_1_banana_reproduction();
  criterion_2_jacobians();
  criterion_3_invertibility();
  criterion_4_autoregressive_property();
  criterion_5_gradients();
  criterion_6_density_identity();
  criterion_7_normalization();
  criterion_8_bits_per_pixel();
  criterion_9_parameter_counts();
  criterion_10_tabular_pipeline();

  if (g_failures == 0) {
    std::printf("all criteria passed\n");
    return 0;
  }
  std::printf("%d criteria failed\n", g_failures);
  return 1;
}
