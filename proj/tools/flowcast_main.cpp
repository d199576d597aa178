// Command-line front end: train, eval, sample, grid, compare, params.
// Exit codes: 0 success, 1 numeric failure, 2 usage or config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>

#include "flowcast/flowcast.hpp"

namespace fc = flowcast;
namespace fs = std::filesystem;

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

fc::Dataset load_dataset(const fc::DatasetConfig& dc, std::vector<std::string>* diagnostics) {
  if (dc.source == "banana") {
    fc::Rng rng = fc::Rng(dc.seed).child("banana");
    fc::Tensor all = fc::synthetic_banana(static_cast<std::size_t>(dc.n), rng);
    return fc::make_dataset(all, dc.name, dc.recipe, dc.lambda, dc.seed, dc.label_col, diagnostics);
  }
  fc::Tensor all = fc::load_matrix(dc.path);
  return fc::make_dataset(all, dc.name, dc.recipe, dc.lambda, dc.seed, dc.label_col, diagnostics);
}

struct ResolvedData {
  fc::Dataset dataset;
  bool from_config = false;
  fc::ExperimentConfig config;
};

ResolvedData resolve_data(const std::string& arg) {
  ResolvedData r;
  if (ends_with(arg, ".ini")) {
    r.config = fc::parse_experiment_config(arg);
    r.dataset = load_dataset(r.config.dataset, nullptr);
    r.from_config = true;
    return r;
  }
  fc::Tensor all = fc::load_matrix(arg);
  r.dataset.name = arg;
  r.dataset.train = all;
  r.dataset.val = all;
  r.dataset.test = all;
  return r;
}

using AnyModel = std::variant<fc::FlowModel, fc::GaussianModel>;

AnyModel resolve_model(const std::string& arg, const ResolvedData& data) {
  if (arg == "gaussian") {
    if (!data.from_config)
      throw fc::UsageError("the gaussian baseline needs a config file with a train split");
    return fc::GaussianModel::fit(data.dataset.train);
  }
  fc::checkpoint::Contents probe = fc::checkpoint::load(arg);
  if (probe.kind == fc::checkpoint::Kind::kGaussianBaseline) return fc::GaussianModel::load(arg);
  return fc::FlowModel::load(arg);
}

int model_dim(const AnyModel& m) {
  if (std::holds_alternative<fc::FlowModel>(m)) return std::get<fc::FlowModel>(m).dim();
  return std::get<fc::GaussianModel>(m).dim();
}

std::string model_name(const AnyModel& m) {
  if (std::holds_alternative<fc::FlowModel>(m)) {
    const auto& spec = std::get<fc::FlowModel>(m).spec();
    return spec.family;
  }
  return "gaussian";
}

const fc::Tensor& pick_split(const fc::Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "val") return ds.val;
  if (split == "test") return ds.test;
  throw fc::UsageError("unknown split '" + split + "' (allowed: train, val, test)");
}

const fc::Tensor* pick_labels(const fc::Dataset& ds, const std::string& split) {
  if (!ds.has_labels()) return nullptr;
  if (split == "train") return &ds.train_labels;
  if (split == "val") return &ds.val_labels;
  return &ds.test_labels;
}

fc::Tensor eval_lls(AnyModel& model, const fc::Tensor& data, const fc::Tensor* labels,
                    bool conditional_marginal) {
  if (std::holds_alternative<fc::GaussianModel>(model))
    return std::get<fc::GaussianModel>(model).log_prob(data);
  fc::FlowModel& fm = std::get<fc::FlowModel>(model);
  if (fm.dim() != static_cast<int>(data.cols()))
    throw fc::UsageError("dimension mismatch: checkpoint D=" + std::to_string(fm.dim()) +
                         ", data D=" + std::to_string(data.cols()));
  if (conditional_marginal) {
    if (fm.cond_width() <= 0)
      throw fc::UsageError("--conditional-marginal needs a conditional model");
    const std::size_t labels_n = static_cast<std::size_t>(fm.cond_width());
    fc::Tensor prior = fc::Tensor::full({labels_n}, 1.0 / static_cast<double>(labels_n));
    fc::Tensor out = fc::Tensor::zeros({data.rows()});
    for (std::size_t i = 0; i < data.rows(); ++i) {
      fc::Tensor row = fc::Tensor::zeros({data.cols()});
      for (std::size_t j = 0; j < data.cols(); ++j) row[j] = data(i, j);
      out[i] = fc::conditional_marginal_logprob(fm, row, prior);
    }
    return out;
  }
  if (fm.cond_width() > 0 && !labels)
    throw fc::UsageError("conditional model needs labels (or --conditional-marginal)");
  return fc::batched_log_prob(fm, data, labels);
}

void print_report(const fc::EvalReport& r) {
  std::printf("model        dataset        n       mean_ll      2se%s\n", r.bpp ? "        bpp" : "");
  std::printf("%-12s %-14s %-7zu %+.5f  %.5f", r.model.c_str(), r.dataset.c_str(), r.n, r.mean_ll,
              r.two_sigma);
  if (r.bpp) std::printf("  %.5f", *r.bpp);
  std::printf("\n");
}

int cmd_train(const std::string& config_path) {
  fc::ExperimentConfig cfg = fc::parse_experiment_config(config_path);
  std::vector<std::string> diagnostics;
  fc::Dataset ds = load_dataset(cfg.dataset, &diagnostics);
  for (const auto& d : diagnostics) std::fprintf(stderr, "dataset: %s\n", d.c_str());

  cfg.model.dim = ds.dim();
  if (cfg.conditional) {
    if (!ds.has_labels())
      throw fc::UsageError("conditional model requested but the dataset has no labels "
                           "(set dataset.label_col)");
    cfg.model.cond_width = ds.label_width;
  }
  fc::FlowModel model = fc::build_model(cfg.model);

  fc::TrainResult result =
      fc::train(model, ds.train, ds.has_labels() ? &ds.train_labels : nullptr, ds.val,
                ds.has_labels() ? &ds.val_labels : nullptr, cfg.train);

  fs::create_directories(cfg.output_dir);
  const std::string ckpt = cfg.output_dir + "/model.fcpt";
  model.save(ckpt);
  fc::write_history_csv(cfg.output_dir + "/history.csv", result.history);

  fc::Tensor lls = fc::batched_log_prob(model, ds.test, ds.has_labels() ? &ds.test_labels : nullptr);
  fc::EvalReport report = fc::make_report(lls, cfg.model.family, ds.name);
  std::ofstream os(cfg.output_dir + "/eval.json");
  os << report.to_json().dump(2) << "\n";
  os.close();

  std::printf("trained %s on %s: %zu epochs, best val ll %.5f (epoch %d)\n",
              cfg.model.family.c_str(), ds.name.c_str(), result.history.size(), result.best_val_ll,
              result.best_epoch);
  print_report(report);
  std::printf("checkpoint: %s\n", ckpt.c_str());
  return 0;
}

int cmd_eval(const std::string& model_arg, const std::string& data_arg, const std::string& split,
             std::optional<double> bpp_lambda, bool conditional_marginal,
             const std::string& out_path) {
  ResolvedData data = resolve_data(data_arg);
  AnyModel model = resolve_model(model_arg, data);
  const fc::Tensor& x = data.from_config ? pick_split(data.dataset, split) : data.dataset.test;
  const fc::Tensor* y = data.from_config ? pick_labels(data.dataset, split) : nullptr;
  if (model_dim(model) != static_cast<int>(x.cols()))
    throw fc::UsageError("dimension mismatch: checkpoint D=" + std::to_string(model_dim(model)) +
                         ", data D=" + std::to_string(x.cols()));

  fc::Tensor lls = eval_lls(model, x, y, conditional_marginal);
  fc::EvalReport report = fc::make_report(lls, model_name(model), data.dataset.name);
  if (bpp_lambda) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      fc::Tensor row = fc::Tensor::zeros({x.cols()});
      for (std::size_t j = 0; j < x.cols(); ++j) row[j] = x(i, j);
      s += fc::bits_per_pixel(report.per_example[i], row, *bpp_lambda);
    }
    report.bpp = s / static_cast<double>(x.rows());
  }
  print_report(report);
  if (!out_path.empty()) {
    std::ofstream os(out_path);
    if (!os) throw fc::UsageError("cannot open output file: " + out_path);
    os << report.to_json().dump(2) << "\n";
  }
  return 0;
}

int cmd_sample(const std::string& ckpt, std::size_t n, std::uint64_t seed, int label,
               const std::string& out_path) {
  fc::FlowModel model = fc::FlowModel::load(ckpt);
  fc::Rng rng = fc::Rng(seed).child("sampling");
  fc::Tensor y;
  const fc::Tensor* yp = nullptr;
  if (model.cond_width() > 0) {
    if (label < 0 || label >= model.cond_width())
      throw fc::UsageError("conditional model: pass --label in 0.." +
                           std::to_string(model.cond_width() - 1));
    y = fc::Tensor::zeros({static_cast<std::size_t>(model.cond_width())});
    y[static_cast<std::size_t>(label)] = 1.0;
    yp = &y;
  } else if (label >= 0) {
    throw fc::UsageError("--label given but the model is unconditional");
  }
  fc::Tensor samples = model.sample(n, rng, yp);
  if (out_path.empty()) {
    for (std::size_t i = 0; i < samples.rows(); ++i) {
      for (std::size_t j = 0; j < samples.cols(); ++j)
        std::printf("%s%.17g", j ? "," : "", samples(i, j));
      std::printf("\n");
    }
  } else {
    fc::save_matrix_csv(out_path, samples);
    std::printf("wrote %zu samples to %s\n", samples.rows(), out_path.c_str());
  }
  return 0;
}

int cmd_grid(const std::string& ckpt, const std::string& bounds_str, std::size_t resolution,
             const std::string& out_path, const std::string& points_path,
             const std::string& u_out_path) {
  fc::FlowModel model = fc::FlowModel::load(ckpt);
  if (model.dim() != 2) throw fc::UsageError("grid export needs a 2-d model, got D=" +
                                             std::to_string(model.dim()));
  if (resolution < 1) throw fc::UsageError("resolution must be >= 1");
  double x1min, x1max, x2min, x2max;
  if (std::sscanf(bounds_str.c_str(), "%lf,%lf,%lf,%lf", &x1min, &x1max, &x2min, &x2max) != 4)
    throw fc::UsageError("bounds must be 'x1min,x1max,x2min,x2max'");
  if (x1min >= x1max || x2min >= x2max) throw fc::UsageError("bounds must be increasing");

  const double dx1 = (x1max - x1min) / static_cast<double>(resolution);
  const double dx2 = (x2max - x2min) / static_cast<double>(resolution);
  fc::Tensor grid = fc::Tensor::zeros({resolution * resolution, 2});
  std::size_t r = 0;
  for (std::size_t i = 0; i < resolution; ++i)
    for (std::size_t j = 0; j < resolution; ++j, ++r) {
      grid(r, 0) = x1min + (static_cast<double>(i) + 0.5) * dx1;
      grid(r, 1) = x2min + (static_cast<double>(j) + 0.5) * dx2;
    }
  fc::Tensor lls = fc::batched_log_prob(model, grid, nullptr);

  std::ostream* os = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw fc::UsageError("cannot open output file: " + out_path);
    os = &file;
  }
  os->precision(17);
  (*os) << "x1,x2,logp\n";
  for (std::size_t i = 0; i < grid.rows(); ++i)
    (*os) << grid(i, 0) << "," << grid(i, 1) << "," << lls[i] << "\n";

  if (!points_path.empty()) {
    if (u_out_path.empty()) throw fc::UsageError("--points needs --u-out");
    fc::Tensor pts = fc::load_matrix(points_path);
    if (pts.cols() != 2) throw fc::UsageError("points file must have 2 columns");
    fc::Tensor u = model.inverse(pts, nullptr).first;
    fc::save_matrix_csv(u_out_path, u, {"u1", "u2"});
  }
  return 0;
}

int cmd_compare(const std::string& a_arg, const std::string& b_arg, const std::string& data_arg) {
  ResolvedData data = resolve_data(data_arg);
  AnyModel a = resolve_model(a_arg, data);
  AnyModel b = resolve_model(b_arg, data);
  if (model_dim(a) != model_dim(b))
    throw fc::UsageError("checkpoints disagree on D: " + std::to_string(model_dim(a)) + " vs " +
                         std::to_string(model_dim(b)));
  const fc::Tensor& x = data.dataset.test;
  const fc::Tensor* y = data.from_config ? pick_labels(data.dataset, "test") : nullptr;
  if (model_dim(a) != static_cast<int>(x.cols()))
    throw fc::UsageError("dimension mismatch: checkpoint D=" + std::to_string(model_dim(a)) +
                         ", data D=" + std::to_string(x.cols()));
  fc::Tensor ll_a = eval_lls(a, x, y, false);
  fc::Tensor ll_b = eval_lls(b, x, y, false);
  fc::PairedComparison c = fc::paired_compare(ll_a, ll_b);
  std::printf("model_a      model_b      n       mean_diff    2se        t          p\n");
  std::printf("%-12s %-12s %-7zu %+.5f  %.5f  %+.4f  %.6g\n", model_name(a).c_str(),
              model_name(b).c_str(), c.n, c.mean_diff, c.two_sigma, c.t_stat, c.p_value);
  return 0;
}

int cmd_params(const std::string& config_path) {
  fc::ExperimentConfig cfg = fc::parse_experiment_config(config_path);
  fc::Dataset ds = load_dataset(cfg.dataset, nullptr);
  cfg.model.dim = ds.dim();
  if (cfg.conditional) {
    if (!ds.has_labels()) throw fc::UsageError("conditional model requested but dataset has no labels");
    cfg.model.cond_width = ds.label_width;
  }
  fc::FlowModel model = fc::build_model(cfg.model);
  const long exact = model.exact_weight_count();
  const double approx = fc::approx_weight_count(cfg.model);
  std::printf("family=%s D=%d L=%d H=%d", cfg.model.family.c_str(), cfg.model.dim,
              cfg.model.hidden_layers, cfg.model.hidden_units);
  if (cfg.model.family == "maf" || cfg.model.family == "maf_mog" || cfg.model.family == "realnvp")
    std::printf(" K=%d", cfg.model.num_layers);
  if (cfg.model.family == "made_mog" || cfg.model.family == "maf_mog")
    std::printf(" C=%d", cfg.model.components);
  std::printf("\n");
  std::printf("exact unmasked weight count: %ld\n", exact);
  std::printf("approximate count (coarse formula): %.0f\n", approx);
  std::printf("exact/approx ratio: %.4f\n", static_cast<double>(exact) / approx);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowcast: masked autoregressive density estimation"};
  app.require_subcommand(1);

  std::string config_path, model_arg, data_arg, out_path, split = "test";
  std::string bounds = "-8,8,-8,8", points_path, u_out_path;
  std::size_t n = 1000, resolution = 200;
  std::uint64_t seed = 0;
  int label = -1;
  double bpp_lambda = -1.0;
  bool conditional_marginal = false;

  CLI::App* c_train = app.add_subcommand("train", "train a model from a config file");
  c_train->add_option("config", config_path, "experiment config (.ini)")->required();

  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on data");
  c_eval->add_option("checkpoint", model_arg, "checkpoint path, or 'gaussian'")->required();
  c_eval->add_option("data", data_arg, "config (.ini) or data file")->required();
  c_eval->add_option("--split", split, "train|val|test (config data only)");
  c_eval->add_option("--bpp", bpp_lambda, "report bits per pixel with this lambda");
  c_eval->add_flag("--conditional-marginal", conditional_marginal,
                   "marginalize a conditional model over a uniform label prior");
  c_eval->add_option("--out", out_path, "write the report as JSON here");

  CLI::App* c_sample = app.add_subcommand("sample", "draw samples from a checkpoint");
  c_sample->add_option("checkpoint", model_arg)->required();
  c_sample->add_option("n", n, "number of samples")->required();
  c_sample->add_option("--seed", seed, "sampling seed");
  c_sample->add_option("--label", label, "class label for conditional models");
  c_sample->add_option("--out", out_path, "write samples as CSV here");

  CLI::App* c_grid = app.add_subcommand("grid", "export a 2-d log-density grid as CSV");
  c_grid->add_option("checkpoint", model_arg)->required();
  c_grid->add_option("--bounds", bounds, "x1min,x1max,x2min,x2max");
  c_grid->add_option("--resolution", resolution, "cells per axis");
  c_grid->add_option("--out", out_path, "output CSV (default stdout)");
  c_grid->add_option("--points", points_path, "also transform these points to base space");
  c_grid->add_option("--u-out", u_out_path, "output CSV for transformed points");

  CLI::App* c_compare = app.add_subcommand("compare", "paired comparison of two checkpoints");
  c_compare->add_option("checkpoint_a", model_arg)->required();
  c_compare->add_option("checkpoint_b", data_arg)->required();  // reused slot
  std::string compare_data;
  c_compare->add_option("data", compare_data, "config (.ini) or data file")->required();

  CLI::App* c_params = app.add_subcommand("params", "print exact and approximate parameter counts");
  c_params->add_option("config", config_path, "experiment config (.ini)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_train->parsed()) return cmd_train(config_path);
    if (c_eval->parsed())
      return cmd_eval(model_arg, data_arg, split,
                      c_eval->count("--bpp") > 0 ? std::optional<double>(bpp_lambda) : std::nullopt,
                      conditional_marginal, out_path);
    if (c_sample->parsed()) return cmd_sample(model_arg, n, seed, label, out_path);
    if (c_grid->parsed())
      return cmd_grid(model_arg, bounds, resolution, out_path, points_path, u_out_path);
    if (c_compare->parsed()) return cmd_compare(model_arg, data_arg, compare_data);
    if (c_params->parsed()) return cmd_params(config_path);
  } catch (const fc::UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const fc::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
