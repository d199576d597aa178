#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "flowcast/checkpoint.hpp"
#include "flowcast/conditioner.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/layers.hpp"
#include "flowcast/normal.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tape.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

struct StandardGaussianBase {};

struct MadeMogBase {
  Conditioner cond;
};

using BaseDensity = std::variant<StandardGaussianBase, MadeMogBase>;

/// Structural description of a model; everything needed to rebuild the
/// layer stack deterministically (weights are loaded separately).
struct ModelSpec {
  std::string family;  // made | made_mog | realnvp | maf | maf_mog
  int dim = 0;
  int cond_width = 0;
  int num_layers = 5;    // K, flow families only
  int hidden_layers = 1; // L
  int hidden_units = 100;
  int components = 10;   // C, mixture families only
  std::string activation = "relu";
  std::uint64_t seed = 1;
  Order order;  // empty means identity

  std::vector<int> hidden_sizes() const {
    return std::vector<int>(static_cast<std::size_t>(hidden_layers), hidden_units);
  }
};

inline const std::vector<std::string>& model_families() {
  static const std::vector<std::string> fams = {"made", "made_mog", "realnvp", "maf", "maf_mog"};
  return fams;
}

/// Ordered stack of invertible layers over a base density. The layer list
/// runs data side -> base side: log_prob traverses it in order applying
/// inverses, sample traverses it reversed applying forwards.
class FlowModel {
 public:
  FlowModel() = default;

  FlowModel(ModelSpec spec, std::vector<FlowLayer> layers, BaseDensity base)
      : spec_(std::move(spec)), layers_(std::move(layers)), base_(std::move(base)) {}

  const ModelSpec& spec() const { return spec_; }
  int dim() const { return spec_.dim; }
  int cond_width() const { return spec_.cond_width; }
  std::vector<FlowLayer>& layers() { return layers_; }
  const std::vector<FlowLayer>& layers() const { return layers_; }
  BaseDensity& base() { return base_; }
  const BaseDensity& base() const { return base_; }

  std::vector<Param*> collect_params() {
    std::vector<Param*> out;
    for (auto& layer : layers_) std::visit([&](auto& l) { l.collect_params(out); }, layer);
    if (auto* mog = std::get_if<MadeMogBase>(&base_)) mog->cond.collect_params(out);
    return out;
  }

  void set_train_mode(bool train) {
    for (auto& layer : layers_)
      if (auto* bn = std::get_if<BatchNormLayer>(&layer)) bn->set_train_mode(train);
  }

  bool eval_mode() const {
    for (const auto& layer : layers_)
      if (const auto* bn = std::get_if<BatchNormLayer>(&layer))
        if (bn->train_mode()) return false;
    return true;
  }

  /// Per-sample log density, on tape: apply each layer's inverse data ->
  /// base, accumulate log-determinants, add the base log density.
  Var log_prob_t(TapeBinding& tb, Var x, std::optional<Var> y) {
    Tape& t = tb.tape;
    const std::size_t n = t.value(x).rows();
    Var h = x;
    Var ld = t.constant(Tensor::zeros({n}));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      LayerResult r = layer_inverse(i, tb, h, y);
      h = r.value;
      ld = t.add(ld, r.logdet);
    }
    return t.add(base_log_prob_t(tb, h, y), ld);
  }

  /// Off-tape log densities for a batch; eval-mode pure.
  Tensor log_prob(const Tensor& x, const Tensor* y = nullptr) {
    Tape tape;
    TapeBinding tb(tape, false);
    const Tensor xm = Conditioner::as_matrix(x, spec_.dim, "model input");
    std::optional<Var> yv = bind_labels(tb, y, xm.rows());
    Var ll = log_prob_t(tb, tb.constant(xm), yv);
    Tensor out = tape.value(ll);
    if (!out.all_finite()) throw NumericError("log_prob produced non-finite values");
    return out;
  }

  /// Transform data to base space. Returns (u, per-row logdet).
  std::pair<Tensor, Tensor> inverse(const Tensor& x, const Tensor* y = nullptr) {
    Tape tape;
    TapeBinding tb(tape, false);
    const Tensor xm = Conditioner::as_matrix(x, spec_.dim, "model input");
    std::optional<Var> yv = bind_labels(tb, y, xm.rows());
    Var h = tb.constant(xm);
    Var ld = tape.constant(Tensor::zeros({xm.rows()}));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      LayerResult r = layer_inverse(i, tb, h, yv);
      h = r.value;
      ld = tape.add(ld, r.logdet);
    }
    return {tape.value(h), tape.value(ld)};
  }

  /// Transform base-space points to data space. Returns (x, per-row logdet
  /// of the forward direction).
  std::pair<Tensor, Tensor> forward(const Tensor& u, const Tensor* y = nullptr) {
    Tape tape;
    TapeBinding tb(tape, false);
    const Tensor um = Conditioner::as_matrix(u, spec_.dim, "model input");
    std::optional<Var> yv = bind_labels(tb, y, um.rows());
    Var h = tb.constant(um);
    Var ld = tape.constant(Tensor::zeros({um.rows()}));
    for (std::size_t i = layers_.size(); i-- > 0;) {
      LayerResult r = layer_forward(i, tb, h, yv);
      h = r.value;
      ld = tape.add(ld, r.logdet);
    }
    return {tape.value(h), tape.value(ld)};
  }

  /// Draw from the base, then push base -> data through layer forwards.
  Tensor sample(std::size_t n, Rng& rng, const Tensor* y = nullptr) {
    if (!eval_mode()) throw UsageError("sample requires eval mode (finalize batch norm first)");
    Tensor u;
    if (std::holds_alternative<StandardGaussianBase>(base_)) {
      u = Tensor::zeros({n, static_cast<std::size_t>(spec_.dim)});
      for (double& v : u.raw()) v = rng.normal();
    } else {
      u = std::get<MadeMogBase>(base_).cond.sample(n, rng, y);
    }
    return forward(u, y).first;
  }

  double base_log_prob_row(const Tensor& u_row, const Tensor* y = nullptr) {
    if (std::holds_alternative<StandardGaussianBase>(base_)) return standard_normal_logpdf(u_row);
    return std::get<MadeMogBase>(base_).cond.log_prob(u_row, y)[0];
  }

  /// Per-sample check of the density identity relating the model to its
  /// mirrored construction over the base space: for u = f^{-1}(x),
  ///   lhs = log pi_x(x) - log p_x(x),
  ///   rhs = log p_u(u) - log pi_u(u),
  /// where p_u(u) = pi_x(f(u)) |det df/du|. Returns (lhs, rhs).
  std::pair<Tensor, Tensor> kl_identity_check(const std::function<double(const Tensor&)>& log_pi_x,
                                              const Tensor& xs, const Tensor* y = nullptr) {
    const Tensor xm = Conditioner::as_matrix(xs, spec_.dim, "model input");
    const std::size_t n = xm.rows(), d = xm.cols();
    auto [u, ld_inv] = inverse(xm, y);
    auto [x2, ld_fwd] = forward(u, y);
    Tensor lhs = Tensor::zeros({n});
    Tensor rhs = Tensor::zeros({n});
    for (std::size_t i = 0; i < n; ++i) {
      Tensor xrow = Tensor::zeros({d});
      Tensor x2row = Tensor::zeros({d});
      Tensor urow = Tensor::zeros({d});
      for (std::size_t j = 0; j < d; ++j) {
        xrow[j] = xm(i, j);
        x2row[j] = x2(i, j);
        urow[j] = u(i, j);
      }
      Tensor yrow;
      const Tensor* yrow_p = nullptr;
      if (y) {
        const Tensor ym = Conditioner::as_matrix(*y, spec_.cond_width, "labels", n);
        yrow = Tensor::zeros({ym.cols()});
        for (std::size_t j = 0; j < ym.cols(); ++j) yrow[j] = ym(i, j);
        yrow_p = &yrow;
      }
      const double base_ll = base_log_prob_row(urow, yrow_p);
      const double log_px = base_ll + ld_inv[i];
      const double log_pu = log_pi_x(x2row) + ld_fwd[i];
      lhs[i] = log_pi_x(xrow) - log_px;
      rhs[i] = log_pu - base_ll;
    }
    return {lhs, rhs};
  }

  /// Freezes every batch-norm layer to the statistics of the supplied train
  /// set as transformed up to its depth, switching the model to eval mode.
  /// Also used once per epoch so validation sees full-train-pass statistics.
  void finalize_batchnorm(const Tensor& train_x, const Tensor* y = nullptr) {
    Tensor h = Conditioner::as_matrix(train_x, spec_.dim, "model input");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (auto* bn = std::get_if<BatchNormLayer>(&layers_[i])) bn->finalize(h);
      Tape tape;
      TapeBinding tb(tape, false);
      std::optional<Var> yv = bind_labels(tb, y, h.rows());
      LayerResult r = layer_inverse(i, tb, tb.constant(h), yv);
      h = tape.value(r.value);
    }
  }

  long exact_weight_count() {
    long n = 0;
    for (auto& layer : layers_) {
      if (auto* ar = std::get_if<AffineARLayer>(&layer)) n += ar->conditioner().exact_param_count();
      if (auto* cp = std::get_if<CouplingLayer>(&layer))
        n += cp->scale_net().weight_count() + cp->shift_net().weight_count();
    }
    if (auto* mog = std::get_if<MadeMogBase>(&base_)) n += mog->cond.exact_param_count();
    return n;
  }

  void save(const std::string& path);
  static FlowModel load(const std::string& path);

 private:
  std::optional<Var> bind_labels(TapeBinding& tb, const Tensor* y, std::size_t rows) const {
    if (spec_.cond_width > 0) {
      if (!y) throw UsageError("conditional model requires labels");
      return tb.constant(Conditioner::as_matrix(*y, spec_.cond_width, "labels", rows));
    }
    if (y) throw UsageError("model is unconditional but labels were supplied");
    return std::nullopt;
  }

  LayerResult layer_inverse(std::size_t i, TapeBinding& tb, Var h, std::optional<Var> y) {
    try {
      return std::visit(
          [&](auto& l) -> LayerResult {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, AffineARLayer> || std::is_same_v<L, CouplingLayer>)
              return l.inverse_t(tb, h, y);
            else
              return l.inverse_t(tb, h);
          },
          layers_[i]);
    } catch (const NumericError& e) {
      throw NumericError("layer " + std::to_string(i) + ": " + e.what());
    }
  }

  LayerResult layer_forward(std::size_t i, TapeBinding& tb, Var h, std::optional<Var> y) {
    try {
      return std::visit(
          [&](auto& l) -> LayerResult {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, AffineARLayer> || std::is_same_v<L, CouplingLayer>)
              return l.forward_t(tb, h, y);
            else
              return l.forward_t(tb, h);
          },
          layers_[i]);
    } catch (const NumericError& e) {
      throw NumericError("layer " + std::to_string(i) + ": " + e.what());
    }
  }

  Var base_log_prob_t(TapeBinding& tb, Var u, std::optional<Var> y) {
    Tape& t = tb.tape;
    if (std::holds_alternative<StandardGaussianBase>(base_)) {
      Var q = t.mul_scalar(t.sum_cols(t.mul(u, u)), -0.5);
      return t.add_scalar(q, -0.5 * kLog2Pi * static_cast<double>(spec_.dim));
    }
    return std::get<MadeMogBase>(base_).cond.log_prob_t(tb, u, y);
  }

  ModelSpec spec_;
  std::vector<FlowLayer> layers_;
  BaseDensity base_;
};

/// Builds the layer stack for a model family. Autoregressive layers reverse
/// the variable order at each successive layer; coupling layers alternate
/// the copied parity. Batch normalization follows every autoregressive or
/// coupling layer in the flow families, including between the last layer
/// and the base.
inline FlowModel build_model(const ModelSpec& spec) {
  if (spec.dim < 1) throw UsageError("model dimension must be >= 1");
  ModelSpec s = spec;
  if (s.order.empty()) s.order = identity_order(s.dim);
  validate_order(s.order);
  if (static_cast<int>(s.order.size()) != s.dim) throw UsageError("order length != D");

  const Rng seeds(s.seed);
  auto layer_rng = [&](int k) { return seeds.child("weight-init").child("layer" + std::to_string(k)); };
  auto layer_mask_seed = [&](int k) {
    return seeds.child("masks").child("layer" + std::to_string(k)).root_seed();
  };

  std::vector<FlowLayer> layers;
  BaseDensity base = StandardGaussianBase{};
  const std::vector<int> hidden = s.hidden_sizes();

  auto make_cond = [&](const Order& order, HeadKind head, int k) {
    return Conditioner(s.dim, hidden, order, DegreeAssignment::kSequential, s.cond_width,
                       activation_from_string(s.activation), head,
                       head == HeadKind::kMog ? s.components : 1, layer_rng(k), layer_mask_seed(k));
  };

  if (s.family == "made") {
    layers.emplace_back(AffineARLayer(make_cond(s.order, HeadKind::kGaussian, 0)));
  } else if (s.family == "made_mog") {
    base = MadeMogBase{make_cond(s.order, HeadKind::kMog, 0)};
  } else if (s.family == "maf" || s.family == "maf_mog") {
    Order order = s.order;
    for (int k = 0; k < s.num_layers; ++k) {
      layers.emplace_back(AffineARLayer(make_cond(order, HeadKind::kGaussian, k)));
      layers.emplace_back(BatchNormLayer(s.dim));
      order = reverse_order(order);
    }
    if (s.family == "maf_mog") base = MadeMogBase{make_cond(order, HeadKind::kMog, s.num_layers)};
  } else if (s.family == "realnvp") {
    for (int k = 0; k < s.num_layers; ++k) {
      const auto parity =
          k % 2 == 0 ? CouplingLayer::Parity::kCopyOdd : CouplingLayer::Parity::kCopyEven;
      layers.emplace_back(CouplingLayer(s.dim, hidden, parity, s.cond_width, layer_rng(k)));
      layers.emplace_back(BatchNormLayer(s.dim));
    }
  } else {
    std::string allowed;
    for (const auto& f : model_families()) allowed += (allowed.empty() ? "" : ", ") + f;
    throw UsageError("unknown model family '" + s.family + "' (allowed: " + allowed + ")");
  }
  return FlowModel(std::move(s), std::move(layers), std::move(base));
}

/// The coarse parameter-count model per family (connection weights only).
inline double approx_weight_count(const ModelSpec& s) {
  const double d = s.dim, h = s.hidden_units, l = s.hidden_layers, k = s.num_layers,
               c = s.components;
  const double made = 1.5 * d * h + 0.5 * (l - 1) * h * h;
  const double made_mog = (c + 0.5) * d * h + 0.5 * (l - 1) * h * h;
  if (s.family == "made") return made;
  if (s.family == "made_mog") return made_mog;
  if (s.family == "maf") return k * made;
  if (s.family == "maf_mog") return k * made + made_mog;
  if (s.family == "realnvp") return 2.0 * k * d * h + 2.0 * k * (l - 1) * h * h;
  throw UsageError("unknown model family '" + s.family + "'");
}

inline void FlowModel::save(const std::string& path) {
  nlohmann::json j;
  j["family"] = spec_.family;
  j["dim"] = spec_.dim;
  j["cond_width"] = spec_.cond_width;
  j["num_layers"] = spec_.num_layers;
  j["hidden_layers"] = spec_.hidden_layers;
  j["hidden_units"] = spec_.hidden_units;
  j["components"] = spec_.components;
  j["activation"] = spec_.activation;
  j["seed"] = spec_.seed;
  j["order"] = spec_.order;

  std::vector<const Tensor*> blocks;
  nlohmann::json manifest = nlohmann::json::array();
  for (Param* p : collect_params()) {
    manifest.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    blocks.push_back(&p->value);
  }
  nlohmann::json bn_meta = nlohmann::json::array();
  for (auto& layer : layers_) {
    if (auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      bn_meta.push_back({{"train_mode", bn->train_mode()}});
      blocks.push_back(&bn->mean());
      blocks.push_back(&bn->variance());
    }
  }
  j["params"] = manifest;
  j["batchnorm"] = bn_meta;
  checkpoint::save(path, checkpoint::Kind::kFlowModel, j, blocks);
}

inline FlowModel FlowModel::load(const std::string& path) {
  checkpoint::Contents c = checkpoint::load(path);
  if (c.kind != checkpoint::Kind::kFlowModel)
    throw UsageError("checkpoint does not contain a flow model: " + path);
  const nlohmann::json& j = c.header;
  ModelSpec spec;
  spec.family = j.at("family").get<std::string>();
  spec.dim = j.at("dim").get<int>();
  spec.cond_width = j.at("cond_width").get<int>();
  spec.num_layers = j.at("num_layers").get<int>();
  spec.hidden_layers = j.at("hidden_layers").get<int>();
  spec.hidden_units = j.at("hidden_units").get<int>();
  spec.components = j.at("components").get<int>();
  spec.activation = j.at("activation").get<std::string>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.order = j.at("order").get<Order>();

  FlowModel model = build_model(spec);
  std::vector<Param*> params = model.collect_params();
  const auto& manifest = j.at("params");
  if (manifest.size() != params.size())
    throw UsageError("checkpoint parameter manifest does not match model structure");
  std::size_t b = 0;
  for (std::size_t i = 0; i < params.size(); ++i, ++b) {
    if (c.blocks[b].shape() != params[i]->value.shape())
      throw UsageError("checkpoint block shape mismatch for " + params[i]->name);
    params[i]->value = c.blocks[b];
  }
  const auto& bn_meta = j.at("batchnorm");
  std::size_t bn_idx = 0;
  for (auto& layer : model.layers()) {
    if (auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      Tensor m = c.blocks.at(b++);
      Tensor v = c.blocks.at(b++);
      bn->set_statistics(std::move(m), std::move(v));
      bn->set_train_mode(bn_meta.at(bn_idx).at("train_mode").get<bool>());
      ++bn_idx;
    }
  }
  return model;
}

}  // namespace flowcast
