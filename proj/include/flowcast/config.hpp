#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flowcast/errors.hpp"
#include "flowcast/flow.hpp"
#include "flowcast/train.hpp"

namespace flowcast {

struct DatasetConfig {
  std::string source = "banana";  // banana | file
  std::string path;
  std::string recipe = "none";
  double lambda = 1e-6;
  int n = 10000;  // sample count for synthetic sources
  std::uint64_t seed = 0;
  int label_col = -1;
  std::string name;
};

/// Full experiment description: data, model and training hyperparameters
/// plus the output directory. Flat INI sections with key=value lines.
struct ExperimentConfig {
  DatasetConfig dataset;
  ModelSpec model;
  bool conditional = false;
  TrainConfig train;
  std::string output_dir = ".";
};

namespace detail_config {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline long to_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long x = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline Order to_order(const std::string& key, const std::string& v) {
  Order o;
  std::stringstream ss(v);
  std::string cell;
  while (std::getline(ss, cell, ','))
    o.push_back(static_cast<int>(to_long(key, trim(cell))));
  return o;
}

inline std::string order_to_string(const Order& o) {
  std::string s;
  for (std::size_t i = 0; i < o.size(); ++i) s += (i ? "," : "") + std::to_string(o[i]);
  return s;
}

}  // namespace detail_config

inline ExperimentConfig parse_experiment_config_text(const std::string& text) {
  using detail_config::to_bool;
  using detail_config::to_double;
  using detail_config::to_long;
  using detail_config::to_order;
  using detail_config::trim;

  static const std::map<std::string, std::set<std::string>> allowed = {
      {"dataset", {"source", "path", "recipe", "lambda", "n", "seed", "label_col", "name"}},
      {"model",
       {"family", "num_layers", "hidden_layers", "hidden_units", "components", "conditional",
        "activation", "order", "seed"}},
      {"train",
       {"step_size", "batch", "l2", "patience", "max_epochs", "seed", "beta1", "beta2",
        "adam_eps"}},
      {"output", {"dir"}}};

  ExperimentConfig cfg;
  std::set<std::string> seen;

  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw UsageError("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(s.substr(1, s.size() - 2));
      if (allowed.find(section) == allowed.end()) {
        std::string names;
        for (const auto& [k, v] : allowed) names += (names.empty() ? "" : ", ") + k;
        throw UsageError("unknown config section '" + section + "' (allowed: " + names + ")");
      }
      continue;
    }
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (section.empty()) throw UsageError("config key '" + key + "' appears before any section");
    const auto& keys = allowed.at(section);
    if (keys.find(key) == keys.end()) {
      std::string names;
      for (const auto& k : keys) names += (names.empty() ? "" : ", ") + k;
      throw UsageError("unknown config key '" + key + "' in [" + section + "] (allowed: " + names + ")");
    }
    seen.insert(section + "." + key);

    if (section == "dataset") {
      if (key == "source") cfg.dataset.source = value;
      else if (key == "path") cfg.dataset.path = value;
      else if (key == "recipe") cfg.dataset.recipe = value;
      else if (key == "lambda") cfg.dataset.lambda = to_double(key, value);
      else if (key == "n") cfg.dataset.n = static_cast<int>(to_long(key, value));
      else if (key == "seed") cfg.dataset.seed = static_cast<std::uint64_t>(to_long(key, value));
      else if (key == "label_col") cfg.dataset.label_col = static_cast<int>(to_long(key, value));
      else if (key == "name") cfg.dataset.name = value;
    } else if (section == "model") {
      if (key == "family") cfg.model.family = value;
      else if (key == "num_layers") cfg.model.num_layers = static_cast<int>(to_long(key, value));
      else if (key == "hidden_layers") cfg.model.hidden_layers = static_cast<int>(to_long(key, value));
      else if (key == "hidden_units") cfg.model.hidden_units = static_cast<int>(to_long(key, value));
      else if (key == "components") cfg.model.components = static_cast<int>(to_long(key, value));
      else if (key == "conditional") cfg.conditional = to_bool(key, value);
      else if (key == "activation") cfg.model.activation = value;
      else if (key == "order") cfg.model.order = to_order(key, value);
      else if (key == "seed") cfg.model.seed = static_cast<std::uint64_t>(to_long(key, value));
    } else if (section == "train") {
      if (key == "step_size") cfg.train.step_size = to_double(key, value);
      else if (key == "batch") cfg.train.batch = static_cast<int>(to_long(key, value));
      else if (key == "l2") cfg.train.l2 = to_double(key, value);
      else if (key == "patience") cfg.train.patience = static_cast<int>(to_long(key, value));
      else if (key == "max_epochs") cfg.train.max_epochs = static_cast<int>(to_long(key, value));
      else if (key == "seed") cfg.train.seed = static_cast<std::uint64_t>(to_long(key, value));
      else if (key == "beta1") cfg.train.beta1 = to_double(key, value);
      else if (key == "beta2") cfg.train.beta2 = to_double(key, value);
      else if (key == "adam_eps") cfg.train.adam_eps = to_double(key, value);
    } else if (section == "output") {
      if (key == "dir") cfg.output_dir = value;
    }
  }

  // family validation and family-specific fields
  const auto& fams = model_families();
  bool known = false;
  for (const auto& f : fams) known = known || f == cfg.model.family;
  if (!known) {
    std::string names;
    for (const auto& f : fams) names += (names.empty() ? "" : ", ") + f;
    throw UsageError("unknown model family '" + cfg.model.family + "' (allowed: " + names + ")");
  }
  const bool is_mog = cfg.model.family == "made_mog" || cfg.model.family == "maf_mog";
  const bool is_flow = cfg.model.family == "maf" || cfg.model.family == "maf_mog" ||
                       cfg.model.family == "realnvp";
  if (seen.count("model.components") && !is_mog)
    throw UsageError("config key 'components' only applies to mixture families (made_mog, maf_mog)");
  if (seen.count("model.num_layers") && !is_flow)
    throw UsageError("config key 'num_layers' only applies to flow families (maf, maf_mog, realnvp)");
  if (!seen.count("train.step_size"))
    cfg.train.step_size = cfg.model.family == "made" || cfg.model.family == "made_mog" ? 1e-3 : 1e-4;
  if (cfg.model.hidden_layers < 1 || cfg.model.hidden_units < 1)
    throw UsageError("model hidden_layers and hidden_units must be >= 1");
  if (cfg.dataset.source != "banana" && cfg.dataset.source != "file")
    throw UsageError("unknown dataset source '" + cfg.dataset.source + "' (allowed: banana, file)");
  if (cfg.dataset.source == "file" && cfg.dataset.path.empty())
    throw UsageError("dataset source 'file' requires a path");
  if (cfg.dataset.name.empty())
    cfg.dataset.name = cfg.dataset.source == "banana" ? "banana" : cfg.dataset.path;
  return cfg;
}

inline ExperimentConfig parse_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_experiment_config_text(ss.str());
}

inline std::string serialize_experiment_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "[dataset]\n";
  os << "source = " << cfg.dataset.source << "\n";
  if (!cfg.dataset.path.empty()) os << "path = " << cfg.dataset.path << "\n";
  os << "recipe = " << cfg.dataset.recipe << "\n";
  os << "lambda = " << cfg.dataset.lambda << "\n";
  os << "n = " << cfg.dataset.n << "\n";
  os << "seed = " << cfg.dataset.seed << "\n";
  os << "label_col = " << cfg.dataset.label_col << "\n";
  os << "name = " << cfg.dataset.name << "\n";
  os << "\n[model]\n";
  os << "family = " << cfg.model.family << "\n";
  const bool is_mog = cfg.model.family == "made_mog" || cfg.model.family == "maf_mog";
  const bool is_flow =
      cfg.model.family == "maf" || cfg.model.family == "maf_mog" || cfg.model.family == "realnvp";
  if (is_flow) os << "num_layers = " << cfg.model.num_layers << "\n";
  os << "hidden_layers = " << cfg.model.hidden_layers << "\n";
  os << "hidden_units = " << cfg.model.hidden_units << "\n";
  if (is_mog) os << "components = " << cfg.model.components << "\n";
  os << "conditional = " << (cfg.conditional ? "true" : "false") << "\n";
  os << "activation = " << cfg.model.activation << "\n";
  if (!cfg.model.order.empty())
    os << "order = " << detail_config::order_to_string(cfg.model.order) << "\n";
  os << "seed = " << cfg.model.seed << "\n";
  os << "\n[train]\n";
  os << "step_size = " << cfg.train.step_size << "\n";
  os << "batch = " << cfg.train.batch << "\n";
  os << "l2 = " << cfg.train.l2 << "\n";
  os << "patience = " << cfg.train.patience << "\n";
  os << "max_epochs = " << cfg.train.max_epochs << "\n";
  os << "seed = " << cfg.train.seed << "\n";
  os << "beta1 = " << cfg.train.beta1 << "\n";
  os << "beta2 = " << cfg.train.beta2 << "\n";
  os << "adam_eps = " << cfg.train.adam_eps << "\n";
  os << "\n[output]\n";
  os << "dir = " << cfg.output_dir << "\n";
  return os.str();
}

}  // namespace flowcast
