#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flowcast/errors.hpp"
#include "flowcast/normal.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

/// One applied transform with the statistics needed to invert it (where an
/// inverse exists).
struct PreprocessStep {
  std::string kind;                // "drop_columns" | "standardize" | "dequantize_logit" | "noise"
  std::vector<std::size_t> kept;   // surviving column indices (drop_columns)
  Tensor mean;                     // standardize
  Tensor std;                      // standardize
  double lambda = 0.0;             // dequantize_logit
  std::string note;
};

struct Dataset {
  std::string name;
  Tensor train;
  Tensor val;
  Tensor test;
  Tensor train_labels;
  Tensor val_labels;
  Tensor test_labels;
  int label_width = 0;
  std::vector<PreprocessStep> preprocessing;

  int dim() const { return static_cast<int>(train.cols()); }
  bool has_labels() const { return label_width > 0; }
};

// ---------------------------------------------------------------------------
// On-disk formats: CSV with a header row, and a raw little-endian float64
// matrix with a 16-byte header (magic "FMAT", version, rows, cols). Loaders
// auto-detect by magic.
// ---------------------------------------------------------------------------

inline void save_matrix_csv(const std::string& path, const Tensor& m,
                            const std::vector<std::string>& header = {}) {
  require_matrix(m, "save_matrix_csv");
  std::ofstream os(path);
  if (!os) throw UsageError("cannot open for writing: " + path);
  os.precision(17);
  if (!header.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j) os << (j ? "," : "") << header[j];
    os << "\n";
  } else {
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? "," : "") << "c" << j;
    os << "\n";
  }
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
    os << "\n";
  }
}

inline Tensor load_matrix_csv_stream(std::istream& is, const std::string& what) {
  std::string line;
  if (!std::getline(is, line)) throw UsageError("empty csv file: " + what);
  std::vector<double> data;
  std::size_t cols = 0;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        data.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw UsageError("non-numeric field '" + cell + "' in " + what);
      }
      ++c;
    }
    if (cols == 0) cols = c;
    if (c != cols) throw UsageError("ragged csv row in " + what);
    ++rows;
  }
  if (rows == 0) throw UsageError("csv has a header but no data rows: " + what);
  return Tensor({rows, cols}, std::move(data));
}

inline constexpr char kMatrixMagic[4] = {'F', 'M', 'A', 'T'};

inline void save_matrix_fmat(const std::string& path, const Tensor& m) {
  require_matrix(m, "save_matrix_fmat");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot open for writing: " + path);
  os.write(kMatrixMagic, 4);
  auto put_u32 = [&](std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  put_u32(1);
  put_u32(static_cast<std::uint32_t>(m.rows()));
  put_u32(static_cast<std::uint32_t>(m.cols()));
  for (double d : m.raw()) {
    std::uint64_t v;
    static_assert(sizeof(v) == sizeof(d));
    std::memcpy(&v, &d, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
  }
}

inline Tensor load_matrix(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open data file: " + path);
  char magic[4] = {0, 0, 0, 0};
  is.read(magic, 4);
  if (is && std::memcmp(magic, kMatrixMagic, 4) == 0) {
    auto get_u32 = [&]() {
      unsigned char b[4];
      is.read(reinterpret_cast<char*>(b), 4);
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
      return v;
    };
    const std::uint32_t version = get_u32();
    if (version != 1) throw UsageError("unsupported matrix file version in " + path);
    const std::size_t rows = get_u32();
    const std::size_t cols = get_u32();
    Tensor m = Tensor::zeros({rows, cols});
    for (double& d : m.raw()) {
      unsigned char b[8];
      is.read(reinterpret_cast<char*>(b), 8);
      std::uint64_t v = 0;
      for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
      std::memcpy(&d, &v, 8);
    }
    if (!is) throw UsageError("truncated matrix file: " + path);
    return m;
  }
  is.close();
  std::ifstream text(path);
  return load_matrix_csv_stream(text, path);
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

struct StandardizeStats {
  std::vector<std::size_t> kept;
  Tensor mean;
  Tensor std;
  std::vector<std::string> dropped_notes;
};

inline Tensor keep_columns(const Tensor& m, const std::vector<std::size_t>& kept) {
  Tensor out = Tensor::zeros({m.rows(), kept.size()});
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t k = 0; k < kept.size(); ++k) out(i, k) = m(i, kept[k]);
  return out;
}

/// Fits mean/std on the train split. Zero-variance features are reported
/// and dropped.
inline StandardizeStats standardize_fit(const Tensor& train) {
  require_matrix(train, "standardize");
  const std::size_t n = train.rows(), d = train.cols();
  if (n == 0) throw UsageError("standardize: empty train split");
  StandardizeStats st;
  std::vector<double> means, stds;
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += train(i, j);
    const double mean = s / static_cast<double>(n);
    double q = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dd = train(i, j) - mean;
      q += dd * dd;
    }
    const double sd = std::sqrt(q / static_cast<double>(n));
    if (sd == 0.0) {
      st.dropped_notes.push_back("feature " + std::to_string(j) + " has zero variance; dropped");
      continue;
    }
    st.kept.push_back(j);
    means.push_back(mean);
    stds.push_back(sd);
  }
  const std::size_t kept_count = st.kept.size();
  st.mean = Tensor({kept_count}, std::move(means));
  st.std = Tensor({kept_count}, std::move(stds));
  return st;
}

inline Tensor standardize_apply(const Tensor& m, const StandardizeStats& st) {
  Tensor out = keep_columns(m, st.kept);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = (out(i, j) - st.mean[j]) / st.std[j];
  return out;
}

inline Tensor standardize_invert(const Tensor& m, const PreprocessStep& step) {
  Tensor out = m;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = out(i, j) * step.std[j] + step.mean[j];
  return out;
}

/// Greedy scan in column order: a column is dropped when |r| with any
/// already-kept column exceeds the threshold.
inline std::vector<std::size_t> prune_correlated_fit(const Tensor& m, double threshold = 0.98) {
  require_matrix(m, "prune_correlated");
  const std::size_t n = m.rows(), d = m.cols();
  if (n < 2) throw UsageError("prune_correlated: needs at least 2 rows");
  std::vector<double> mean(d, 0.0), norm(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) mean[j] += m(i, j);
    mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double c = m(i, j) - mean[j];
      norm[j] += c * c;
    }
    norm[j] = std::sqrt(norm[j]);
  }
  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < d; ++j) {
    bool drop = false;
    for (std::size_t k : kept) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += (m(i, j) - mean[j]) * (m(i, k) - mean[k]);
      const double denom = norm[j] * norm[k];
      const double r = denom > 0.0 ? dot / denom : (norm[j] == 0.0 && norm[k] == 0.0 ? 1.0 : 0.0);
      if (std::abs(r) > threshold) {
        drop = true;
        break;
      }
    }
    if (!drop) kept.push_back(j);
  }
  return kept;
}

/// x = logit(lambda + (1 - 2 lambda) z') for z' in [0, 1).
inline double logit_transform_scalar(double zprime, double lambda) {
  const double s = lambda + (1.0 - 2.0 * lambda) * zprime;
  return std::log(s / (1.0 - s));
}

/// z' = (z + U[0,1)) / 256, x = logit(lambda + (1 - 2 lambda) z').
inline Tensor dequantize_logit(const Tensor& pixels, double lambda, Rng& rng) {
  if (lambda < 0.0 || lambda >= 0.5) throw UsageError("dequantize_logit: lambda must be in [0, 0.5)");
  for (double z : pixels.raw())
    if (z != std::floor(z) || z < 0.0 || z > 255.0)
      throw UsageError("dequantize_logit: pixel values must be integers in 0..255");
  Tensor out = pixels;
  for (double& z : out.raw()) {
    const double zp = (z + rng.uniform()) / 256.0;
    z = logit_transform_scalar(zp, lambda);
  }
  return out;
}

inline double logit_invert_scalar(double x, double lambda) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return (s - lambda) / (1.0 - 2.0 * lambda);  // recovers z' in [0, 1)
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Banana-shaped 2-d test density: x2 ~ N(0, 4), x1 ~ N(x2^2/4, 1).
inline Tensor synthetic_banana(std::size_t n, Rng& rng) {
  Tensor out = Tensor::zeros({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double x2 = 2.0 * rng.normal();
    const double x1 = x2 * x2 / 4.0 + rng.normal();
    out(i, 0) = x1;
    out(i, 1) = x2;
  }
  return out;
}

/// Exact log density of the generator above; row = (x1, x2).
inline double banana_logpdf(const Tensor& row) {
  const double x1 = row[0], x2 = row[1];
  return normal_logpdf(x2, 0.0, 4.0) + normal_logpdf(x1, x2 * x2 / 4.0, 1.0);
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// 10% of rows held out for test, then 10% of the remainder for validation,
/// after a seeded shuffle.
inline SplitIndices split_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = Rng(seed).child("split");
  rng.shuffle(idx);
  const std::size_t n_test = n / 10;
  const std::size_t n_val = (n - n_test) / 10;
  SplitIndices s;
  s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test),
               idx.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), idx.end());
  return s;
}

// ---------------------------------------------------------------------------
// Dataset assembly and preprocessing recipes
// ---------------------------------------------------------------------------

inline Tensor rows_of(const Tensor& m, const std::vector<std::size_t>& idx) {
  Tensor out = Tensor::zeros({idx.size(), m.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(idx[i], j);
  return out;
}

inline void apply_to_splits(Dataset& ds, const std::function<Tensor(const Tensor&)>& f) {
  ds.train = f(ds.train);
  ds.val = f(ds.val);
  ds.test = f(ds.test);
}

inline void recipe_standardize(Dataset& ds, std::vector<std::string>* diagnostics) {
  StandardizeStats st = standardize_fit(ds.train);
  if (diagnostics)
    for (const auto& note : st.dropped_notes) diagnostics->push_back(note);
  if (st.kept.size() != ds.train.cols()) {
    PreprocessStep drop;
    drop.kind = "drop_columns";
    drop.kept = st.kept;
    drop.note = "zero-variance features removed";
    ds.preprocessing.push_back(drop);
  }
  apply_to_splits(ds, [&](const Tensor& m) { return standardize_apply(m, st); });
  PreprocessStep step;
  step.kind = "standardize";
  step.kept = st.kept;
  step.mean = st.mean;
  step.std = st.std;
  ds.preprocessing.push_back(std::move(step));
}

inline void recipe_prune(Dataset& ds, double threshold, std::vector<std::string>* diagnostics) {
  std::vector<std::size_t> kept = prune_correlated_fit(ds.train, threshold);
  if (kept.size() == ds.train.cols()) return;
  if (diagnostics)
    diagnostics->push_back("dropped " + std::to_string(ds.train.cols() - kept.size()) +
                           " correlated features (|r| > " + std::to_string(threshold) + ")");
  PreprocessStep step;
  step.kind = "drop_columns";
  step.kept = kept;
  step.note = "pearson |r| pruning";
  ds.preprocessing.push_back(step);
  apply_to_splits(ds, [&](const Tensor& m) { return keep_columns(m, kept); });
}

/// Uniform noise on [0, eps_j) per column; eps_j defaults to 1% of the
/// smallest nonzero gap between sorted train values of that column.
inline void recipe_column_noise(Dataset& ds, Rng& rng, std::vector<std::string>* diagnostics) {
  const std::size_t d = ds.train.cols();
  std::vector<double> eps(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> col(ds.train.rows());
    for (std::size_t i = 0; i < col.size(); ++i) col[i] = ds.train(i, j);
    std::sort(col.begin(), col.end());
    double gap = 0.0;
    for (std::size_t i = 1; i < col.size(); ++i) {
      const double g = col[i] - col[i - 1];
      if (g > 0.0 && (gap == 0.0 || g < gap)) gap = g;
    }
    eps[j] = 0.01 * gap;
    if (diagnostics && eps[j] > 0.0)
      diagnostics->push_back("column " + std::to_string(j) + ": noise interval [0, " +
                             std::to_string(eps[j]) + ")");
  }
  auto add_noise = [&](const Tensor& m) {
    Tensor out = m;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += eps[j] * rng.uniform();
    return out;
  };
  apply_to_splits(ds, add_noise);
  PreprocessStep step;
  step.kind = "noise";
  step.note = "per-column uniform noise, eps = 1% of min nonzero train gap";
  ds.preprocessing.push_back(step);
}

/// Drops columns whose most frequent train value covers more than the
/// given fraction of rows (spiky, reoccurring-value features).
inline void recipe_drop_reoccurring(Dataset& ds, double max_fraction,
                                    std::vector<std::string>* diagnostics) {
  const std::size_t n = ds.train.rows(), d = ds.train.cols();
  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < d; ++j) {
    std::map<double, std::size_t> counts;
    for (std::size_t i = 0; i < n; ++i) ++counts[ds.train(i, j)];
    std::size_t top = 0;
    for (const auto& [value, count] : counts) top = std::max(top, count);
    if (static_cast<double>(top) / static_cast<double>(n) > max_fraction) {
      if (diagnostics)
        diagnostics->push_back("feature " + std::to_string(j) + " dominated by a single value; dropped");
      continue;
    }
    kept.push_back(j);
  }
  if (kept.size() == d) return;
  PreprocessStep step;
  step.kind = "drop_columns";
  step.kept = kept;
  step.note = "reoccurring-value features removed";
  ds.preprocessing.push_back(step);
  apply_to_splits(ds, [&](const Tensor& m) { return keep_columns(m, kept); });
}

/// Removes rows that sit entirely at the given sentinel value (train split
/// outlier rule; other splits share the filter).
inline void recipe_drop_sentinel_rows(Dataset& ds, double sentinel,
                                      std::vector<std::string>* diagnostics) {
  auto filter = [&](const Tensor& m) {
    std::vector<std::size_t> keep_rows;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      bool all = true;
      for (std::size_t j = 0; j < m.cols(); ++j)
        if (m(i, j) != sentinel) {
          all = false;
          break;
        }
      if (!all) keep_rows.push_back(i);
    }
    return rows_of(m, keep_rows);
  };
  const std::size_t before = ds.train.rows() + ds.val.rows() + ds.test.rows();
  apply_to_splits(ds, filter);
  const std::size_t after = ds.train.rows() + ds.val.rows() + ds.test.rows();
  if (diagnostics && after != before)
    diagnostics->push_back("removed " + std::to_string(before - after) + " sentinel outlier rows");
}

inline void recipe_dequantize_logit(Dataset& ds, double lambda, Rng& rng) {
  apply_to_splits(ds, [&](const Tensor& m) { return dequantize_logit(m, lambda, rng); });
  PreprocessStep step;
  step.kind = "dequantize_logit";
  step.lambda = lambda;
  ds.preprocessing.push_back(step);
}

inline const std::vector<std::string>& dataset_recipes() {
  static const std::vector<std::string> names = {"none",      "standardize", "power",
                                                 "hepmass",   "miniboone",   "images"};
  return names;
}

/// Named preprocessing recipes. Statistics are always fitted on the train
/// split and applied to every split.
inline void apply_recipe(Dataset& ds, const std::string& recipe, double lambda, Rng rng,
                         std::vector<std::string>* diagnostics = nullptr) {
  Rng noise_rng = rng.child("column-noise");
  Rng deq_rng = rng.child("dequantize");
  if (recipe == "none") {
    return;
  } else if (recipe == "standardize") {
    recipe_standardize(ds, diagnostics);
  } else if (recipe == "power") {
    recipe_column_noise(ds, noise_rng, diagnostics);
    recipe_prune(ds, 0.98, diagnostics);
    recipe_standardize(ds, diagnostics);
  } else if (recipe == "hepmass") {
    recipe_drop_reoccurring(ds, 0.1, diagnostics);
    recipe_prune(ds, 0.98, diagnostics);
    recipe_standardize(ds, diagnostics);
  } else if (recipe == "miniboone") {
    recipe_drop_sentinel_rows(ds, -1000.0, diagnostics);
    recipe_drop_reoccurring(ds, 0.1, diagnostics);
    recipe_prune(ds, 0.98, diagnostics);
    recipe_standardize(ds, diagnostics);
  } else if (recipe == "images") {
    recipe_dequantize_logit(ds, lambda, deq_rng);
  } else {
    std::string allowed;
    for (const auto& r : dataset_recipes()) allowed += (allowed.empty() ? "" : ", ") + r;
    throw UsageError("unknown dataset recipe '" + recipe + "' (allowed: " + allowed + ")");
  }
}

/// One-hot encodes an integer class column, removing it from the features.
inline void extract_labels(Dataset& ds, std::size_t label_col) {
  auto one_hot = [&](const Tensor& m, Tensor& labels_out, int n_classes) {
    labels_out = Tensor::zeros({m.rows(), static_cast<std::size_t>(n_classes)});
    for (std::size_t i = 0; i < m.rows(); ++i) {
      const double v = m(i, label_col);
      if (v != std::floor(v) || v < 0.0 || v >= n_classes)
        throw UsageError("label column must hold integers in 0..L-1");
      labels_out(i, static_cast<std::size_t>(v)) = 1.0;
    }
  };
  if (label_col >= ds.train.cols()) throw UsageError("label column out of range");
  int n_classes = 0;
  for (const Tensor* m : {&ds.train, &ds.val, &ds.test})
    for (std::size_t i = 0; i < m->rows(); ++i)
      n_classes = std::max(n_classes, static_cast<int>((*m)(i, label_col)) + 1);
  one_hot(ds.train, ds.train_labels, n_classes);
  one_hot(ds.val, ds.val_labels, n_classes);
  one_hot(ds.test, ds.test_labels, n_classes);
  ds.label_width = n_classes;
  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < ds.train.cols(); ++j)
    if (j != label_col) kept.push_back(j);
  apply_to_splits(ds, [&](const Tensor& m) { return keep_columns(m, kept); });
}

/// Splits a monolithic matrix into a Dataset and applies a recipe.
inline Dataset make_dataset(const Tensor& all, const std::string& name, const std::string& recipe,
                            double lambda, std::uint64_t seed, int label_col = -1,
                            std::vector<std::string>* diagnostics = nullptr) {
  Dataset ds;
  ds.name = name;
  SplitIndices idx = split_indices(all.rows(), seed);
  ds.train = rows_of(all, idx.train);
  ds.val = rows_of(all, idx.val);
  ds.test = rows_of(all, idx.test);
  if (label_col >= 0) extract_labels(ds, static_cast<std::size_t>(label_col));
  apply_recipe(ds, recipe, lambda, Rng(seed), diagnostics);
  return ds;
}

}  // namespace flowcast
