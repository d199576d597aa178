#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "flowcast/errors.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

/// order[i] is the 1-based position of input variable i in the
/// autoregressive ordering. The identity order models variables in their
/// native index order.
using Order = std::vector<int>;

inline Order identity_order(int d) {
  Order o(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) o[static_cast<std::size_t>(i)] = i + 1;
  return o;
}

/// Reverses the order sequence; applied between successive autoregressive
/// layers of a stack.
inline Order reverse_order(const Order& o) {
  Order r(o.rbegin(), o.rend());
  return r;
}

inline void validate_order(const Order& o) {
  std::vector<bool> seen(o.size(), false);
  for (int p : o) {
    if (p < 1 || static_cast<std::size_t>(p) > o.size() || seen[static_cast<std::size_t>(p - 1)])
      throw UsageError("order must be a permutation of 1..D");
    seen[static_cast<std::size_t>(p - 1)] = true;
  }
}

enum class DegreeAssignment { kSequential, kRandom };

/// Degree vectors and binary connectivity masks for one masked feedforward
/// network. Weight matrices are laid out [inputs x outputs]; a mask entry
/// (i, j) of 1 permits the connection from source unit i to destination
/// unit j. Label inputs occupy the trailing cond_width rows of the first
/// mask and are fully connected.
///
/// The output mask is stored once per data dimension (output_block_mask);
/// heads replicate it per parameter block.
struct MaskSet {
  int dim = 0;
  int cond_width = 0;
  std::vector<int> input_degrees;               // D values in 1..D
  std::vector<std::vector<int>> hidden_degrees; // one vector per hidden layer
  std::vector<int> output_degrees;              // D values in 0..D-1
  std::vector<Tensor> masks;                    // input->hidden, hidden->hidden...
  Tensor output_block_mask;                     // [H_last x D]
};

/// Assigns degrees and builds the connectivity masks that enforce the
/// autoregressive property. The variable at order position k has input
/// degree k and output degree k-1, so the first conditional is
/// parameter-only. Hidden degrees cycle over 1..D-1 (a hidden unit of
/// degree D could never reach any output); for D=1 they are all 1.
inline MaskSet build_masks(int dim, const std::vector<int>& hidden_sizes, const Order& order,
                           DegreeAssignment assignment, int cond_width, std::uint64_t seed) {
  if (dim < 1) throw UsageError("build_masks: dimension must be >= 1");
  if (static_cast<int>(order.size()) != dim) throw UsageError("build_masks: order length != D");
  validate_order(order);
  for (int h : hidden_sizes)
    if (h < 1) throw UsageError("build_masks: hidden sizes must be >= 1");

  MaskSet ms;
  ms.dim = dim;
  ms.cond_width = cond_width;
  ms.input_degrees.resize(static_cast<std::size_t>(dim));
  ms.output_degrees.resize(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim; ++i) {
    ms.input_degrees[static_cast<std::size_t>(i)] = order[static_cast<std::size_t>(i)];
    ms.output_degrees[static_cast<std::size_t>(i)] = order[static_cast<std::size_t>(i)] - 1;
  }

  const int max_hidden_degree = std::max(1, dim - 1);
  Rng rng = Rng(seed).child("mask-degrees");
  for (int h : hidden_sizes) {
    std::vector<int> deg(static_cast<std::size_t>(h));
    for (int j = 0; j < h; ++j) {
      if (assignment == DegreeAssignment::kSequential) {
        deg[static_cast<std::size_t>(j)] = 1 + j % max_hidden_degree;
      } else {
        deg[static_cast<std::size_t>(j)] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_hidden_degree)));
      }
    }
    ms.hidden_degrees.push_back(std::move(deg));
  }

  // input (+ labels) -> first hidden layer
  const std::vector<int>* prev = &ms.input_degrees;
  bool first = true;
  for (const auto& hdeg : ms.hidden_degrees) {
    const std::size_t extra = first ? static_cast<std::size_t>(cond_width) : 0;
    Tensor m = Tensor::zeros({prev->size() + extra, hdeg.size()});
    for (std::size_t i = 0; i < prev->size(); ++i)
      for (std::size_t j = 0; j < hdeg.size(); ++j)
        if ((*prev)[i] <= hdeg[j]) m(i, j) = 1.0;
    for (std::size_t i = prev->size(); i < prev->size() + extra; ++i)
      for (std::size_t j = 0; j < hdeg.size(); ++j) m(i, j) = 1.0;
    ms.masks.push_back(std::move(m));
    prev = &hdeg;
    first = false;
  }

  if (ms.hidden_degrees.empty()) {
    // Direct input -> output connectivity (no hidden layers): strict
    // inequality via the k-1 output degrees.
    const std::size_t extra = static_cast<std::size_t>(cond_width);
    Tensor m = Tensor::zeros({static_cast<std::size_t>(dim) + extra, static_cast<std::size_t>(dim)});
    for (int i = 0; i < dim; ++i)
      for (int o = 0; o < dim; ++o)
        if (ms.input_degrees[static_cast<std::size_t>(i)] <= ms.output_degrees[static_cast<std::size_t>(o)])
          m(static_cast<std::size_t>(i), static_cast<std::size_t>(o)) = 1.0;
    for (std::size_t i = static_cast<std::size_t>(dim); i < static_cast<std::size_t>(dim) + extra; ++i)
      for (int o = 0; o < dim; ++o) m(i, static_cast<std::size_t>(o)) = 1.0;
    ms.output_block_mask = std::move(m);
  } else {
    const auto& last = ms.hidden_degrees.back();
    Tensor m = Tensor::zeros({last.size(), static_cast<std::size_t>(dim)});
    for (std::size_t j = 0; j < last.size(); ++j)
      for (int o = 0; o < dim; ++o)
        if (last[j] <= ms.output_degrees[static_cast<std::size_t>(o)]) m(j, static_cast<std::size_t>(o)) = 1.0;
    ms.output_block_mask = std::move(m);
  }
  return ms;
}

/// Replicates the output block mask across `blocks` parameter blocks, each
/// `copies` columns per data dimension (contiguous per dimension). A
/// Gaussian head uses blocks=2, copies=1; a C-component mixture head uses
/// blocks=3, copies=C.
inline Tensor replicate_output_mask(const Tensor& block, int blocks, int copies) {
  const std::size_t h = block.rows(), d = block.cols();
  Tensor out = Tensor::zeros({h, d * static_cast<std::size_t>(copies) * static_cast<std::size_t>(blocks)});
  const std::size_t block_width = d * static_cast<std::size_t>(copies);
  for (std::size_t j = 0; j < h; ++j)
    for (std::size_t o = 0; o < d; ++o) {
      if (block(j, o) == 0.0) continue;
      for (int b = 0; b < blocks; ++b)
        for (int c = 0; c < copies; ++c)
          out(j, static_cast<std::size_t>(b) * block_width + o * static_cast<std::size_t>(copies) +
                     static_cast<std::size_t>(c)) = 1.0;
    }
  return out;
}

inline long ones_count(const Tensor& m) {
  long n = 0;
  for (double v : m.raw()) n += v != 0.0 ? 1 : 0;
  return n;
}

}  // namespace flowcast
