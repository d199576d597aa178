#pragma once

#include <cmath>

#include "flowcast/tensor.hpp"

namespace flowcast {

inline constexpr double kLog2Pi = 1.8378770664093453;

/// Sum of independent standard-normal log densities over all elements.
inline double standard_normal_logpdf(const Tensor& x) {
  double s = 0.0;
  for (double v : x.raw()) s += -0.5 * kLog2Pi - 0.5 * v * v;
  return s;
}

/// log N(x; mean, var).
inline double normal_logpdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * kLog2Pi - 0.5 * std::log(var) - 0.5 * d * d / var;
}

}  // namespace flowcast
