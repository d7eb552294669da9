// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stkrige/dataset.hpp"
#include "stkrige/error.hpp"

namespace stkrige {

/// Per-channel Z-score statistics.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t channels() const { return mean.size(); }
  double apply(double v, std::size_t c) const { return (v - mean[c]) / std[c]; }
  double invert(double z, std::size_t c) const { return z * std[c] + mean[c]; }

  /// Normalised copy of a locations x steps x channels tensor (NaN kept).
  Tensor apply(const Tensor& readings) const {
    Tensor out = readings;
    const std::size_t C = readings.dim(2);
    if (C != channels()) throw ShapeError("normalizer channel count mismatch");
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = apply(out[i], i % C);
    return out;
  }
};

/// Fits mean and population standard deviation per channel over the given
/// locations and time range.
inline Normalizer fit_normalizer(const Dataset& ds, const Range& range,
                                 const std::vector<std::size_t>& locations) {
  const std::size_t C = ds.channels();
  if (locations.empty() || range.size() == 0) {
    throw DataError("fit_normalizer: no readings to fit");
  }
  Normalizer n;
  n.mean.assign(C, 0.0);
  n.std.assign(C, 0.0);
  const double count = static_cast<double>(locations.size() * range.size());
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (auto l : locations) {
      for (std::size_t t = range.begin; t < range.end; ++t) s += ds.value(l, t, c);
    }
    const double mean = s / count;
    double ss = 0.0;
    for (auto l : locations) {
      for (std::size_t t = range.begin; t < range.end; ++t) {
        const double d = ds.value(l, t, c) - mean;
        ss += d * d;
      }
    }
    n.mean[c] = mean;
    n.std[c] = std::sqrt(ss / count);
    if (!std::isfinite(n.mean[c]) || !(n.std[c] > 0.0)) {
      throw DataError("fit_normalizer: channel " + std::to_string(c) +
                      " has zero variance or missing values");
    }
  }
  return n;
}

}  // namespace stkrige
