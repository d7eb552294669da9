// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "stkrige/error.hpp"
#include "stkrige/tensor.hpp"

namespace stkrige {

/// Pairs with |truth| below this are left out of MAPE.
inline constexpr double kMapeFloor = 1e-6;

struct LocationMetrics {
  std::size_t location = 0;  // index along the first axis of the inputs
  double rmse = 0.0, mae = 0.0, mape = 0.0;
  std::size_t count = 0;
  std::size_t mape_excluded = 0;
};

struct MetricReport {
  double rmse = 0.0;
  double mae = 0.0;
  double mape = 0.0;  // fraction, not percent; NaN when every pair is excluded
  double r2 = 0.0;    // NaN when the truth is constant
  double truth_mean = 0.0;
  std::size_t count = 0;
  std::size_t mape_excluded = 0;
  std::vector<LocationMetrics> per_location;
};

/// RMSE, MAE, MAPE and R2 over all entries of equally shaped tensors. The
/// first axis is taken as the location axis for the per-location breakdown.
inline MetricReport compute_metrics(const Tensor& prediction, const Tensor& truth) {
  if (prediction.shape() != truth.shape()) {
    throw ShapeError("compute_metrics: prediction " + shape_str(prediction.shape()) +
                     " vs truth " + shape_str(truth.shape()));
  }
  const std::size_t n = truth.numel();
  if (n == 0) throw DataError("compute_metrics: empty input");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(prediction[i]) || !std::isfinite(truth[i])) {
      throw DataError("compute_metrics: non-finite value at flat index " + std::to_string(i));
    }
  }
  const std::size_t groups = truth.rank() == 0 ? 1 : truth.dim(0);
  const std::size_t per = n / groups;

  MetricReport rep;
  rep.count = n;
  double se = 0.0, ae = 0.0, ape = 0.0, sum_y = 0.0;
  std::size_t ape_n = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    LocationMetrics lm;
    lm.location = g;
    lm.count = per;
    double gse = 0.0, gae = 0.0, gape = 0.0;
    std::size_t gape_n = 0;
    for (std::size_t k = g * per; k < (g + 1) * per; ++k) {
      const double y = truth[k], e = prediction[k] - y;
      gse += e * e;
      gae += std::abs(e);
      if (std::abs(y) < kMapeFloor) {
        ++lm.mape_excluded;
      } else {
        gape += std::abs(e) / std::abs(y);
        ++gape_n;
      }
      sum_y += y;
    }
    lm.rmse = std::sqrt(gse / static_cast<double>(per));
    lm.mae = gae / static_cast<double>(per);
    lm.mape = gape_n ? gape / static_cast<double>(gape_n)
                     : std::numeric_limits<double>::quiet_NaN();
    se += gse;
    ae += gae;
    ape += gape;
    ape_n += gape_n;
    rep.mape_excluded += lm.mape_excluded;
    rep.per_location.push_back(lm);
  }
  const double dn = static_cast<double>(n);
  rep.rmse = std::sqrt(se / dn);
  rep.mae = ae / dn;
  rep.mape = ape_n ? ape / static_cast<double>(ape_n) : std::numeric_limits<double>::quiet_NaN();
  rep.truth_mean = sum_y / dn;
  double ss_tot = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = truth[i] - rep.truth_mean;
    ss_tot += d * d;
  }
  rep.r2 = ss_tot > 0.0 ? 1.0 - se / ss_tot : std::numeric_limits<double>::quiet_NaN();
  return rep;
}

/// Inverse-distance weighting from the K nearest observed locations.
/// readings: locations x steps x channels. Returns targets x steps x channels.
/// A target at distance 0 from an observed location copies its series.
inline Tensor idw_baseline(const Tensor& readings, const Tensor& dist,
                           const std::vector<std::size_t>& observed,
                           const std::vector<std::size_t>& targets, std::size_t k) {
  if (observed.empty()) throw KrigingError("idw_baseline: no observed locations");
  if (k < 1) throw ConfigError("idw_baseline: K must be at least 1");
  if (readings.rank() != 3) throw ShapeError("idw_baseline: readings must be rank 3");
  const std::size_t T = readings.dim(1), C = readings.dim(2);
  Tensor out(Shape{targets.size(), T, C}, 0.0);
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    const std::size_t l = targets[ti];
    std::vector<std::size_t> order = observed;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double da = dist.at(a, l), db = dist.at(b, l);
      return da != db ? da < db : a < b;
    });
    order.resize(std::min(k, order.size()));
    std::vector<double> w;
    if (dist.at(order.front(), l) == 0.0) {
      order.resize(1);
      w = {1.0};
    } else {
      double total = 0.0;
      for (std::size_t i : order) {
        w.push_back(1.0 / dist.at(i, l));
        total += w.back();
      }
      for (double& v : w) v /= total;
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        double v = 0.0;
        for (std::size_t j = 0; j < order.size(); ++j) {
          v += w[j] * readings[(order[j] * T + t) * C + c];
        }
        out[(ti * T + t) * C + c] = v;
      }
    }
  }
  return out;
}

}  // namespace stkrige
