// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stkrige/error.hpp"
#include "stkrige/random.hpp"
#include "stkrige/tensor.hpp"

namespace stkrige {

enum class InitScheme { GlorotUniform, Zeros };

inline InitScheme parse_init_scheme(const std::string& s) {
  if (s == "uniform-glorot" || s == "glorot") return InitScheme::GlorotUniform;
  if (s == "zeros") return InitScheme::Zeros;
  throw ConfigError("unsupported init scheme '" + s + "'");
}

/// Glorot bound for a shape: sqrt(6 / (fan_in + fan_out)). Matrices use
/// (rows, cols); vectors use their length for both fans.
inline double glorot_bound(const Shape& shape) {
  double fan_in = 1, fan_out = 1;
  if (shape.size() == 1) {
    fan_in = fan_out = static_cast<double>(shape[0]);
  } else if (shape.size() >= 2) {
    fan_in = static_cast<double>(shape[shape.size() - 2]);
    fan_out = static_cast<double>(shape.back());
  }
  return std::sqrt(6.0 / (fan_in + fan_out));
}

inline Tensor init_params(const Shape& shape, InitScheme scheme,
                          std::uint64_t seed) {
  Tensor t(shape, 0.0);
  if (scheme == InitScheme::Zeros) return t;
  const double a = glorot_bound(shape);
  Rng rng(seed);
  for (double& v : t.storage()) v = rng.uniform(-a, a);
  return t;
}

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Moments are allocated on the first call.
inline void adam_step(std::vector<Tensor>& params,
                      const std::vector<Tensor>& grads, AdamState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) +
                     " params vs " + std::to_string(grads.size()) + " grads");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.shape(), 0.0);
      state.second_moment.emplace_back(p.shape(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks a different parameter set");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != grads[k].shape() ||
        params[k].shape() != state.first_moment[k].shape()) {
      throw ShapeError("adam_step: shape mismatch at parameter " +
                       std::to_string(k));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace stkrige
