// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic datasets with planted relational structure.
//
// Locations come in spatial clusters of K_true + 1 members, so every
// location has exactly K_true cluster mates. Independently of geography,
// each location also belongs to a functional class (shared POI profile) and
// a transition community (heavy mutual flows). Each (relation, group) pair
// owns a daily-periodic base signal, and a location's series is
//
//   x_l(t) = offset + sum_r mix_r * base_{r, group_r(l)}(t) + noise,
//
// so the series of any location is recoverable from the group mates under
// each relation, up to noise.

#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stkrige/config.hpp"
#include "stkrige/dataset.hpp"
#include "stkrige/error.hpp"
#include "stkrige/random.hpp"

namespace stkrige {

struct SynthSpec {
  std::size_t observed = 20;   // N
  std::size_t unobserved = 5;  // M
  std::size_t steps = 2880;    // T
  std::size_t steps_per_day = 288;
  std::size_t k_true = 4;
  double noise_std = 0.01;
  std::array<double, 3> mix{1.0, 0.0, 0.0};  // SP, FS, TP
  std::uint64_t seed = 7;

  void validate() const {
    if (observed < k_true + 1) {
      throw ConfigError("synthetic spec: N must be at least K_true + 1");
    }
    if (k_true < 1) throw ConfigError("synthetic spec: K_true must be at least 1");
    if (unobserved < 1) throw ConfigError("synthetic spec: M must be at least 1");
    if (steps < 1 || steps_per_day < 1) {
      throw ConfigError("synthetic spec: T and steps_per_day must be positive");
    }
    if (!(noise_std >= 0.0)) throw ConfigError("synthetic spec: noise_std must be >= 0");
    double total = 0.0;
    for (double m : mix) {
      if (!(m >= 0.0)) throw ConfigError("synthetic spec: mix weights must be >= 0");
      total += m;
    }
    if (!(total > 0.0)) throw ConfigError("synthetic spec: mix weights sum to zero");
  }
};

inline SynthSpec load_synth_spec(const std::string& path) {
  SynthSpec s;
  SettingTable table;
  table.on("N", [&](const std::string& v, const std::string& w) { s.observed = parse::size(v, w); })
      .on("M", [&](const std::string& v, const std::string& w) { s.unobserved = parse::size(v, w); })
      .on("T", [&](const std::string& v, const std::string& w) { s.steps = parse::size(v, w); })
      .on("steps_per_day",
          [&](const std::string& v, const std::string& w) { s.steps_per_day = parse::size(v, w); })
      .on("k_true", [&](const std::string& v, const std::string& w) { s.k_true = parse::size(v, w); })
      .on("noise_std",
          [&](const std::string& v, const std::string& w) { s.noise_std = parse::real(v, w); })
      .on("mix",
          [&](const std::string& v, const std::string& w) {
            auto m = parse::real_list(v, w);
            if (m.size() != 3) throw ConfigError(w + ": mix needs 3 weights (SP, FS, TP)");
            s.mix = {m[0], m[1], m[2]};
          })
      .on("seed", [&](const std::string& v, const std::string& w) { s.seed = parse::unsigned_int(v, w); });
  table.apply(read_settings(path));
  s.validate();
  return s;
}

/// A daily + half-daily sinusoid pair.
struct BaseSignal {
  double a1 = 0, phase1 = 0, a2 = 0, phase2 = 0;

  double at(std::size_t t, std::size_t steps_per_day) const {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(t) /
                     static_cast<double>(steps_per_day);
    return a1 * std::sin(w + phase1) + a2 * std::sin(2.0 * w + phase2);
  }
};

/// Everything needed to regenerate the noise-free series.
struct SynthTruth {
  SynthSpec spec;
  std::array<double, 3> mix{};  // normalised to sum 1
  double offset = 2.0;
  std::size_t groups = 0;       // Q, per relation
  std::vector<std::array<std::size_t, 3>> group;  // per location: SP, FS, TP
  std::vector<std::array<BaseSignal, 3>> bases;   // per group index
  std::size_t steps_per_day = 0;

  double clean(std::size_t l, std::size_t t) const {
    double v = offset;
    for (std::size_t r = 0; r < 3; ++r) {
      if (mix[r] == 0.0) continue;
      v += mix[r] * bases[group[l][r]][r].at(t, steps_per_day);
    }
    return v;
  }
};

struct SynthResult {
  Dataset dataset;
  SynthTruth truth;
};

inline SynthResult generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  constexpr std::size_t kPoiCategories = 17;
  const std::size_t G = spec.k_true + 1;
  const std::size_t L = spec.observed + spec.unobserved;
  const std::size_t Q = (L + G - 1) / G;
  Rng rng(spec.seed);

  SynthTruth truth;
  truth.spec = spec;
  truth.groups = Q;
  truth.steps_per_day = spec.steps_per_day;
  const double total = spec.mix[0] + spec.mix[1] + spec.mix[2];
  for (std::size_t r = 0; r < 3; ++r) truth.mix[r] = spec.mix[r] / total;

  // cluster centres with a minimum separation
  const double side = std::max(10.0, 3.0 * std::sqrt(static_cast<double>(Q)));
  const double min_sep = 2.0, radius = 0.3;
  std::vector<double> cx, cy;
  std::size_t attempts = 0;
  while (cx.size() < Q) {
    if (++attempts > 100000) throw ConfigError("synthetic spec: cannot place clusters");
    const double x = rng.uniform(0.0, side), y = rng.uniform(0.0, side);
    bool ok = true;
    for (std::size_t c = 0; c < cx.size() && ok; ++c) {
      ok = std::hypot(x - cx[c], y - cy[c]) >= min_sep;
    }
    if (ok) {
      cx.push_back(x);
      cy.push_back(y);
    }
  }

  Dataset ds;
  ds.steps_per_day = spec.steps_per_day;
  ds.channel_names = {"value"};
  ds.source = "synthetic:seed=" + std::to_string(spec.seed);
  auto& net = ds.network;
  net.dist = Tensor(Shape{L, L}, 0.0);
  ds.observed.assign(L, true);
  truth.group.resize(L);
  for (std::size_t p = 0; p < L; ++p) {
    const std::size_t c = p / G, m = p % G;
    char id[32];
    std::snprintf(id, sizeof(id), "L%03zu", p);
    net.ids.push_back(id);
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double rad = radius * std::sqrt(rng.uniform());
    net.x.push_back(cx[c] + rad * std::cos(ang));
    net.y.push_back(cy[c] + rad * std::sin(ang));
    truth.group[p] = {c, (c + m) % Q, (c + 2 * m) % Q};
  }
  for (std::size_t j = 0; j < spec.unobserved; ++j) {
    const std::size_t p = (j % Q) * G + j / Q;
    if (p >= L) throw ConfigError("synthetic spec: infeasible unobserved placement");
    ds.observed[p] = false;
  }
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      net.dist.at(i, j) = i == j ? 0.0 : std::hypot(net.x[i] - net.x[j], net.y[i] - net.y[j]);
    }
  }

  truth.bases.resize(Q);
  for (std::size_t g = 0; g < Q; ++g) {
    for (std::size_t r = 0; r < 3; ++r) {
      BaseSignal& b = truth.bases[g][r];
      b.a1 = rng.uniform(0.5, 1.0);
      b.phase1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
      b.a2 = rng.uniform(0.2, 0.5);
      b.phase2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  }

  const std::size_t T = spec.steps;
  ds.readings = Tensor(Shape{L, T, 1}, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t t = 0; t < T; ++t) {
      ds.readings[l * T + t] = truth.clean(l, t) + spec.noise_std * rng.normal();
    }
  }

  if (truth.mix[1] > 0.0) {
    std::vector<std::vector<double>> proto(Q, std::vector<double>(kPoiCategories));
    for (auto& p : proto) {
      for (double& v : p) v = rng.uniform(0.0, 20.0);
    }
    Tensor poi(Shape{L, kPoiCategories}, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t k = 0; k < kPoiCategories; ++k) {
        poi.at(l, k) = std::round(proto[truth.group[l][1]][k] * rng.uniform(0.9, 1.1));
      }
    }
    net.poi = std::move(poi);
  }

  if (truth.mix[2] > 0.0) {
    const std::size_t B = spec.steps_per_day;
    Tensor flows(Shape{B, L, L}, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const double profile =
          1.0 + 0.5 * std::sin(2.0 * std::numbers::pi * static_cast<double>(b) /
                               static_cast<double>(B));
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
          if (i == j) continue;
          double count = 0.0;
          if (truth.group[i][2] == truth.group[j][2]) {
            count = std::round(10.0 * profile * rng.uniform(0.5, 1.5));
          } else if (rng.uniform() < 0.01) {
            count = 1.0;
          }
          flows[(b * L + i) * L + j] = count;
        }
      }
    }
    net.flow_buckets = B;
    net.flows = std::move(flows);
  }

  ds.validate();
  ds.checksum = ds.compute_checksum();
  return {std::move(ds), std::move(truth)};
}

/// RMSE of the noise-free planted series against the data at the given
/// locations: the error of a perfect estimator.
inline double oracle_rmse(const Dataset& ds, const SynthTruth& truth,
                          const std::vector<std::size_t>& locations, const Range& range) {
  double ss = 0.0;
  std::size_t n = 0;
  for (auto l : locations) {
    for (std::size_t t = range.begin; t < range.end; ++t) {
      const double d = ds.value(l, t, 0) - truth.clean(l, t);
      ss += d * d;
      ++n;
    }
  }
  if (n == 0) throw DataError("oracle_rmse: empty selection");
  return std::sqrt(ss / static_cast<double>(n));
}

inline nlohmann::json describe(const SynthTruth& truth, const Dataset& ds) {
  using nlohmann::json;
  const auto& s = truth.spec;
  json j;
  j["spec"] = {{"N", s.observed},       {"M", s.unobserved},
               {"T", s.steps},          {"steps_per_day", s.steps_per_day},
               {"k_true", s.k_true},    {"noise_std", s.noise_std},
               {"mix", s.mix},          {"seed", s.seed}};
  j["mix"] = truth.mix;
  j["offset"] = truth.offset;
  j["groups_per_relation"] = truth.groups;
  json locs = json::array();
  for (std::size_t l = 0; l < ds.num_locations(); ++l) {
    locs.push_back({{"id", ds.network.ids[l]},
                    {"observed", static_cast<bool>(ds.observed[l])},
                    {"SP", truth.group[l][0]},
                    {"FS", truth.group[l][1]},
                    {"TP", truth.group[l][2]}});
  }
  j["locations"] = locs;
  json bases = json::array();
  const char* names[3] = {"SP", "FS", "TP"};
  for (std::size_t g = 0; g < truth.bases.size(); ++g) {
    for (std::size_t r = 0; r < 3; ++r) {
      const auto& b = truth.bases[g][r];
      bases.push_back({{"relation", names[r]}, {"group", g}, {"a1", b.a1},
                       {"phase1", b.phase1}, {"a2", b.a2}, {"phase2", b.phase2}});
    }
  }
  j["bases"] = bases;
  j["oracle_rmse_unobserved"] =
      oracle_rmse(ds, truth, ds.unobserved_indices(), Range{0, ds.num_steps()});
  return j;
}

/// Writes the dataset directory plus truth.json.
inline void write_synthetic(const SynthResult& res, const std::string& dir) {
  write_dataset(res.dataset, dir);
  csv::write_file(dir + "/truth.json", describe(res.truth, res.dataset).dump(2) + "\n");
}

}  // namespace stkrige
