// SPDX-License-Identifier: Apache-2.0
#pragma once

// Test-range evaluation and experiment grids (mask ratio, ablations, sweeps).

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stkrige/dataset.hpp"
#include "stkrige/metrics.hpp"
#include "stkrige/model.hpp"
#include "stkrige/parallel.hpp"
#include "stkrige/random.hpp"
#include "stkrige/training.hpp"

namespace stkrige {

/// Estimated series of one location over a range, stitched from
/// non-overlapping windows.
struct SeriesEstimate {
  Tensor values;   // steps x channels, raw units
  Tensor weights;  // steps x |R| attention weights (attention fusion only)
};

inline SeriesEstimate krige_series(const Kriger& kriger, std::size_t location,
                                   const Range& range, std::size_t window,
                                   std::size_t steps_per_day,
                                   const std::vector<std::size_t>& exclude = {},
                                   bool with_weights = false) {
  const auto& cfg = kriger.params().config();
  const std::size_t C = cfg.channels, R = cfg.relations.size();
  const bool attention = with_weights && cfg.fusion == Fusion::Attention;
  SeriesEstimate out{Tensor(Shape{range.size(), C}, 0.0),
                     attention ? Tensor(Shape{range.size(), R}, 0.0) : Tensor()};
  for (const auto& cw : covering_windows(range, window, steps_per_day)) {
    const auto res = kriger.krige(location, cw.window, exclude, attention);
    for (std::size_t t = cw.first_new; t < window; ++t) {
      const std::size_t row = cw.window.start + t - range.begin;
      for (std::size_t c = 0; c < C; ++c) out.values.at(row, c) = res.estimate.at(t, c);
      if (attention) {
        for (std::size_t r = 0; r < R; ++r) out.weights.at(row, r) = res.trace.weights.at(t, r);
      }
    }
  }
  return out;
}

struct EvalResult {
  std::vector<std::size_t> targets;
  Range range;
  Tensor prediction;  // targets x steps x channels
  Tensor truth;
  MetricReport report;
};

/// Ground-truth series of the targets over a range.
inline Tensor truth_of(const Dataset& ds, const std::vector<std::size_t>& targets,
                       const Range& range) {
  const std::size_t C = ds.channels();
  Tensor out(Shape{targets.size(), range.size(), C}, 0.0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t t = 0; t < range.size(); ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        const double v = ds.value(targets[i], range.begin + t, c);
        if (!std::isfinite(v)) {
          throw DataError("location '" + ds.network.ids[targets[i]] +
                          "' has no ground truth at t=" + std::to_string(range.begin + t));
        }
        out[(i * range.size() + t) * C + c] = v;
      }
    }
  }
  return out;
}

/// Kriges every target over the range and scores it against ground truth.
inline EvalResult evaluate_model(const ModelParams& params, const Normalizer& norm,
                                 const Dataset& ds, const RelationGraph& graph,
                                 const Range& range, const std::vector<std::size_t>& targets,
                                 std::size_t window, std::size_t threads) {
  if (targets.empty()) throw ConfigError("evaluate_model: no targets");
  Kriger kriger(params, norm, ds, graph);
  EvalResult ev;
  ev.targets = targets;
  ev.range = range;
  ev.truth = truth_of(ds, targets, range);
  const std::size_t C = ds.channels(), S = range.size();
  ev.prediction = Tensor(Shape{targets.size(), S, C}, 0.0);
  parallel_for(targets.size(), resolve_threads(threads), [&](std::size_t i) {
    const auto est = krige_series(kriger, targets[i], range, window, ds.steps_per_day);
    std::copy(est.values.data().begin(), est.values.data().end(),
              ev.prediction.data().begin() + static_cast<std::ptrdiff_t>(i * S * C));
  });
  ev.report = compute_metrics(ev.prediction, ev.truth);
  return ev;
}

/// IDW scores on the same targets and range, with K nearest observed.
inline MetricReport idw_report(const Dataset& ds, const std::vector<std::size_t>& pool,
                               const std::vector<std::size_t>& targets, const Range& range,
                               std::size_t k) {
  const Tensor all = idw_baseline(ds.readings, ds.network.dist, pool, targets, k);
  const std::size_t T = ds.num_steps(), C = ds.channels();
  Tensor pred(Shape{targets.size(), range.size(), C}, 0.0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t t = 0; t < range.size(); ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        pred[(i * range.size() + t) * C + c] = all[(i * T + range.begin + t) * C + c];
      }
    }
  }
  return compute_metrics(pred, truth_of(ds, targets, range));
}

struct RunOutcome {
  TrainResult trained;
  EvalResult eval;
};

/// Trains on the given observed pool and evaluates on the unobserved
/// locations over the test range.
inline RunOutcome train_and_evaluate(const TrainConfig& config, const Dataset& ds,
                                     const std::vector<std::size_t>& pool,
                                     TrainingObserver* observer = nullptr) {
  RelationGraph graph(ds.network, config.model.relations, pool);
  RunOutcome out;
  out.trained = train(config, ds, graph, observer);
  out.eval = evaluate_model(out.trained.params, out.trained.normalizer, ds, graph,
                            out.trained.split.test, ds.unobserved_indices(), config.window,
                            config.threads);
  return out;
}

// ---------------------------------------------------------------------------
// Experiment grids

struct ExperimentPoint {
  std::string label;
  double eta = 0.0;
  std::size_t repetition = 0;
  std::uint64_t config_hash = 0;
  MetricReport report;
};

/// Seeded survivor subset of the observed locations after dropping a
/// fraction eta of them.
inline std::vector<std::size_t> mask_survivors(const Dataset& ds, double eta,
                                               std::uint64_t seed) {
  if (!(eta >= 0.0 && eta < 1.0)) throw ConfigError("mask ratio must lie in [0, 1)");
  std::vector<std::size_t> obs = ds.observed_indices();
  const auto keep = static_cast<std::size_t>(
      std::llround((1.0 - eta) * static_cast<double>(obs.size())));
  if (keep < 2) {
    throw ConfigError("mask ratio " + std::to_string(eta) + " leaves " + std::to_string(keep) +
                      " observed locations, at least 2 required");
  }
  Rng rng(seed);
  rng.shuffle(obs);
  obs.resize(keep);
  std::sort(obs.begin(), obs.end());
  return obs;
}

inline std::vector<ExperimentPoint> mask_ratio_experiment(const TrainConfig& config,
                                                          const Dataset& ds,
                                                          const std::vector<double>& ratios,
                                                          std::uint64_t seed) {
  if (ratios.empty()) throw ConfigError("mask ratio grid is empty");
  for (double eta : ratios) mask_survivors(ds, eta, seed);  // validate up front
  std::vector<ExperimentPoint> out;
  for (double eta : ratios) {
    auto run = train_and_evaluate(config, ds, mask_survivors(ds, eta, seed));
    std::ostringstream label;
    label << "mask=" << eta;
    out.push_back({label.str(), eta, 0, config.hash(), run.eval.report});
  }
  return out;
}

/// A named modification of the model configuration.
struct Variant {
  std::string label;
  std::function<void(ModelConfig&)> apply;
};

inline Variant parse_variant(const std::string& token) {
  auto v = [&](std::function<void(ModelConfig&)> f) { return Variant{token, std::move(f)}; };
  if (token == "full") return v([](ModelConfig&) {});
  if (token == "no-difference" || token == "difference=off") {
    return v([](ModelConfig& m) { m.use_difference = false; });
  }
  if (token == "no-beta" || token == "input_gate=off") {
    return v([](ModelConfig& m) { m.use_input_gate = false; });
  }
  if (token == "no-gamma" || token == "forget_gate=off") {
    return v([](ModelConfig& m) { m.use_forget_gate = false; });
  }
  if (token == "no-gates") {
    return v([](ModelConfig& m) {
      m.use_input_gate = false;
      m.use_forget_gate = false;
    });
  }
  if (token == "no-context" || token == "context=off") {
    return v([](ModelConfig& m) { m.use_context = false; });
  }
  if (token.rfind("fusion=", 0) == 0) {
    const Fusion f = parse_fusion(token.substr(7));
    return v([f](ModelConfig& m) { m.fusion = f; });
  }
  throw ConfigError("unknown ablation '" + token +
                    "' (full, no-difference, no-beta, no-gamma, no-gates, no-context, "
                    "fusion=attention|concat|add)");
}

inline std::vector<Variant> parse_variants(const std::string& list) {
  std::vector<Variant> out;
  for (const auto& tok : csv::split(list, ',')) {
    if (tok.empty()) continue;
    if (tok == "all") {
      for (const char* t : {"no-difference", "no-beta", "no-gamma", "no-gates", "no-context",
                            "fusion=concat", "fusion=add"}) {
        out.push_back(parse_variant(t));
      }
    } else {
      out.push_back(parse_variant(tok));
    }
  }
  if (out.empty()) throw ConfigError("empty ablation list");
  return out;
}

/// Trains and evaluates each variant under the same seed and split.
inline std::vector<ExperimentPoint> ablation_run(
    const TrainConfig& base, const Dataset& ds, const std::vector<Variant>& variants,
    const std::function<void(const std::string&)>& warn = {}) {
  std::vector<ExperimentPoint> out;
  for (const auto& var : variants) {
    TrainConfig cfg = base;
    var.apply(cfg.model);
    if (cfg.model.fusion != Fusion::Attention && cfg.model.relations.size() == 1 && warn) {
      warn("fusion=" + fusion_name(cfg.model.fusion) +
           " with a single relation is equivalent to attention fusion");
    }
    auto run = train_and_evaluate(cfg, ds, ds.observed_indices());
    out.push_back({var.label, 0.0, 0, cfg.hash(), run.eval.report});
  }
  return out;
}

/// Parameter sweep text "K=1,3,5", "P=12,24" or "D=8,16".
struct Sweep {
  std::string parameter;
  std::vector<std::size_t> values;
};

inline Sweep parse_sweep(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("sweep must look like K=1,3,5");
  Sweep s;
  s.parameter = text.substr(0, eq);
  if (s.parameter != "K" && s.parameter != "P" && s.parameter != "D") {
    throw ConfigError("sweep parameter must be K, P or D");
  }
  for (const auto& v : csv::split(text.substr(eq + 1), ',')) {
    if (!v.empty()) s.values.push_back(parse::size(v, "sweep"));
  }
  if (s.values.empty()) throw ConfigError("sweep grid is empty");
  return s;
}

inline std::vector<ExperimentPoint> sweep_run(const TrainConfig& base, const Dataset& ds,
                                              const Sweep& sweep) {
  std::vector<ExperimentPoint> out;
  for (std::size_t v : sweep.values) {
    TrainConfig cfg = base;
    if (sweep.parameter == "K") cfg.model.top_k = v;
    if (sweep.parameter == "P") cfg.window = v;
    if (sweep.parameter == "D") cfg.model.hidden = v;
    cfg.validate();
    auto run = train_and_evaluate(cfg, ds, ds.observed_indices());
    out.push_back({sweep.parameter + "=" + std::to_string(v), 0.0, 0, cfg.hash(),
                   run.eval.report});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string report_csv(const std::vector<ExperimentPoint>& points) {
  using csv::format_double;
  std::ostringstream os;
  os << "config_hash,eta,rmse,mae,mape,r2,excluded_count,label\n";
  for (const auto& p : points) {
    os << hex64(p.config_hash) << ',' << format_double(p.eta) << ','
       << format_double(p.report.rmse) << ',' << format_double(p.report.mae) << ','
       << format_double(p.report.mape) << ',' << format_double(p.report.r2) << ','
       << p.report.mape_excluded << ',' << p.label << '\n';
  }
  return os.str();
}

inline nlohmann::json metric_json(const MetricReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  nlohmann::json per = nlohmann::json::array();
  for (const auto& l : r.per_location) {
    per.push_back({{"location", l.location}, {"rmse", num(l.rmse)}, {"mae", num(l.mae)},
                   {"mape", num(l.mape)}, {"count", l.count}});
  }
  return {{"rmse", num(r.rmse)},   {"mae", num(r.mae)},
          {"mape", num(r.mape)},   {"r2", num(r.r2)},
          {"truth_mean", num(r.truth_mean)}, {"count", r.count},
          {"excluded_count", r.mape_excluded}, {"per_location", per}};
}

inline std::string report_json(const std::vector<ExperimentPoint>& points) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : points) {
    nlohmann::json j = metric_json(p.report);
    j["label"] = p.label;
    j["eta"] = p.eta;
    j["config_hash"] = hex64(p.config_hash);
    arr.push_back(j);
  }
  return nlohmann::json{{"points", arr}}.dump(2) + "\n";
}

}  // namespace stkrige
