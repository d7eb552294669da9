// SPDX-License-Identifier: Apache-2.0
#pragma once

// Leave-one-out training: every observed location takes a turn as the
// kriging target, estimated from the remaining observed locations.

#include <array>
#include <chrono>
#include <cmath>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stkrige/autodiff.hpp"
#include "stkrige/config.hpp"
#include "stkrige/dataset.hpp"
#include "stkrige/error.hpp"
#include "stkrige/model.hpp"
#include "stkrige/normalizer.hpp"
#include "stkrige/optim.hpp"
#include "stkrige/parallel.hpp"
#include "stkrige/random.hpp"
#include "stkrige/relations.hpp"

namespace stkrige {

struct TrainConfig {
  ModelConfig model;               // relations, widths, K, ablation flags
  bool auto_relations = true;      // use every relation the dataset offers
  std::size_t window = 24;         // P
  std::size_t stride = 0;          // 0 means stride = P
  std::size_t batch_size = 8;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  double lr = 1e-3;
  std::array<double, 3> split{0.56, 0.14, 0.30};
  std::uint64_t seed = 42;
  std::size_t threads = 0;         // 0 = resolve from env / hardware

  std::size_t effective_stride() const { return stride == 0 ? window : stride; }

  void validate() const {
    model.validate();
    if (window < 1) throw ConfigError("window must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    double total = 0.0;
    for (double f : split) {
      if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  }

  /// Canonical text of every setting that influences results.
  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "relations=" << relation_list_str(model.relations) << ";hidden=" << model.hidden
       << ";embed=" << model.embed << ";top_k=" << model.top_k
       << ";difference=" << model.use_difference << ";beta=" << model.use_input_gate
       << ";gamma=" << model.use_forget_gate << ";context=" << model.use_context
       << ";fusion=" << fusion_name(model.fusion) << ";window=" << window
       << ";stride=" << effective_stride() << ";batch=" << batch_size
       << ";epochs=" << max_epochs << ";patience=" << patience << ";lr=" << lr
       << ";split=" << split[0] << "," << split[1] << "," << split[2] << ";seed=" << seed;
    return os.str();
  }

  std::uint64_t hash() const { return hash_string(canonical()); }
};

/// Settings understood in config files; flags with the same names override.
inline SettingTable train_setting_table(TrainConfig& c) {
  SettingTable t;
  using S = const std::string&;
  t.on("relations",
       [&](S v, S) {
         if (v == "auto") {
           c.auto_relations = true;
         } else {
           c.model.relations = parse_relation_list(v);
           c.auto_relations = false;
         }
       })
      .on("window", [&](S v, S w) { c.window = parse::size(v, w); })
      .on("stride", [&](S v, S w) { c.stride = parse::size(v, w); })
      .on("top_k", [&](S v, S w) { c.model.top_k = parse::size(v, w); })
      .on("hidden", [&](S v, S w) { c.model.hidden = parse::size(v, w); })
      .on("embed", [&](S v, S w) { c.model.embed = parse::size(v, w); })
      .on("lr", [&](S v, S w) { c.lr = parse::real(v, w); })
      .on("batch_size", [&](S v, S w) { c.batch_size = parse::size(v, w); })
      .on("max_epochs", [&](S v, S w) { c.max_epochs = parse::size(v, w); })
      .on("patience", [&](S v, S w) { c.patience = parse::size(v, w); })
      .on("split",
          [&](S v, S w) {
            auto f = parse::real_list(v, w);
            if (f.size() != 3) throw ConfigError(w + ": split needs 3 fractions");
            c.split = {f[0], f[1], f[2]};
          })
      .on("seed", [&](S v, S w) { c.seed = parse::unsigned_int(v, w); })
      .on("threads", [&](S v, S w) { c.threads = parse::size(v, w); })
      .on("difference", [&](S v, S w) { c.model.use_difference = parse::flag(v, w); })
      .on("input_gate", [&](S v, S w) { c.model.use_input_gate = parse::flag(v, w); })
      .on("forget_gate", [&](S v, S w) { c.model.use_forget_gate = parse::flag(v, w); })
      .on("context", [&](S v, S w) { c.model.use_context = parse::flag(v, w); })
      .on("fusion", [&](S v, S) { c.model.fusion = parse_fusion(v); });
  return t;
}

inline TrainConfig load_train_config(const std::string& path) {
  TrainConfig c;
  train_setting_table(c).apply(read_settings(path));
  return c;
}

/// Fills dataset-derived fields (channels, time slots, relation set).
inline TrainConfig resolve_for_dataset(TrainConfig c, const Dataset& ds) {
  c.model.channels = ds.channels();
  c.model.time_slots = ds.steps_per_day;
  const auto available = ds.available_relations();
  if (c.auto_relations) {
    c.model.relations = available;
  } else {
    for (Relation r : c.model.relations) {
      if (std::find(available.begin(), available.end(), r) == available.end()) {
        throw ConfigError("relation " + relation_name(r) +
                          " requested but the dataset lacks its input data");
      }
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRanges {
  Range train, val, test;
};

/// Contiguous chronological train/val/test ranges. Boundaries are rounded to
/// the nearest step; every part must hold at least one window.
inline SplitRanges chronological_split(std::size_t steps,
                                       const std::array<double, 3>& fractions,
                                       std::size_t window) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  const double T = static_cast<double>(steps);
  const auto b1 = static_cast<std::size_t>(std::llround(T * fractions[0]));
  const auto b2 = static_cast<std::size_t>(std::llround(T * (fractions[0] + fractions[1])));
  SplitRanges s{{0, b1}, {b1, std::max(b1, b2)}, {std::max(b1, b2), steps}};
  const char* names[3] = {"train", "validation", "test"};
  const Range* parts[3] = {&s.train, &s.val, &s.test};
  for (int i = 0; i < 3; ++i) {
    if (parts[i]->size() < window) {
      throw ConfigError(std::string(names[i]) + " split has " +
                        std::to_string(parts[i]->size()) + " steps, shorter than window " +
                        std::to_string(window));
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Instrumentation

/// Hooks into the training loop, used to audit leave-one-out hygiene.
class TrainingObserver {
 public:
  virtual ~TrainingObserver() = default;
  /// Normaliser statistics were computed from these locations and steps.
  virtual void on_normalizer_fit(const Range&, const std::vector<std::size_t>&) {}
  /// Neighbour set used whenever `held_out` is the estimation target.
  virtual void on_neighbors(std::size_t /*held_out*/, Relation, const NeighborSet&) {}
  /// A batch was evaluated; `gradient` tells whether it fed an update.
  virtual void on_batch(const Window&, const std::vector<KrigingTarget>&, bool /*gradient*/) {}
  virtual void on_warning(const std::string&) {}
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_seconds = 0.0;
};

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,wall_seconds\n";
  for (const auto& e : history) {
    os << e.epoch << ',' << csv::format_double(e.train_loss) << ','
       << csv::format_double(e.val_loss) << ',' << csv::format_double(e.wall_seconds) << '\n';
  }
  return os.str();
}

struct TrainResult {
  TrainConfig config;
  ModelParams params;  // best validation epoch
  Normalizer normalizer;
  SplitRanges split;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::vector<std::string> warnings;
};

/// Sum over rows of ||estimate - truth||^2 divided by the row count (one row
/// per (target, step)).
inline ad::Var squared_error_loss(ad::Var estimate, const Tensor& truth) {
  ad::Tape& tape = *estimate.tape;
  ad::Var diff = ad::sub(estimate, tape.constant(truth));
  ad::Var total = ad::sum_all(ad::mul(diff, diff));
  const double rows = static_cast<double>(estimate.value().dim(0));
  return ad::mul(total, tape.constant(Tensor::scalar(1.0 / rows)));
}

/**
 * Leave-one-out trainer over the observed pool of a relation graph.
 *
 * The pool of `graph` defines the training locations; the dataset's other
 * locations are never read.
 */
class Trainer {
 public:
  Trainer(TrainConfig config, const Dataset& data, const RelationGraph& graph,
          TrainingObserver* observer = nullptr)
      : cfg_(std::move(config)), data_(data), graph_(graph), observer_(observer) {
    cfg_.validate();
    if (cfg_.model.channels != data.channels() ||
        cfg_.model.time_slots != data.steps_per_day) {
      throw ConfigError("train config not resolved for this dataset");
    }
    for (Relation r : cfg_.model.relations) {
      if (!graph.has(r)) {
        throw ConfigError("relation " + relation_name(r) + " missing from relation graph");
      }
    }
    split_ = chronological_split(data.num_steps(), cfg_.split, cfg_.window);
    const auto& pool = graph.pool();
    normalizer_ = fit_normalizer(data, split_.train, pool);
    if (observer_) observer_->on_normalizer_fit(split_.train, pool);
    normalized_ = normalizer_.apply(data.readings);
    for (std::size_t i : pool) {
      try {
        KrigingTarget t = make_target(graph, cfg_.model, i);
        if (observer_) {
          for (std::size_t r = 0; r < t.neighbors.size(); ++r) {
            observer_->on_neighbors(i, cfg_.model.relations[r], t.neighbors[r]);
          }
        }
        targets_.push_back(std::move(t));
      } catch (const KrigingError& e) {
        warn("skipping held-out location " + data.network.ids[i] + ": " + e.what());
      }
    }
    if (targets_.empty()) throw KrigingError("no observed location can be held out");
  }

  const SplitRanges& split() const { return split_; }
  const Normalizer& normalizer() const { return normalizer_; }
  const std::vector<KrigingTarget>& targets() const { return targets_; }
  const Tensor& normalized() const { return normalized_; }

  /// Loss of one batch; with `grads` set, also backpropagates and stores
  /// parameter gradients aligned with params.tensors().
  double batch_loss(const ModelParams& params, const Window& window,
                    const std::vector<KrigingTarget>& batch,
                    std::vector<Tensor>* grads) const {
    if (observer_) observer_->on_batch(window, batch, grads != nullptr);
    BatchData data = assemble_batch(normalized_, graph_, cfg_.model, window, batch);
    const std::size_t P = window.length, B = batch.size(), C = cfg_.model.channels;
    Tensor truth(Shape{P * B, C}, 0.0);
    const std::size_t T = normalized_.dim(1);
    for (std::size_t t = 0; t < P; ++t) {
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          truth.at(t * B + b, c) =
              normalized_[(batch[b].location * T + window.start + t) * C + c];
        }
      }
    }
    ad::Tape tape;
    BoundParams bp = BoundParams::bind(tape, params, grads != nullptr);
    ad::Var loss = squared_error_loss(forward(tape, bp, cfg_.model, data), truth);
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (const auto& v : bp.vars) grads->push_back(tape.grad(v));
    }
    return loss.value().item();
  }

  /// Mean leave-one-out loss over non-overlapping windows of a range.
  double range_loss(const ModelParams& params, const Range& range) const {
    const auto windows = window_iter(range, cfg_.window, cfg_.window, data_.steps_per_day);
    const auto batches = batches_of(targets_);
    std::vector<double> losses(windows.size() * batches.size());
    parallel_for(losses.size(), resolve_threads(cfg_.threads), [&](std::size_t k) {
      const auto& w = windows[k / batches.size()];
      const auto& b = batches[k % batches.size()];
      losses[k] = batch_loss(params, w, b, nullptr) * static_cast<double>(b.size());
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return total / static_cast<double>(windows.size() * targets_.size());
  }

  TrainResult train() {
    TrainResult res;
    res.config = cfg_;
    res.normalizer = normalizer_;
    res.split = split_;
    res.warnings = warnings_;

    ModelParams params = ModelParams::initialize(cfg_.model, cfg_.seed);
    AdamState adam;
    adam.lr = cfg_.lr;
    const auto windows =
        window_iter(split_.train, cfg_.window, cfg_.effective_stride(), data_.steps_per_day);

    std::optional<ModelParams> best;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t stale = 0;
    const auto start = std::chrono::steady_clock::now();
    std::vector<Tensor> grads;

    for (std::size_t epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
      Rng rng(cfg_.seed ^ (0xA24BAED4963EE407ULL * epoch));
      // (window, batch) work items in a seeded order
      std::vector<std::pair<std::size_t, std::vector<KrigingTarget>>> items;
      for (std::size_t w = 0; w < windows.size(); ++w) {
        std::vector<KrigingTarget> order = targets_;
        rng.shuffle(order);
        for (auto& b : batches_of(order)) items.emplace_back(w, std::move(b));
      }
      rng.shuffle(items);

      double train_total = 0.0;
      for (const auto& [w, batch] : items) {
        const double loss = batch_loss(params, windows[w], batch, &grads);
        if (!std::isfinite(loss)) {
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                             ", window starting at step " + std::to_string(windows[w].start));
        }
        adam_step(params.tensors(), grads, adam);
        train_total += loss;
      }

      EpochRecord rec;
      rec.epoch = epoch;
      rec.train_loss = train_total / static_cast<double>(items.size());
      rec.val_loss = range_loss(params, split_.val);
      rec.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (!std::isfinite(rec.val_loss)) {
        throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
      }
      res.history.push_back(rec);

      if (rec.val_loss < best_val) {
        best_val = rec.val_loss;
        best = params;
        res.best_epoch = epoch;
        stale = 0;
      } else if (++stale > cfg_.patience) {
        break;
      }
    }
    res.params = best ? *best : params;
    res.best_val_loss = best_val;
    return res;
  }

 private:
  std::vector<std::vector<KrigingTarget>> batches_of(
      const std::vector<KrigingTarget>& order) const {
    std::vector<std::vector<KrigingTarget>> out;
    for (std::size_t i = 0; i < order.size(); i += cfg_.batch_size) {
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                       order.begin() + static_cast<std::ptrdiff_t>(
                                           std::min(order.size(), i + cfg_.batch_size)));
    }
    return out;
  }

  void warn(const std::string& msg) {
    warnings_.push_back(msg);
    if (observer_) observer_->on_warning(msg);
  }

  TrainConfig cfg_;
  const Dataset& data_;
  const RelationGraph& graph_;
  TrainingObserver* observer_;
  SplitRanges split_;
  Normalizer normalizer_;
  Tensor normalized_;
  std::vector<KrigingTarget> targets_;
  std::vector<std::string> warnings_;
};

/// Relation graph over the observed locations of a dataset.
inline RelationGraph observed_graph(const Dataset& ds, const std::vector<Relation>& relations) {
  return RelationGraph(ds.network, relations, ds.observed_indices());
}

inline TrainResult train(const TrainConfig& config, const Dataset& data,
                         const RelationGraph& graph, TrainingObserver* observer = nullptr) {
  Trainer t(config, data, graph, observer);
  return t.train();
}

}  // namespace stkrige
