// SPDX-License-Identifier: Apache-2.0
#pragma once

// Three-stage spatio-temporal kriging network.
//
//   1. spatial aggregation  - project each neighbour's readings, aggregate
//      them with normalised relation weights (similarity term s), measure
//      the weighted discrepancy to the neighbours (bias term delta) and
//      combine both into an adjusted representation.
//   2. temporal modelling   - one GRU per relation, fed with the time-of-day
//      embedding, whose input and previous state are scaled by gates derived
//      from delta.
//   3. multi-relation fusion - attention over the per-relation GRU states at
//      every step, then a two-layer readout.
//
// All matrices use the row convention: a batch of vectors is a matrix with
// one vector per row and a linear layer computes X W + b. Rows of every
// per-step matrix are ordered (t, b): row t * batch + b.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stkrige/autodiff.hpp"
#include "stkrige/dataset.hpp"
#include "stkrige/error.hpp"
#include "stkrige/normalizer.hpp"
#include "stkrige/optim.hpp"
#include "stkrige/relations.hpp"
#include "stkrige/tensor.hpp"

namespace stkrige {

enum class Fusion { Attention, Concat, Add };

inline std::string fusion_name(Fusion f) {
  switch (f) {
    case Fusion::Attention: return "attention";
    case Fusion::Concat: return "concat";
    case Fusion::Add: return "add";
  }
  return "?";
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "attention") return Fusion::Attention;
  if (s == "concat") return Fusion::Concat;
  if (s == "add") return Fusion::Add;
  throw ConfigError("unknown fusion '" + s + "' (attention, concat or add)");
}

struct ModelConfig {
  std::vector<Relation> relations{Relation::SP};
  std::size_t channels = 1;
  std::size_t hidden = 64;      // D
  std::size_t embed = 8;        // width of the time-of-day embedding
  std::size_t time_slots = 288; // steps per day
  std::size_t top_k = 15;
  bool use_difference = true;
  bool use_input_gate = true;
  bool use_forget_gate = true;
  bool use_context = true;
  Fusion fusion = Fusion::Attention;

  void validate() const {
    if (relations.empty()) throw ConfigError("relation set must not be empty");
    if (channels < 1 || hidden < 1 || embed < 1 || time_slots < 1 || top_k < 1) {
      throw ConfigError("model dimensions must be positive");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters

namespace detail {
inline std::string rel_param(Relation r, const char* name) {
  return relation_name(r) + "." + name;
}
}  // namespace detail

struct ParamSpec {
  std::string name;
  Shape shape;
  InitScheme scheme;
};

/// Names, shapes and initialisers of every learnable tensor for a config.
inline std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.channels, D = cfg.hidden, E = cfg.embed;
  const std::size_t gate_in = 2 * D + E;
  const auto G = InitScheme::GlorotUniform;
  const auto Z = InitScheme::Zeros;
  std::vector<ParamSpec> out;
  for (Relation r : cfg.relations) {
    auto add = [&](const char* n, Shape s, InitScheme sc) {
      out.push_back({detail::rel_param(r, n), std::move(s), sc});
    };
    add("proj_w", {C, D}, G);
    add("proj_b", {D}, Z);
    add("sim_w", {D, D}, G);
    add("sim_b", {D}, Z);
    add("diff_w", {D, D}, G);
    add("diff_b", {D}, Z);
    add("adj_w", {D, D}, G);
    add("gru_reset_w", {gate_in, D}, G);
    add("gru_reset_b", {D}, Z);
    add("gru_update_w", {gate_in, D}, G);
    add("gru_update_b", {D}, Z);
    add("gru_cand_w", {gate_in, D}, G);
    add("gru_cand_b", {D}, Z);
    add("in_gate_w", {D, D}, G);
    add("in_gate_b", {D}, Z);
    add("forget_gate_w", {D, D}, G);
    add("forget_gate_b", {D}, Z);
  }
  out.push_back({"time_embed", {cfg.time_slots, E}, G});
  out.push_back({"att_w", {D, D}, G});
  out.push_back({"att_b", {D}, Z});
  out.push_back({"att_v", {D, 1}, G});
  if (cfg.fusion == Fusion::Concat) {
    out.push_back({"fuse_w", {cfg.relations.size() * D, D}, G});
    out.push_back({"fuse_b", {D}, Z});
  }
  out.push_back({"out1_w", {D, D}, G});
  out.push_back({"out1_b", {D}, Z});
  out.push_back({"out2_w", {D, C}, G});
  out.push_back({"out2_b", {C}, Z});
  return out;
}

/// Every learnable tensor of the network, in a fixed order.
class ModelParams {
 public:
  ModelParams() = default;

  static ModelParams initialize(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p;
    p.config_ = cfg;
    for (const auto& spec : parameter_layout(cfg)) {
      const std::uint64_t s = hash_string(spec.name, seed * 0x9E3779B97F4A7C15ULL + 1);
      p.names_.push_back(spec.name);
      p.tensors_.push_back(init_params(spec.shape, spec.scheme, s));
    }
    return p;
  }

  /// Assembles params from named tensors; names and shapes must match the
  /// layout of the config exactly.
  static ModelParams from_tensors(const ModelConfig& cfg,
                                  const std::map<std::string, Tensor>& named) {
    ModelParams p;
    p.config_ = cfg;
    const auto layout = parameter_layout(cfg);
    if (named.size() != layout.size()) {
      throw DataError("parameter set has " + std::to_string(named.size()) +
                      " tensors, config requires " + std::to_string(layout.size()));
    }
    for (const auto& spec : layout) {
      auto it = named.find(spec.name);
      if (it == named.end()) throw DataError("missing parameter '" + spec.name + "'");
      if (it->second.shape() != spec.shape) {
        throw DataError("parameter '" + spec.name + "' has shape " +
                        shape_str(it->second.shape()) + ", expected " +
                        shape_str(spec.shape));
      }
      if (!it->second.all_finite()) {
        throw NumericError("parameter '" + spec.name + "' is not finite");
      }
      p.names_.push_back(spec.name);
      p.tensors_.push_back(it->second);
    }
    return p;
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>& tensors() { return tensors_; }

  std::size_t index_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw ConfigError("no parameter named '" + name + "'");
    return static_cast<std::size_t>(it - names_.begin());
  }
  const Tensor& get(const std::string& name) const { return tensors_[index_of(name)]; }
  Tensor& get(const std::string& name) { return tensors_[index_of(name)]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      h = hash_string(names_[i], h);
      h = hash_doubles(tensors_[i].data(), h);
    }
    return h;
  }

  bool identical(const ModelParams& o) const {
    if (names_ != o.names_ || !(config_ == o.config_)) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (!tensors_[i].identical(o.tensors_[i])) return false;
    }
    return true;
  }

 private:
  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

// ---------------------------------------------------------------------------
// Stage functions. Each works on tape variables so the same code serves
// training (differentiable leaves) and inference (constants).

namespace stage {

using ad::Var;

/// Neighbour-row to output-row map with normalised aggregation weights.
struct AggregationPlan {
  std::vector<std::size_t> segment;
  std::vector<double> weight;
  std::size_t out_rows = 0;

  /// Normalises raw relevance weights within each output row. A row whose
  /// weights sum to zero cannot be aggregated.
  static AggregationPlan normalized(std::vector<std::size_t> segment,
                                    const std::vector<double>& raw,
                                    std::size_t out_rows) {
    if (segment.size() != raw.size()) {
      throw ShapeError("aggregation plan: segment/weight length mismatch");
    }
    std::vector<double> total(out_rows, 0.0);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (segment[i] >= out_rows) throw ShapeError("aggregation plan: row out of range");
      if (!(raw[i] >= 0.0)) throw KrigingError("relation weights must be non-negative");
      total[segment[i]] += raw[i];
    }
    for (std::size_t r = 0; r < out_rows; ++r) {
      if (!(total[r] > 0.0)) {
        throw KrigingError("relation weights over the neighbour set sum to zero (row " +
                           std::to_string(r) + ")");
      }
    }
    AggregationPlan p;
    p.weight.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) p.weight[i] = raw[i] / total[segment[i]];
    p.segment = std::move(segment);
    p.out_rows = out_rows;
    return p;
  }
};

/// h = relu(x W + b), one shared layer for all neighbours and steps.
inline Var project_neighbors(Var inputs, Var w, Var b) {
  return ad::relu(ad::add_row_vector(ad::matmul(inputs, w), b));
}

/// s = relu(sum_i a_i h_i W_s + b_s) with a_i the normalised weights.
inline Var aggregate_similarity(Var projected, const AggregationPlan& plan, Var w,
                                Var b) {
  Var mixed = ad::segment_sum(projected, plan.segment, plan.weight, plan.out_rows);
  return ad::relu(ad::add_row_vector(ad::matmul(mixed, w), b));
}

/// delta = tanh(sum_i a_i |s - h_i| W_delta + b_delta).
inline Var aggregate_difference(Var similarity, Var projected,
                                const AggregationPlan& plan, Var w, Var b) {
  Var spread = ad::gather_rows(similarity, plan.segment);
  Var gap = ad::abs(ad::sub(spread, projected));
  Var mixed = ad::segment_sum(gap, plan.segment, plan.weight, plan.out_rows);
  return ad::tanh(ad::add_row_vector(ad::matmul(mixed, w), b));
}

/// s~ = relu(s W + delta); there is no separate bias term.
inline Var adjust_representation(Var similarity, Var bias, Var w) {
  return ad::relu(ad::add(ad::matmul(similarity, w), bias));
}

/// 1 / exp(max(0, delta W + b)), elementwise in (0, 1].
inline Var relation_gate(Var bias, Var w, Var b) {
  return ad::exp(ad::neg(ad::max_zero(ad::add_row_vector(ad::matmul(bias, w), b))));
}

/// Input gate beta from the bias at the same step.
inline Var relation_input_gate(Var bias, Var w, Var b) {
  return relation_gate(bias, w, b);
}

/// Forget gate gamma from the bias of the previous step.
inline Var relation_forget_gate(Var previous_bias, Var w, Var b) {
  return relation_gate(previous_bias, w, b);
}

struct GruWeights {
  Var reset_w, reset_b;
  Var update_w, update_b;
  Var cand_w, cand_b;
};

struct GruStep {
  Var reset;      // g
  Var update;     // u
  Var candidate;  // z~
  Var state;      // z
};

/// One GRU step with context features:
///   g  = sigmoid([x, e, z] W_g + b_g)
///   u  = sigmoid([x, e, z] W_u + b_u)
///   z~ = tanh([g * z, x, e] W_z + b_z)
///   z' = (1 - u) * z + u * z~
inline GruStep gru_cell(Var input, Var context, Var previous, const GruWeights& w) {
  ad::Tape& tape = *input.tape;
  Var joint = ad::concat({input, context, previous});
  Var g = ad::sigmoid(ad::add_row_vector(ad::matmul(joint, w.reset_w), w.reset_b));
  Var u = ad::sigmoid(ad::add_row_vector(ad::matmul(joint, w.update_w), w.update_b));
  Var cand_in = ad::concat({ad::mul(g, previous), input, context});
  Var cand = ad::tanh(ad::add_row_vector(ad::matmul(cand_in, w.cand_w), w.cand_b));
  Var ones = tape.constant(Tensor(u.shape(), 1.0));
  Var state = ad::add(ad::mul(ad::sub(ones, u), previous), ad::mul(u, cand));
  return {g, u, cand, state};
}

struct GateWeights {
  Var input_w, input_b;
  Var forget_w, forget_b;
  bool use_input = true;
  bool use_forget = true;
};

struct RelationGruOutput {
  Var states;                  // (steps * batch) x D
  std::vector<GruStep> steps;
  std::optional<Var> input_gate;   // (steps * batch) x D
  std::optional<Var> forget_gate;  // gate computed from every step's bias
};

/// Runs z_t = GRU(beta_t * s~_t, e_t, gamma_t * z_{t-1}) over the window
/// with z_0 = 0 and gamma_1 = 1.
inline RelationGruOutput relation_gru_forward(Var adjusted, Var bias, Var context,
                                              std::size_t steps, std::size_t batch,
                                              const GruWeights& gru,
                                              const GateWeights& gates) {
  ad::Tape& tape = *adjusted.tape;
  const Tensor& a = adjusted.value();
  if (a.rank() != 2 || a.dim(0) != steps * batch) {
    throw ShapeError("relation_gru_forward: expected " +
                     std::to_string(steps * batch) + " rows");
  }
  if (bias.value().shape() != a.shape() || context.value().dim(0) != a.dim(0)) {
    throw ShapeError("relation_gru_forward: sequence lengths differ");
  }
  const std::size_t D = a.dim(1);
  RelationGruOutput out;
  Var input = adjusted;
  if (gates.use_input) {
    out.input_gate = relation_input_gate(bias, gates.input_w, gates.input_b);
    input = ad::mul(*out.input_gate, adjusted);
  }
  if (gates.use_forget && steps > 1) {
    out.forget_gate = relation_forget_gate(bias, gates.forget_w, gates.forget_b);
  }
  Var state = tape.constant(Tensor(Shape{batch, D}, 0.0));
  std::vector<Var> states;
  states.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    Var x_t = ad::slice_rows(input, t * batch, batch);
    Var e_t = ad::slice_rows(context, t * batch, batch);
    Var prev = state;
    if (out.forget_gate && t > 0) {
      prev = ad::mul(ad::slice_rows(*out.forget_gate, (t - 1) * batch, batch), state);
    }
    GruStep step = gru_cell(x_t, e_t, prev, gru);
    state = step.state;
    states.push_back(state);
    out.steps.push_back(step);
  }
  out.states = ad::concat_rows(states);
  return out;
}

struct FusionWeights {
  Var att_w, att_b, att_v;
  std::optional<Var> fuse_w, fuse_b;
};

struct FusionOutput {
  Var fused;
  std::optional<Var> scores;   // rows x |R|
  std::optional<Var> weights;  // softmax of scores
};

/// Attention: a^r = tanh(z^r W_a + b_a) v, lambda = softmax_r(a),
/// y~ = sum_r lambda^r z^r. Concat and add are the ablation variants.
inline FusionOutput multi_relation_fuse(const std::vector<Var>& states, Fusion mode,
                                        const FusionWeights& w) {
  if (states.empty()) throw ConfigError("multi_relation_fuse: empty relation set");
  FusionOutput out;
  switch (mode) {
    case Fusion::Attention: {
      std::vector<Var> scores;
      for (const auto& z : states) {
        scores.push_back(ad::matmul(
            ad::tanh(ad::add_row_vector(ad::matmul(z, w.att_w), w.att_b)), w.att_v));
      }
      out.scores = ad::concat(scores);
      out.weights = ad::softmax(*out.scores, 1);
      std::optional<Var> acc;
      for (std::size_t r = 0; r < states.size(); ++r) {
        Var term = ad::scale_rows(states[r], ad::slice_cols(*out.weights, r, 1));
        acc = acc ? ad::add(*acc, term) : term;
      }
      out.fused = *acc;
      break;
    }
    case Fusion::Add: {
      Var acc = states.front();
      for (std::size_t r = 1; r < states.size(); ++r) acc = ad::add(acc, states[r]);
      out.fused = acc;
      break;
    }
    case Fusion::Concat: {
      if (!w.fuse_w || !w.fuse_b) throw ConfigError("concat fusion needs fuse_w/fuse_b");
      out.fused = ad::add_row_vector(ad::matmul(ad::concat(states), *w.fuse_w), *w.fuse_b);
      break;
    }
  }
  return out;
}

/// y = relu(y~ W1 + b1) W2 + b2.
inline Var readout(Var fused, Var w1, Var b1, Var w2, Var b2) {
  Var hidden = ad::relu(ad::add_row_vector(ad::matmul(fused, w1), b1));
  return ad::add_row_vector(ad::matmul(hidden, w2), b2);
}

}  // namespace stage

// ---------------------------------------------------------------------------
// Parameter binding and the composed forward pass

struct RelationVars {
  ad::Var proj_w, proj_b, sim_w, sim_b, diff_w, diff_b, adj_w;
  stage::GruWeights gru;
  ad::Var in_gate_w, in_gate_b, forget_gate_w, forget_gate_b;
};

/// Parameters placed on a tape, either as differentiable leaves or as
/// constants.
struct BoundParams {
  std::vector<ad::Var> vars;  // aligned with ModelParams::names()
  std::vector<RelationVars> relations;
  ad::Var time_embed;
  stage::FusionWeights fusion;
  ad::Var out1_w, out1_b, out2_w, out2_b;

  static BoundParams bind(ad::Tape& tape, const ModelParams& p, bool trainable) {
    std::vector<ad::Var> vars;
    for (const auto& t : p.tensors()) {
      vars.push_back(trainable ? tape.leaf(t) : tape.constant(t));
    }
    return from_vars(p, std::move(vars));
  }

  /// Uses existing tape variables, aligned with p.names(), as parameters.
  static BoundParams from_vars(const ModelParams& p, std::vector<ad::Var> vars) {
    if (vars.size() != p.names().size()) {
      throw ShapeError("BoundParams: expected " + std::to_string(p.names().size()) +
                       " variables, got " + std::to_string(vars.size()));
    }
    BoundParams b;
    b.vars = std::move(vars);
    auto v = [&](const std::string& n) { return b.vars[p.index_of(n)]; };
    for (Relation r : p.config().relations) {
      auto rv = [&](const char* n) { return v(detail::rel_param(r, n)); };
      RelationVars x;
      x.proj_w = rv("proj_w");
      x.proj_b = rv("proj_b");
      x.sim_w = rv("sim_w");
      x.sim_b = rv("sim_b");
      x.diff_w = rv("diff_w");
      x.diff_b = rv("diff_b");
      x.adj_w = rv("adj_w");
      x.gru = {rv("gru_reset_w"), rv("gru_reset_b"), rv("gru_update_w"),
               rv("gru_update_b"), rv("gru_cand_w"), rv("gru_cand_b")};
      x.in_gate_w = rv("in_gate_w");
      x.in_gate_b = rv("in_gate_b");
      x.forget_gate_w = rv("forget_gate_w");
      x.forget_gate_b = rv("forget_gate_b");
      b.relations.push_back(x);
    }
    b.time_embed = v("time_embed");
    b.fusion.att_w = v("att_w");
    b.fusion.att_b = v("att_b");
    b.fusion.att_v = v("att_v");
    if (p.config().fusion == Fusion::Concat) {
      b.fusion.fuse_w = v("fuse_w");
      b.fusion.fuse_b = v("fuse_b");
    }
    b.out1_w = v("out1_w");
    b.out1_b = v("out1_b");
    b.out2_w = v("out2_w");
    b.out2_b = v("out2_b");
    return b;
  }
};

/// Neighbour readings and aggregation plan of one relation for a batch.
struct RelationBatch {
  Tensor inputs;  // neighbour rows x channels, rows ordered (t, b, k)
  stage::AggregationPlan plan;
};

struct BatchData {
  std::size_t steps = 0;
  std::size_t batch = 0;
  std::vector<std::size_t> time_of_day;  // per step
  std::vector<RelationBatch> relations;  // aligned with config.relations
};

struct RelationTrace {
  Relation relation = Relation::SP;
  Tensor projected, similarity, bias, adjusted;
  Tensor input_gate, forget_gate;
  Tensor reset, update, candidate, state;
};

/// Every intermediate of one forward pass, rows ordered (t, b).
struct ForwardTrace {
  std::size_t steps = 0, batch = 0;
  std::vector<RelationTrace> relations;
  Tensor scores;   // attention scores, rows x |R| (attention fusion only)
  Tensor weights;  // lambda, rows x |R| (attention fusion only)
  Tensor fused;
  Tensor output;   // normalised space
};

namespace detail {
inline Tensor stack_rows(const std::vector<stage::GruStep>& steps,
                         ad::Var stage::GruStep::*member) {
  std::vector<double> data;
  std::size_t rows = 0, cols = 0;
  for (const auto& s : steps) {
    const Tensor& v = (s.*member).value();
    rows += v.dim(0);
    cols = v.dim(1);
    data.insert(data.end(), v.data().begin(), v.data().end());
  }
  return Tensor(Shape{rows, cols}, std::move(data));
}
}  // namespace detail

/// Composes all three stages for a batch of targets sharing one window.
/// Returns the normalised estimates, (steps * batch) x channels.
inline ad::Var forward(ad::Tape& tape, const BoundParams& bp, const ModelConfig& cfg,
                       const BatchData& data, ForwardTrace* trace = nullptr) {
  const std::size_t P = data.steps, B = data.batch, rows = P * B;
  if (data.relations.size() != cfg.relations.size()) {
    throw ConfigError("batch relation count differs from model relation set");
  }
  if (data.time_of_day.size() != P) throw ShapeError("time_of_day length != steps");
  if (trace) {
    *trace = ForwardTrace{};
    trace->steps = P;
    trace->batch = B;
  }

  ad::Var context;
  if (cfg.use_context) {
    std::vector<std::size_t> slot(rows);
    for (std::size_t t = 0; t < P; ++t) {
      if (data.time_of_day[t] >= cfg.time_slots) {
        throw ShapeError("time-of-day slot outside embedding table");
      }
      for (std::size_t b = 0; b < B; ++b) slot[t * B + b] = data.time_of_day[t];
    }
    context = ad::gather_rows(bp.time_embed, std::move(slot));
  } else {
    context = tape.constant(Tensor(Shape{rows, cfg.embed}, 0.0));
  }

  std::vector<ad::Var> states;
  for (std::size_t ri = 0; ri < cfg.relations.size(); ++ri) {
    const RelationVars& rv = bp.relations[ri];
    const RelationBatch& rb = data.relations[ri];
    if (rb.plan.out_rows != rows) throw ShapeError("aggregation plan row count mismatch");
    const std::string stage_name = relation_name(cfg.relations[ri]);
    try {
      ad::Var x = tape.constant(rb.inputs);
      ad::Var h = stage::project_neighbors(x, rv.proj_w, rv.proj_b);
      ad::Var s = stage::aggregate_similarity(h, rb.plan, rv.sim_w, rv.sim_b);
      ad::Var delta, adjusted;
      if (cfg.use_difference) {
        delta = stage::aggregate_difference(s, h, rb.plan, rv.diff_w, rv.diff_b);
        adjusted = stage::adjust_representation(s, delta, rv.adj_w);
      } else {
        delta = tape.constant(Tensor(s.shape(), 0.0));
        adjusted = s;
      }
      stage::GateWeights gates{rv.in_gate_w, rv.in_gate_b, rv.forget_gate_w,
                               rv.forget_gate_b, cfg.use_input_gate,
                               cfg.use_forget_gate};
      auto gru = stage::relation_gru_forward(adjusted, delta, context, P, B, rv.gru, gates);
      states.push_back(gru.states);
      if (trace) {
        RelationTrace rt;
        rt.relation = cfg.relations[ri];
        rt.projected = h.value();
        rt.similarity = s.value();
        rt.bias = delta.value();
        rt.adjusted = adjusted.value();
        const std::size_t D = cfg.hidden;
        rt.input_gate = gru.input_gate ? gru.input_gate->value() : Tensor(Shape{rows, D}, 1.0);
        rt.forget_gate = Tensor(Shape{rows, D}, 1.0);
        if (gru.forget_gate) {
          const Tensor& g = gru.forget_gate->value();
          std::copy_n(g.data().begin(), (rows - B) * D, rt.forget_gate.data().begin() + B * D);
        }
        rt.reset = detail::stack_rows(gru.steps, &stage::GruStep::reset);
        rt.update = detail::stack_rows(gru.steps, &stage::GruStep::update);
        rt.candidate = detail::stack_rows(gru.steps, &stage::GruStep::candidate);
        rt.state = gru.states.value();
        trace->relations.push_back(std::move(rt));
      }
    } catch (const KrigingError& e) {
      throw KrigingError("relation " + stage_name + ": " + e.what());
    } catch (const NumericError& e) {
      throw NumericError("relation " + stage_name + ": " + e.what());
    }
  }

  auto fused = stage::multi_relation_fuse(states, cfg.fusion, bp.fusion);
  ad::Var out = stage::readout(fused.fused, bp.out1_w, bp.out1_b, bp.out2_w, bp.out2_b);
  if (trace) {
    if (fused.scores) trace->scores = fused.scores->value();
    if (fused.weights) trace->weights = fused.weights->value();
    trace->fused = fused.fused.value();
    trace->output = out.value();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch assembly from data

/// A location to estimate together with its neighbour set per relation
/// (aligned with the model's relation order).
struct KrigingTarget {
  std::size_t location = 0;
  std::vector<NeighborSet> neighbors;
};

/// Top-K neighbours of `location` under every model relation, skipping
/// `exclude` (and the location itself).
inline KrigingTarget make_target(const RelationGraph& graph, const ModelConfig& cfg,
                                 std::size_t location,
                                 const std::vector<std::size_t>& exclude = {}) {
  KrigingTarget t;
  t.location = location;
  for (Relation r : cfg.relations) {
    if (!graph.has(r)) {
      throw ConfigError("relation " + relation_name(r) +
                        " required by the model is missing from the relation graph");
    }
    t.neighbors.push_back(graph.neighbors(r, location, cfg.top_k, exclude));
  }
  return t;
}

/// Gathers normalised neighbour readings and normalised relation weights.
/// When a time-dependent weight vanishes on the whole neighbour set at some
/// step, the time-averaged ranking weights are used for that step.
inline BatchData assemble_batch(const Tensor& normalized, const RelationGraph& graph,
                                const ModelConfig& cfg, const Window& window,
                                const std::vector<KrigingTarget>& targets) {
  const std::size_t T = normalized.dim(1), C = normalized.dim(2);
  const std::size_t P = window.length, B = targets.size();
  if (window.start + P > T) throw ShapeError("window extends past the series");
  if (C != cfg.channels) throw ShapeError("channel count differs from model");
  BatchData d;
  d.steps = P;
  d.batch = B;
  d.time_of_day = window.time_of_day;
  for (std::size_t ri = 0; ri < cfg.relations.size(); ++ri) {
    const Relation r = cfg.relations[ri];
    std::size_t n_rows = 0;
    for (const auto& tg : targets) n_rows += tg.neighbors.at(ri).size() * P;
    std::vector<double> inputs(n_rows * C);
    std::vector<std::size_t> segment(n_rows);
    std::vector<double> raw(n_rows);
    std::size_t row = 0;
    for (std::size_t t = 0; t < P; ++t) {
      const std::size_t step = window.start + t;
      for (std::size_t b = 0; b < B; ++b) {
        const auto& tg = targets[b];
        const auto& ns = tg.neighbors[ri];
        const std::size_t first = row;
        double total = 0.0;
        for (std::size_t k = 0; k < ns.size(); ++k, ++row) {
          const std::size_t i = ns.index[k];
          for (std::size_t c = 0; c < C; ++c) {
            inputs[row * C + c] = normalized[(i * T + step) * C + c];
          }
          segment[row] = t * B + b;
          raw[row] = graph.weight(r, i, tg.location, window.time_of_day[t]);
          total += raw[row];
        }
        if (!(total > 0.0)) {
          for (std::size_t k = 0; k < ns.size(); ++k) raw[first + k] = ns.rank_weight[k];
        }
      }
    }
    RelationBatch rb;
    rb.inputs = Tensor(Shape{n_rows, C}, std::move(inputs));
    rb.plan = stage::AggregationPlan::normalized(std::move(segment), raw, P * B);
    d.relations.push_back(std::move(rb));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Inference

struct KrigingResult {
  std::size_t location = 0;
  Window window;
  Tensor estimate;  // steps x channels, de-normalised
  ForwardTrace trace;
};

/**
 * Inference front-end: estimates series at target locations from the
 * observed pool of a relation graph.
 *
 * Holds references only; ModelParams is never modified, so one Kriger may
 * serve concurrent calls.
 */
class Kriger {
 public:
  Kriger(const ModelParams& params, const Normalizer& norm, const Dataset& data,
         const RelationGraph& graph)
      : params_(params), norm_(norm), data_(data), graph_(graph),
        normalized_(norm.apply(data.readings)) {
    const auto& cfg = params.config();
    if (norm.channels() != data.channels() || cfg.channels != data.channels()) {
      throw ConfigError("model channel count differs from dataset");
    }
    if (cfg.time_slots != data.steps_per_day) {
      throw ConfigError("model has " + std::to_string(cfg.time_slots) +
                        " time-of-day slots, dataset has " +
                        std::to_string(data.steps_per_day) + " steps per day");
    }
    for (Relation r : cfg.relations) {
      if (!graph.has(r)) {
        throw ConfigError("model relation " + relation_name(r) +
                          " is unavailable in the relation graph");
      }
    }
  }

  /// Rejects a relation set that differs from the trained one.
  void require_relations(const std::vector<Relation>& requested) const {
    if (requested != params_.config().relations) {
      throw ConfigError("relation set mismatch: model trained with {" +
                        relation_list_str(params_.config().relations) +
                        "}, requested {" + relation_list_str(requested) + "}");
    }
  }

  const Tensor& normalized() const { return normalized_; }
  const ModelParams& params() const { return params_; }

  KrigingResult krige(std::size_t location, const Window& window,
                      const std::vector<std::size_t>& exclude = {},
                      bool keep_trace = false) const {
    const auto& cfg = params_.config();
    KrigingTarget target = make_target(graph_, cfg, location, exclude);
    BatchData batch = assemble_batch(normalized_, graph_, cfg, window, {target});
    ad::Tape tape;
    BoundParams bp = BoundParams::bind(tape, params_, false);
    KrigingResult res;
    res.location = location;
    res.window = window;
    ad::Var out = forward(tape, bp, cfg, batch, keep_trace ? &res.trace : nullptr);
    res.estimate = out.value();
    for (std::size_t i = 0; i < res.estimate.numel(); ++i) {
      res.estimate[i] = norm_.invert(res.estimate[i], i % cfg.channels);
    }
    return res;
  }

 private:
  const ModelParams& params_;
  const Normalizer& norm_;
  const Dataset& data_;
  const RelationGraph& graph_;
  Tensor normalized_;
};

/// Single-call form of Kriger::krige that also checks the requested
/// relation set against the trained one.
inline KrigingResult krige_location(const ModelParams& params, const Normalizer& norm,
                                    const Dataset& data, const RelationGraph& graph,
                                    std::size_t target, const Window& window,
                                    const std::vector<Relation>& requested,
                                    bool keep_trace = true) {
  Kriger k(params, norm, data, graph);
  k.require_relations(requested);
  return k.krige(target, window, {}, keep_trace);
}

}  // namespace stkrige
