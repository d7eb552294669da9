// SPDX-License-Identifier: Apache-2.0
#pragma once

// Finite-difference checks of every differentiable primitive and of the
// composed model loss.

#include <string>
#include <vector>

#include "stkrige/gradcheck.hpp"
#include "stkrige/model.hpp"
#include "stkrige/random.hpp"
#include "stkrige/synthetic.hpp"
#include "stkrige/training.hpp"

namespace stkrige {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

namespace detail {

/// Random matrix whose entries stay at least `gap` away from zero, so kinks
/// of abs/relu are never straddled by the finite difference.
inline Tensor away_from_zero(Rng& rng, std::size_t rows, std::size_t cols, double gap = 0.1) {
  Tensor t(Shape{rows, cols}, 0.0);
  for (double& v : t.storage()) {
    const double m = rng.uniform(gap, 1.5);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

inline Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t(Shape{rows, cols}, 0.0);
  for (double& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

/// Scalarises an output by a fixed random projection so every output entry
/// contributes to the checked gradient.
inline ad::Var project(ad::Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w(y.shape(), 0.0);
  for (double& v : w.storage()) v = rng.uniform(-1.0, 1.0);
  return ad::sum_all(ad::mul(y, y.tape->constant(w)));
}

}  // namespace detail

inline std::vector<GradCheckCase> check_primitives(std::uint64_t seed = 11) {
  using ad::Var;
  using V = const std::vector<Var>&;
  Rng rng(seed);
  auto M = [&](std::size_t r, std::size_t c) { return detail::random_matrix(rng, r, c); };
  auto A = [&](std::size_t r, std::size_t c, double gap = 0.1) {
    return detail::away_from_zero(rng, r, c, gap);
  };
  auto P = [](Var y) { return detail::project(y, 99); };

  struct Spec {
    std::string name;
    ExpressionBuilder f;
    std::vector<Tensor> inputs;
  };
  std::vector<Spec> specs = {
      {"matmul", [&](ad::Tape&, V x) { return P(ad::matmul(x[0], x[1])); }, {M(3, 4), M(4, 2)}},
      {"add", [&](ad::Tape&, V x) { return P(ad::add(x[0], x[1])); }, {M(2, 3), M(2, 3)}},
      {"sub", [&](ad::Tape&, V x) { return P(ad::sub(x[0], x[1])); }, {M(2, 3), M(2, 3)}},
      {"mul", [&](ad::Tape&, V x) { return P(ad::mul(x[0], x[1])); }, {M(2, 3), M(2, 3)}},
      {"abs", [&](ad::Tape&, V x) { return P(ad::abs(x[0])); }, {A(3, 3)}},
      {"sigmoid", [&](ad::Tape&, V x) { return P(ad::sigmoid(x[0])); }, {M(3, 3)}},
      {"tanh", [&](ad::Tape&, V x) { return P(ad::tanh(x[0])); }, {M(3, 3)}},
      {"relu", [&](ad::Tape&, V x) { return P(ad::relu(x[0])); }, {A(3, 3)}},
      {"exp", [&](ad::Tape&, V x) { return P(ad::exp(x[0])); }, {M(3, 3)}},
      {"neg", [&](ad::Tape&, V x) { return P(ad::neg(x[0])); }, {M(3, 3)}},
      {"reciprocal", [&](ad::Tape&, V x) { return P(ad::reciprocal(x[0])); }, {A(3, 3, 0.5)}},
      {"add_row_vector",
       [&](ad::Tape&, V x) { return P(ad::add_row_vector(x[0], x[1])); },
       {M(3, 4), Tensor::vector({0.1, -0.2, 0.3, 0.4})}},
      {"broadcast_rows",
       [&](ad::Tape&, V x) { return P(ad::broadcast_rows(x[0], 3)); },
       {Tensor::vector({0.5, -0.7})}},
      {"concat", [&](ad::Tape&, V x) { return P(ad::concat({x[0], x[1]})); }, {M(2, 3), M(2, 2)}},
      {"concat_rows",
       [&](ad::Tape&, V x) { return P(ad::concat_rows({x[0], x[1]})); },
       {M(2, 3), M(1, 3)}},
      {"slice_rows", [&](ad::Tape&, V x) { return P(ad::slice_rows(x[0], 1, 2)); }, {M(4, 3)}},
      {"slice_cols", [&](ad::Tape&, V x) { return P(ad::slice_cols(x[0], 1, 2)); }, {M(3, 4)}},
      {"gather_rows",
       [&](ad::Tape&, V x) { return P(ad::gather_rows(x[0], {2, 0, 2, 1})); },
       {M(3, 2)}},
      {"segment_sum",
       [&](ad::Tape&, V x) {
         return P(ad::segment_sum(x[0], {0, 0, 1, 1, 1}, {0.25, 0.75, 0.2, 0.3, 0.5}, 2));
       },
       {M(5, 3)}},
      {"scale_rows", [&](ad::Tape&, V x) { return P(ad::scale_rows(x[0], x[1])); },
       {M(3, 4), M(3, 1)}},
      {"softmax", [&](ad::Tape&, V x) { return P(ad::softmax(x[0], 1)); }, {M(3, 4)}},
      {"softmax_axis0", [&](ad::Tape&, V x) { return P(ad::softmax(x[0], 0)); }, {M(3, 4)}},
      {"sum", [&](ad::Tape&, V x) { return P(ad::sum(x[0], 1)); }, {M(3, 4)}},
      {"weighted_sum",
       [&](ad::Tape&, V x) { return P(ad::weighted_sum(x[0], 0, {0.2, -1.0, 0.5})); },
       {M(3, 4)}},
      {"sum_all", [&](ad::Tape&, V x) { return ad::sum_all(x[0]); }, {M(3, 4)}},
  };
  std::vector<GradCheckCase> out;
  for (auto& s : specs) {
    const auto r = grad_check_detailed(s.f, s.inputs);
    out.push_back({s.name, r.max_rel_error, r.entries_checked});
  }
  return out;
}

/// Composed loss of the model on a five-location instance (four observed, one
/// target), window of six steps, hidden width 8, all three relations.
inline GradCheckCase check_full_model(std::uint64_t seed = 5) {
  SynthSpec spec;
  spec.observed = 4;
  spec.unobserved = 1;
  spec.steps = 12;
  spec.steps_per_day = 6;
  spec.k_true = 3;
  spec.noise_std = 0.05;
  spec.mix = {0.3, 0.4, 0.3};
  spec.seed = seed;
  const auto synth = generate_synthetic(spec);
  const Dataset& ds = synth.dataset;

  ModelConfig cfg;
  cfg.relations = {Relation::SP, Relation::FS, Relation::TP};
  cfg.channels = 1;
  cfg.hidden = 8;
  cfg.embed = 4;
  cfg.time_slots = ds.steps_per_day;
  cfg.top_k = 3;

  const RelationGraph graph(ds.network, cfg.relations, ds.observed_indices());
  const Normalizer norm = fit_normalizer(ds, Range{0, ds.num_steps()}, ds.observed_indices());
  const Tensor normalized = norm.apply(ds.readings);
  const std::size_t target = ds.unobserved_indices().front();
  const Window window = make_window(0, 6, ds.steps_per_day);
  const BatchData batch =
      assemble_batch(normalized, graph, cfg, window, {make_target(graph, cfg, target)});
  Tensor truth(Shape{6, 1}, 0.0);
  for (std::size_t t = 0; t < 6; ++t) truth[t] = normalized[target * ds.num_steps() + t];

  // perturb every tensor, biases included, off its initial value
  ModelParams params = ModelParams::initialize(cfg, seed);
  Rng rng(seed + 1);
  for (auto& t : params.tensors()) {
    for (double& v : t.storage()) v += rng.uniform(-0.2, 0.2);
  }

  ExpressionBuilder f = [&](ad::Tape& tape, const std::vector<ad::Var>& vars) {
    BoundParams bp = BoundParams::from_vars(params, vars);
    return squared_error_loss(forward(tape, bp, cfg, batch), truth);
  };
  const auto r = grad_check_detailed(f, params.tensors());
  return {"full_model", r.max_rel_error, r.entries_checked};
}

}  // namespace stkrige
