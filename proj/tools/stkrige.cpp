// SPDX-License-Identifier: Apache-2.0
//
// stkrige command-line tool.
//
//   stkrige synth     --spec FILE --out DIR
//   stkrige train     --data DIR [--config FILE] --out CKPT [--seed S]
//   stkrige krige     --model CKPT --data DIR --targets ID,ID --out CSV [--trace]
//   stkrige eval      --model CKPT --data DIR --out DIR [--mask-ratio LIST]
//                     [--ablate LIST] [--sweep K=..|P=..|D=..]
//   stkrige gradcheck [--full-model]
//
// Exit status: 0 success, 1 runtime error, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stkrige/checkpoint.hpp"
#include "stkrige/dataset.hpp"
#include "stkrige/experiments.hpp"
#include "stkrige/gradcheck_suite.hpp"
#include "stkrige/svg.hpp"
#include "stkrige/synthetic.hpp"
#include "stkrige/training.hpp"

namespace {

using namespace stkrige;

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

/// Thrown for invalid invocations detected after flag parsing.
struct UsageError : Error {
  using Error::Error;
};

struct Options {
  std::string data, config, out, model, targets, spec, relations;
  std::string mask_ratio, ablate, sweep, history;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;
  bool trace = false;
  bool full_model = false;
};

void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& part : csv::split(s, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o) {
  SynthSpec spec;
  try {
    if (!o.spec.empty()) spec = load_synth_spec(o.spec);
    if (o.seed) spec.seed = *o.seed;
    spec.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const auto res = generate_synthetic(spec);
  write_synthetic(res, o.out);
  std::cout << "wrote " << res.dataset.num_locations() << " locations x "
            << res.dataset.num_steps() << " steps to " << o.out << " (relations: "
            << relation_list_str(res.dataset.available_relations()) << ")\n";
  return kOk;
}

int cmd_train(const Options& o) {
  TrainConfig cfg;
  try {
    if (!o.config.empty()) cfg = load_train_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (o.threads) cfg.threads = o.threads;
    cfg.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const Dataset ds = load_dataset(o.data);
  cfg = resolve_for_dataset(cfg, ds);
  const RelationGraph graph = observed_graph(ds, cfg.model.relations);

  struct Log : TrainingObserver {
    void on_warning(const std::string& m) override { warn(m); }
  } log;
  Trainer trainer(cfg, ds, graph, &log);
  const TrainResult res = trainer.train();
  checkpoint_save(make_checkpoint(res), o.out);
  const std::string history = o.history.empty() ? o.out + ".history.csv" : o.history;
  csv::write_file(history, history_csv(res.history));

  const auto val = evaluate_model(res.params, res.normalizer, ds, graph, res.split.val,
                                  graph.pool(), cfg.window, cfg.threads);
  std::cout << "relations " << relation_list_str(cfg.model.relations) << ", "
            << res.history.size() << " epochs, best epoch " << res.best_epoch << "\n"
            << "validation loss " << res.best_val_loss << "\n"
            << "validation (leave-one-out) rmse " << val.report.rmse << " mae "
            << val.report.mae << " mape " << val.report.mape << " r2 " << val.report.r2 << "\n"
            << "checkpoint " << o.out << ", history " << history << "\n";
  return kOk;
}

int cmd_krige(const Options& o) {
  const auto ids = split_list(o.targets);
  if (ids.empty()) throw UsageError("--targets must name at least one location");
  std::optional<std::vector<Relation>> requested;
  if (!o.relations.empty()) requested = parse_relation_list(o.relations);

  const Checkpoint ck = checkpoint_load(o.model, requested);
  const Dataset ds = load_dataset(o.data);
  const auto& cfg = ck.config.model;
  const auto available = ds.available_relations();
  for (Relation r : cfg.relations) {
    if (std::find(available.begin(), available.end(), r) == available.end()) {
      throw ConfigError("checkpoint uses relation " + relation_name(r) +
                        " but the dataset lacks its input data");
    }
  }
  const RelationGraph graph = observed_graph(ds, cfg.relations);
  Kriger kriger(ck.params, ck.normalizer, ds, graph);
  std::vector<std::size_t> targets;
  for (const auto& id : ids) targets.push_back(ds.index_of(id));

  const Range all{0, ds.num_steps()};
  std::vector<SeriesEstimate> est(targets.size());
  parallel_for(targets.size(), resolve_threads(o.threads), [&](std::size_t i) {
    est[i] = krige_series(kriger, targets[i], all, ck.config.window, ds.steps_per_day, {},
                          o.trace);
  });
  const bool lambdas = o.trace && cfg.fusion == Fusion::Attention;
  if (o.trace && !lambdas) warn("--trace: attention weights exist only with attention fusion");

  std::ostringstream os;
  os << "location_id,t,channel,estimate";
  if (lambdas) {
    for (Relation r : cfg.relations) os << ",lambda_" << relation_name(r);
  }
  os << "\n";
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t t = 0; t < all.size(); ++t) {
      for (std::size_t c = 0; c < cfg.channels; ++c) {
        os << ds.network.ids[targets[i]] << ',' << t << ','
           << (c < ds.channel_names.size() ? ds.channel_names[c] : std::to_string(c)) << ','
           << csv::format_double(est[i].values.at(t, c));
        if (lambdas) {
          for (std::size_t r = 0; r < cfg.relations.size(); ++r) {
            os << ',' << csv::format_double(est[i].weights.at(t, r));
          }
        }
        os << "\n";
      }
    }
  }
  csv::write_file(o.out, os.str());
  std::cout << "kriged " << targets.size() << " location(s) over " << all.size()
            << " steps into " << o.out << "\n";
  return kOk;
}

void write_report(const std::string& dir, const std::string& stem,
                  const std::vector<ExperimentPoint>& points) {
  csv::write_file(dir + "/" + stem + ".csv", report_csv(points));
  csv::write_file(dir + "/" + stem + ".json", report_json(points));
}

int cmd_eval(const Options& o) {
  std::vector<double> ratios;
  std::vector<Variant> variants;
  std::optional<Sweep> sweep;
  try {
    if (!o.mask_ratio.empty()) ratios = parse::real_list(o.mask_ratio, "--mask-ratio");
    if (!o.ablate.empty()) variants = parse_variants(o.ablate);
    if (!o.sweep.empty()) sweep = parse_sweep(o.sweep);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }

  const Checkpoint ck = checkpoint_load(o.model);
  const Dataset ds = load_dataset(o.data);
  TrainConfig cfg = ck.config;
  if (o.threads) cfg.threads = o.threads;
  if (cfg.model.channels != ds.channels() || cfg.model.time_slots != ds.steps_per_day) {
    throw ConfigError("checkpoint does not match the dataset's channels or steps per day");
  }
  std::filesystem::create_directories(o.out);

  const RelationGraph graph = observed_graph(ds, cfg.model.relations);
  const SplitRanges split = chronological_split(ds.num_steps(), cfg.split, cfg.window);
  const auto base = evaluate_model(ck.params, ck.normalizer, ds, graph, split.test,
                                   ds.unobserved_indices(), cfg.window, cfg.threads);
  write_report(o.out, "report", {{"model", 0.0, 0, cfg.hash(), base.report}});
  const auto idw =
      idw_report(ds, ds.observed_indices(), ds.unobserved_indices(), split.test, cfg.model.top_k);
  std::cout << "test rmse " << base.report.rmse << " mae " << base.report.mae << " mape "
            << base.report.mape << " r2 " << base.report.r2 << " (idw rmse " << idw.rmse << ")\n";

  if (!ratios.empty()) {
    const auto curve = mask_ratio_experiment(cfg, ds, ratios, cfg.seed);
    write_report(o.out, "mask_ratio", curve);
    svg::Series rmse{"RMSE", {}, {}}, mae{"MAE", {}, {}};
    for (const auto& p : curve) {
      rmse.x.push_back(p.eta);
      rmse.y.push_back(p.report.rmse);
      mae.x.push_back(p.eta);
      mae.y.push_back(p.report.mae);
    }
    csv::write_file(o.out + "/mask_ratio.svg",
                    svg::line_plot({"Error vs. dropped fraction of observed locations",
                                    "mask ratio", "error"},
                                   {rmse, mae}));
    for (const auto& p : curve) {
      std::cout << "mask " << p.eta << ": rmse " << p.report.rmse << "\n";
    }
  }
  if (!variants.empty()) {
    std::vector<Variant> all{parse_variant("full")};
    all.insert(all.end(), variants.begin(), variants.end());
    const auto table = ablation_run(cfg, ds, all, warn);
    write_report(o.out, "ablation", table);
    for (const auto& p : table) std::cout << p.label << ": rmse " << p.report.rmse << "\n";
  }
  if (sweep) {
    const auto table = sweep_run(cfg, ds, *sweep);
    write_report(o.out, "sweep", table);
    for (const auto& p : table) std::cout << p.label << ": rmse " << p.report.rmse << "\n";
  }
  std::cout << "reports written to " << o.out << "\n";
  return kOk;
}

int cmd_gradcheck(const Options& o) {
  constexpr double kTolerance = 1e-4;
  bool ok = true;
  auto show = [&](const GradCheckCase& c) {
    const bool pass = c.max_rel_error < kTolerance;
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << c.name << " max_rel_error=" << c.max_rel_error
              << " entries=" << c.entries << "\n";
  };
  for (const auto& c : check_primitives()) show(c);
  if (o.full_model) show(check_full_model());
  return ok ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal kriging with heterogeneous relations"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset directory");
  synth->add_option("--spec", o.spec, "Synthetic spec file (key = value)");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--seed", seed, "Override the spec seed");

  auto* train = app.add_subcommand("train", "Train a model with leave-one-out");
  train->add_option("--data", o.data, "Dataset directory")->required();
  train->add_option("--config", o.config, "Config file (key = value)");
  train->add_option("--out", o.out, "Checkpoint path")->required();
  train->add_option("--seed", seed, "Random seed");
  train->add_option("--history", o.history, "History CSV path (default CKPT.history.csv)");

  auto* krige = app.add_subcommand("krige", "Estimate series at target locations");
  krige->add_option("--model", o.model, "Checkpoint")->required();
  krige->add_option("--data", o.data, "Dataset directory")->required();
  krige->add_option("--targets", o.targets, "Comma-separated location ids")->required();
  krige->add_option("--out", o.out, "Output CSV")->required();
  krige->add_option("--relations", o.relations, "Expected relation set, e.g. SP,FS");
  krige->add_flag("--trace", o.trace, "Add attention weight columns");

  auto* eval = app.add_subcommand("eval", "Evaluate a model and run experiments");
  eval->add_option("--model", o.model, "Checkpoint")->required();
  eval->add_option("--data", o.data, "Dataset directory")->required();
  eval->add_option("--out", o.out, "Report directory")->required();
  eval->add_option("--mask-ratio", o.mask_ratio, "Comma-separated dropped fractions");
  eval->add_option("--ablate", o.ablate,
                   "Comma-separated variants: no-difference, no-beta, no-gamma, no-gates, "
                   "no-context, fusion=concat, fusion=add, all");
  eval->add_option("--sweep", o.sweep, "Parameter sweep: K=..., P=... or D=...");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_flag("--full-model", o.full_model, "Also check the composed model loss");

  for (auto* sub : {synth, train, krige, eval, grad}) {
    sub->add_option("--threads", o.threads, "Worker threads (default: STKRIGE_THREADS or cores)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  for (auto* sub : {synth, train}) {
    if (sub->parsed() && sub->count("--seed")) o.seed = seed;
  }

  try {
    resolve_threads(o.threads);
    if (synth->parsed()) return cmd_synth(o);
    if (train->parsed()) return cmd_train(o);
    if (krige->parsed()) return cmd_krige(o);
    if (eval->parsed()) return cmd_eval(o);
    if (grad->parsed()) return cmd_gradcheck(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
