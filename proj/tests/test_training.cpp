#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "stkrige/checkpoint.hpp"
#include "stkrige/csv.hpp"
#include "stkrige/experiments.hpp"
#include "stkrige/training.hpp"

using namespace stkrige;
using stkrige::fixture::TempDir;

namespace {

struct Small {
  SynthResult syn = generate_synthetic(fixture::small_spec());
  const Dataset& ds = syn.dataset;
  TrainConfig cfg = fixture::small_train_config(ds);
  RelationGraph graph = observed_graph(ds, cfg.model.relations);
};

/// Records everything the trainer reports.
class Recorder : public TrainingObserver {
 public:
  Range fit_range;
  std::vector<std::size_t> fit_locations;
  std::vector<std::pair<std::size_t, NeighborSet>> neighbor_sets;
  std::vector<std::pair<Range, bool>> batches;
  std::vector<std::vector<std::size_t>> batch_targets;

  void on_normalizer_fit(const Range& r, const std::vector<std::size_t>& l) override {
    fit_range = r;
    fit_locations = l;
  }
  void on_neighbors(std::size_t held_out, Relation, const NeighborSet& ns) override {
    neighbor_sets.emplace_back(held_out, ns);
  }
  void on_batch(const Window& w, const std::vector<KrigingTarget>& t, bool gradient) override {
    batches.emplace_back(w.range(), gradient);
    std::vector<std::size_t> locs;
    for (const auto& k : t) {
      locs.push_back(k.location);
      for (const auto& ns : k.neighbors) {
        if (ns.contains(k.location)) locs.push_back(static_cast<std::size_t>(-1));
      }
    }
    batch_targets.push_back(locs);
  }
};

}  // namespace

TEST(Loss, PerfectAndUnitExamples) {
  ad::Tape tape;
  const Tensor ones(Shape{6, 1}, 1.0);
  EXPECT_EQ(squared_error_loss(tape.constant(ones), ones).value().item(), 0.0);
  auto est = tape.leaf(Tensor(Shape{6, 1}, 0.0));
  auto loss = squared_error_loss(est, ones);
  EXPECT_EQ(loss.value().item(), 1.0);
  tape.backward(loss);
  const Tensor g = tape.grad(est);
  for (double v : g.data()) EXPECT_DOUBLE_EQ(v, -2.0 / 6.0);
}

TEST(TrainConfig, FileSettingsAndDatasetResolution) {
  TempDir dir("cfg");
  csv::write_file(dir.file("t.cfg"),
                  "relations = SP,FS\nwindow = 12\nlr = 0.002\nsplit = 0.6,0.2,0.2\n"
                  "difference = off\nfusion = add\n");
  TrainConfig c = load_train_config(dir.file("t.cfg"));
  EXPECT_EQ(c.window, 12u);
  EXPECT_EQ(c.lr, 0.002);
  EXPECT_FALSE(c.model.use_difference);
  EXPECT_EQ(c.model.fusion, Fusion::Add);
  EXPECT_EQ(c.effective_stride(), 12u);

  const auto syn = generate_synthetic(fixture::small_spec());
  const TrainConfig r = resolve_for_dataset(c, syn.dataset);
  EXPECT_EQ(r.model.relations, (std::vector<Relation>{Relation::SP, Relation::FS}));
  EXPECT_EQ(r.model.time_slots, 12u);
  EXPECT_NE(r.hash(), resolve_for_dataset(TrainConfig{}, syn.dataset).hash());

  csv::write_file(dir.file("bad.cfg"), "window = 12\nepochs = 3\n");
  EXPECT_THROW(load_train_config(dir.file("bad.cfg")), ConfigError);
}

TEST(TrainConfig, UnavailableRelationIsRejected) {
  auto s = fixture::small_spec();
  auto syn = generate_synthetic(s);
  syn.dataset.network.flows.reset();
  TrainConfig c;
  c.auto_relations = false;
  c.model.relations = {Relation::SP, Relation::TP};
  EXPECT_THROW(resolve_for_dataset(c, syn.dataset), ConfigError);
  c.auto_relations = true;
  EXPECT_EQ(resolve_for_dataset(c, syn.dataset).model.relations.size(), 2u);
}

TEST(Trainer, SameSeedSameModel) {
  Small a, b;
  const auto ra = train(a.cfg, a.ds, a.graph);
  const auto rb = train(b.cfg, b.ds, b.graph);
  EXPECT_TRUE(ra.params.identical(rb.params));
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    EXPECT_EQ(ra.history[i].train_loss, rb.history[i].train_loss);
    EXPECT_EQ(ra.history[i].val_loss, rb.history[i].val_loss);
  }
  Small c;
  c.cfg.seed = 43;
  EXPECT_FALSE(train(c.cfg, c.ds, c.graph).params.identical(ra.params));
}

TEST(Trainer, ThreadCountDoesNotChangeTheResult) {
  Small a, b;
  a.cfg.threads = 1;
  b.cfg.threads = 3;
  EXPECT_TRUE(train(a.cfg, a.ds, a.graph).params.identical(train(b.cfg, b.ds, b.graph).params));
}

TEST(Trainer, TrainingLossDecreases) {
  Small s;
  s.cfg.max_epochs = 8;
  s.cfg.lr = 5e-3;
  const auto r = train(s.cfg, s.ds, s.graph);
  ASSERT_EQ(r.history.size(), 8u);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  EXPECT_LE(r.best_val_loss, r.history.front().val_loss);
}

TEST(Trainer, ZeroPatienceStopsAtFirstStaleEpoch) {
  Small s;
  s.cfg.max_epochs = 60;
  s.cfg.patience = 0;
  s.cfg.lr = 5e-2;
  const auto r = train(s.cfg, s.ds, s.graph);
  ASSERT_LT(r.history.size(), 60u);
  EXPECT_EQ(r.history.size(), r.best_epoch + 1);
  for (std::size_t i = 1; i + 1 < r.history.size(); ++i) {
    EXPECT_LT(r.history[i].val_loss, r.history[i - 1].val_loss);
  }
  EXPECT_GE(r.history.back().val_loss, r.best_val_loss);
}

TEST(Trainer, BestEpochParamsAreKept) {
  Small s;
  s.cfg.max_epochs = 4;
  const auto r = train(s.cfg, s.ds, s.graph);
  Trainer t(s.cfg, s.ds, s.graph);
  EXPECT_DOUBLE_EQ(t.range_loss(r.params, r.split.val), r.best_val_loss);
  EXPECT_EQ(r.history[r.best_epoch - 1].val_loss, r.best_val_loss);
}

TEST(Trainer, LeaveOneOutHygiene) {
  Small s;
  s.cfg.max_epochs = 2;
  Recorder rec;
  const auto r = train(s.cfg, s.ds, s.graph, &rec);
  EXPECT_EQ(rec.fit_range, r.split.train);
  EXPECT_EQ(rec.fit_locations, s.ds.observed_indices());
  EXPECT_EQ(rec.neighbor_sets.size(), 8u * 3u);
  for (const auto& [held, ns] : rec.neighbor_sets) {
    EXPECT_FALSE(ns.contains(held));
    for (std::size_t i : ns.index) EXPECT_TRUE(s.ds.observed[i]);
  }
  std::size_t grad_batches = 0;
  for (std::size_t i = 0; i < rec.batches.size(); ++i) {
    const auto& [range, gradient] = rec.batches[i];
    if (gradient) {
      ++grad_batches;
      EXPECT_TRUE(r.split.train.contains(range));
    } else {
      EXPECT_TRUE(r.split.val.contains(range));
    }
    for (std::size_t l : rec.batch_targets[i]) {
      ASSERT_NE(l, static_cast<std::size_t>(-1));
      EXPECT_TRUE(s.ds.observed[l]);
    }
  }
  EXPECT_GT(grad_batches, 0u);
}

TEST(Trainer, UnobservedReadingsDoNotInfluenceTraining) {
  Small a, b;
  const std::size_t T = b.ds.num_steps();
  for (std::size_t l : b.ds.unobserved_indices()) {
    for (std::size_t t = 0; t < T; ++t) b.syn.dataset.readings[l * T + t] = -50.0;
  }
  EXPECT_TRUE(train(a.cfg, a.ds, a.graph).params.identical(train(b.cfg, b.ds, b.graph).params));
}

TEST(Trainer, UnresolvedConfigIsRejected) {
  Small s;
  TrainConfig c = s.cfg;
  c.model.time_slots = 5;
  EXPECT_THROW(Trainer(c, s.ds, s.graph), ConfigError);
  c = s.cfg;
  c.window = 40;
  EXPECT_THROW(Trainer(c, s.ds, s.graph), ConfigError);
}

TEST(Trainer, HistoryCsv) {
  std::vector<EpochRecord> h{{1, 0.5, 0.25, 1.0}};
  const std::string csv = history_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_loss,wall_seconds");
}

TEST(Checkpoint, RoundTripIsExact) {
  Small s;
  s.cfg.max_epochs = 2;
  const auto r = train(s.cfg, s.ds, s.graph);
  TempDir dir("ck");
  checkpoint_save(make_checkpoint(r), dir.file("m.json"));
  const Checkpoint back = checkpoint_load(dir.file("m.json"));
  EXPECT_TRUE(back.params.identical(r.params));
  EXPECT_EQ(back.params.hash(), r.params.hash());
  EXPECT_EQ(back.normalizer.mean, r.normalizer.mean);
  EXPECT_EQ(back.normalizer.std, r.normalizer.std);
  EXPECT_EQ(back.config.canonical(), r.config.canonical());
  EXPECT_EQ(checkpoint_to_string(back), checkpoint_to_string(make_checkpoint(r)));
}

TEST(Checkpoint, TruncatedFileReportsByteOffset) {
  Small s;
  s.cfg.max_epochs = 1;
  const std::string text = checkpoint_to_string(make_checkpoint(train(s.cfg, s.ds, s.graph)));
  try {
    checkpoint_from_string(text.substr(0, text.size() / 2), "m.json");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, CorruptionAndMismatchesAreErrors) {
  Small s;
  s.cfg.max_epochs = 1;
  const auto ck = make_checkpoint(train(s.cfg, s.ds, s.graph));
  auto j = nlohmann::json::parse(checkpoint_to_string(ck));

  auto tampered = j;
  tampered["params"][0]["data"][0] = 123.0;
  EXPECT_THROW(checkpoint_from_string(tampered.dump(), "x"), DataError);
  auto versioned = j;
  versioned["version"] = 2;
  EXPECT_THROW(checkpoint_from_string(versioned.dump(), "x"), DataError);
  auto reshaped = j;
  reshaped["params"][0]["shape"] = {1, 1};
  EXPECT_THROW(checkpoint_from_string(reshaped.dump(), "x"), DataError);

  TempDir dir("ckm");
  checkpoint_save(ck, dir.file("m.json"));
  EXPECT_THROW(checkpoint_load(dir.file("m.json"), std::vector<Relation>{Relation::SP}),
               ConfigError);
  EXPECT_NO_THROW(checkpoint_load(dir.file("m.json"), ck.config.model.relations));
  EXPECT_THROW(checkpoint_load(dir.file("absent.json")), DataError);
}

TEST(Evaluation, SeriesCoverTheWholeRange) {
  Small s;
  s.cfg.max_epochs = 1;
  const auto out = train_and_evaluate(s.cfg, s.ds, s.ds.observed_indices());
  const auto& split = out.trained.split;
  EXPECT_EQ(out.eval.prediction.shape(), (Shape{2, split.test.size(), 1}));
  for (double v : out.eval.prediction.data()) EXPECT_TRUE(std::isfinite(v));
  const auto idw = idw_report(s.ds, s.ds.observed_indices(), s.ds.unobserved_indices(),
                              split.test, s.cfg.model.top_k);
  EXPECT_EQ(idw.count, out.eval.report.count);
}
