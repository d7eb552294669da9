#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fixtures.hpp"
#include "stkrige/csv.hpp"
#include "stkrige/dataset.hpp"
#include "stkrige/normalizer.hpp"
#include "stkrige/synthetic.hpp"
#include "stkrige/training.hpp"

using namespace stkrige;
using stkrige::fixture::TempDir;

namespace {

/// Three locations (two observed), four steps, one channel.
void write_minimal(const TempDir& dir, const std::string& dist_body) {
  csv::write_file(dir.file("meta.csv"), "steps_per_day,channels\n2,1\n");
  csv::write_file(dir.file("locations.csv"),
                  "id,x,y,is_observed\na,0,0,1\nb,1,0,1\nc,2,0,0\n");
  std::string rd = "location_id,t,value\n";
  for (const char* id : {"a", "b"}) {
    for (int t = 0; t < 4; ++t) rd += std::string(id) + "," + std::to_string(t) + "," + std::to_string(t + 1) + "\n";
  }
  csv::write_file(dir.file("readings.csv"), rd);
  csv::write_file(dir.file("dist.csv"), "id,a,b,c\n" + dist_body);
}

const char* kSymmetric = "a,0,1,2\nb,1,0,1\nc,2,1,0\n";

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Csv, SplitTrimsFields) {
  const auto f = csv::split(" a , b,,c\r");
  ASSERT_EQ(f.size(), 4u);
  EXPECT_EQ(f[0], "a");
  EXPECT_EQ(f[2], "");
  EXPECT_EQ(f[3], "c");
}

TEST(Csv, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.125}) {
    EXPECT_EQ(std::stod(csv::format_double(v)), v);
  }
  EXPECT_EQ(csv::format_double(std::nan("")), "nan");
}

TEST(Csv, RaggedRowNamesItsLine) {
  TempDir dir("csv");
  csv::write_file(dir.file("t.csv"), "a,b\n1,2\n3\n");
  EXPECT_NE(message_of([&] { csv::read_table(dir.file("t.csv")); }).find("t.csv:3"),
            std::string::npos);
}

TEST(Dataset, LoadsMinimalDirectory) {
  TempDir dir("min");
  write_minimal(dir, kSymmetric);
  const Dataset ds = load_dataset(dir.str());
  EXPECT_EQ(ds.num_locations(), 3u);
  EXPECT_EQ(ds.num_steps(), 4u);
  EXPECT_EQ(ds.channels(), 1u);
  EXPECT_EQ(ds.value(1, 2, 0), 3.0);
  EXPECT_TRUE(std::isnan(ds.value(2, 0, 0)));
  EXPECT_FALSE(ds.has_ground_truth(2));
  EXPECT_EQ(ds.observed_indices(), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(ds.unobserved_indices(), (std::vector<std::size_t>{2}));
  EXPECT_EQ(ds.available_relations(), (std::vector<Relation>{Relation::SP}));
}

TEST(Dataset, PoiFileEnablesFunctionalSimilarity) {
  TempDir dir("poi");
  write_minimal(dir, kSymmetric);
  csv::write_file(dir.file("poi.csv"), "id,shops,parks\na,1,2\nb,3,0\nc,0,4\n");
  const Dataset ds = load_dataset(dir.str());
  EXPECT_EQ(ds.available_relations(), (std::vector<Relation>{Relation::SP, Relation::FS}));
}

TEST(Dataset, AsymmetricDistanceNamesTheCell) {
  TempDir dir("asym");
  write_minimal(dir, "a,0,1,2\nb,1,0,1\nc,2.5,1,0\n");
  const std::string msg = message_of([&] { load_dataset(dir.str()); });
  EXPECT_NE(msg.find("asymmetric"), std::string::npos) << msg;
  EXPECT_NE(msg.find("(a, c)"), std::string::npos) << msg;
}

TEST(Dataset, MissingFileIsNamed) {
  TempDir dir("missing");
  write_minimal(dir, kSymmetric);
  std::filesystem::remove(dir.file("dist.csv"));
  EXPECT_NE(message_of([&] { load_dataset(dir.str()); }).find("dist.csv"), std::string::npos);
}

TEST(Dataset, UnknownIdInReadingsIsRejected) {
  TempDir dir("unknown");
  write_minimal(dir, kSymmetric);
  csv::write_file(dir.file("readings.csv"), "location_id,t,value\na,0,1\nzz,0,1\n");
  const std::string msg = message_of([&] { load_dataset(dir.str()); });
  EXPECT_NE(msg.find("zz"), std::string::npos) << msg;
  EXPECT_NE(msg.find("readings.csv:3"), std::string::npos) << msg;
}

TEST(Dataset, FlowBucketOutOfRangeIsRejected) {
  TempDir dir("flows");
  write_minimal(dir, kSymmetric);
  csv::write_file(dir.file("flows.csv"), "t_of_day,from_id,to_id,count\n5,a,b,3\n");
  EXPECT_THROW(load_dataset(dir.str()), DataError);
}

TEST(Dataset, WriteLoadRoundTrip) {
  const auto syn = generate_synthetic(fixture::small_spec());
  TempDir dir("rt");
  write_dataset(syn.dataset, dir.str());
  const Dataset back = load_dataset(dir.str());
  EXPECT_EQ(back.network.ids, syn.dataset.network.ids);
  EXPECT_EQ(back.observed, syn.dataset.observed);
  EXPECT_TRUE(back.readings.identical(syn.dataset.readings));
  EXPECT_TRUE(back.network.dist.identical(syn.dataset.network.dist));
  EXPECT_TRUE(back.network.poi->identical(*syn.dataset.network.poi));
  EXPECT_TRUE(back.network.flows->identical(*syn.dataset.network.flows));
  EXPECT_EQ(back.checksum, syn.dataset.compute_checksum());
}

TEST(Windows, IteratorExamples) {
  const auto w = window_iter(Range{0, 10}, 4, 3, 24);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(w[0].start, 0u);
  EXPECT_EQ(w[2].start, 6u);
  EXPECT_EQ(w[2].range().end, 10u);
  const auto day = window_iter(Range{22, 26}, 4, 4, 24);
  ASSERT_EQ(day.size(), 1u);
  EXPECT_EQ(day[0].time_of_day, (std::vector<std::size_t>{22, 23, 0, 1}));
  EXPECT_THROW(window_iter(Range{0, 3}, 4, 1, 24), ConfigError);
  EXPECT_THROW(window_iter(Range{0, 8}, 4, 0, 24), ConfigError);
}

TEST(Windows, CoveringWindowsTouchEveryStepOnce) {
  const auto cw = covering_windows(Range{5, 15}, 4, 24);
  ASSERT_EQ(cw.size(), 3u);
  EXPECT_EQ(cw[2].window.start, 11u);
  EXPECT_EQ(cw[2].first_new, 2u);
  std::vector<int> hits(10, 0);
  for (const auto& c : cw) {
    for (std::size_t t = c.first_new; t < c.window.length; ++t) ++hits[c.window.start + t - 5];
  }
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Normalizer, TwoValueExample) {
  TempDir dir("norm");
  write_minimal(dir, kSymmetric);
  Dataset ds = load_dataset(dir.str());
  // step 0 holds {0, 2} across the two observed locations
  ds.readings[0] = 0.0;
  ds.readings[4] = 2.0;  // b at t=0
  const Normalizer m = fit_normalizer(ds, Range{0, 1}, {0, 1});
  EXPECT_EQ(m.mean[0], 1.0);
  EXPECT_EQ(m.std[0], 1.0);
  EXPECT_EQ(m.apply(3.0, 0), 2.0);
  EXPECT_EQ(m.invert(2.0, 0), 3.0);
}

TEST(Normalizer, ConstantChannelIsAnError) {
  TempDir dir("const");
  write_minimal(dir, kSymmetric);
  const Dataset ds = load_dataset(dir.str());
  EXPECT_THROW(fit_normalizer(ds, Range{0, 1}, {0, 1}), DataError);
  EXPECT_THROW(fit_normalizer(ds, Range{0, 0}, {0, 1}), DataError);
}

TEST(Split, HundredStepExample) {
  const auto s = chronological_split(100, {0.56, 0.14, 0.30}, 10);
  EXPECT_EQ(s.train, (Range{0, 56}));
  EXPECT_EQ(s.val, (Range{56, 70}));
  EXPECT_EQ(s.test, (Range{70, 100}));
}

TEST(Split, WindowLongerThanAPartIsAnError) {
  // 20 steps: validation holds 3 steps, test 6
  EXPECT_THROW(chronological_split(20, {0.56, 0.14, 0.30}, 24), ConfigError);
  EXPECT_THROW(chronological_split(100, {0.5, 0.3, 0.3}, 1), ConfigError);
  EXPECT_THROW(chronological_split(100, {0.7, 0.3, 0.0}, 1), ConfigError);
}

TEST(Split, PartsAreContiguousAndCoverTheSeries) {
  for (std::size_t T = 30; T < 400; T += 7) {
    const auto s = chronological_split(T, {0.56, 0.14, 0.30}, 3);
    EXPECT_EQ(s.train.begin, 0u);
    EXPECT_EQ(s.train.end, s.val.begin);
    EXPECT_EQ(s.val.end, s.test.begin);
    EXPECT_EQ(s.test.end, T);
  }
}

TEST(Synthetic, SameSeedSameData) {
  const auto a = generate_synthetic(fixture::small_spec(5));
  const auto b = generate_synthetic(fixture::small_spec(5));
  const auto c = generate_synthetic(fixture::small_spec(6));
  EXPECT_TRUE(a.dataset.readings.identical(b.dataset.readings));
  EXPECT_FALSE(a.dataset.readings.identical(c.dataset.readings));
}

TEST(Synthetic, ShapeAndSideData) {
  const auto s = fixture::small_spec();
  const auto syn = generate_synthetic(s);
  const Dataset& ds = syn.dataset;
  EXPECT_EQ(ds.num_locations(), s.observed + s.unobserved);
  EXPECT_EQ(ds.num_steps(), s.steps);
  EXPECT_EQ(ds.observed_indices().size(), s.observed);
  EXPECT_EQ(ds.available_relations().size(), 3u);
  for (std::size_t l : ds.unobserved_indices()) EXPECT_TRUE(ds.has_ground_truth(l));
  EXPECT_NO_THROW(ds.validate());
}

TEST(Synthetic, NoiselessSeriesMatchTheirCleanSignal) {
  auto s = fixture::small_spec();
  s.noise_std = 0.0;
  const auto syn = generate_synthetic(s);
  std::vector<std::size_t> all(syn.dataset.num_locations());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  EXPECT_LT(oracle_rmse(syn.dataset, syn.truth, all, Range{0, s.steps}), 1e-12);
}

TEST(Synthetic, NoiseLevelShowsInOracleError) {
  auto s = fixture::small_spec();
  s.steps = 2000;
  s.noise_std = 0.05;
  const auto syn = generate_synthetic(s);
  const double e = oracle_rmse(syn.dataset, syn.truth, syn.dataset.observed_indices(),
                               Range{0, s.steps});
  EXPECT_NEAR(e, 0.05, 0.005);
}

TEST(Synthetic, InvalidSpecsAreRejected) {
  auto s = fixture::small_spec();
  s.k_true = s.observed;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
  s = fixture::small_spec();
  s.mix = {0, 0, 0};
  EXPECT_THROW(generate_synthetic(s), ConfigError);
}

TEST(Synthetic, SpecFileAndTruthDescriptor) {
  TempDir dir("spec");
  csv::write_file(dir.file("s.cfg"), "N = 6\nM = 2\nT = 48\nsteps_per_day = 12\nk_true = 2\n"
                                     "mix = 0.5, 0.5, 0\nseed = 4\n");
  const SynthSpec s = load_synth_spec(dir.file("s.cfg"));
  EXPECT_EQ(s.observed, 6u);
  EXPECT_EQ(s.mix[1], 0.5);
  const auto syn = generate_synthetic(s);
  write_synthetic(syn, dir.file("out"));
  EXPECT_TRUE(std::filesystem::exists(dir.file("out/truth.json")));
  EXPECT_EQ(load_dataset(dir.file("out")).num_locations(), 8u);
  csv::write_file(dir.file("bad.cfg"), "N = 6\nnoise = 1\n");
  EXPECT_THROW(load_synth_spec(dir.file("bad.cfg")), ConfigError);
}
