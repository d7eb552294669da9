#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "stkrige/random.hpp"
#include "stkrige/relations.hpp"

using namespace stkrige;

namespace {

Tensor four_point_distances() {
  return Tensor::matrix(4, 4, {0, 1, 2, 4, 1, 0, 1.5, 3, 2, 1.5, 0, 2.5, 4, 3, 2.5, 0});
}

SensorNetwork four_point_network() {
  SensorNetwork net;
  net.ids = {"a", "b", "c", "d"};
  net.x = {0, 1, 2, 4};
  net.y = {0, 0, 0, 0};
  net.dist = four_point_distances();
  return net;
}

}  // namespace

TEST(Relations, ParseNames) {
  EXPECT_EQ(parse_relation("TP"), Relation::TP);
  EXPECT_THROW(parse_relation("XX"), ConfigError);
  const auto rs = parse_relation_list("SP,TP");
  ASSERT_EQ(rs.size(), 2u);
  EXPECT_EQ(relation_list_str(rs), "SP,TP");
}

TEST(Relations, EpsilonIsStdOfObservedDistances) {
  EXPECT_NEAR(distance_epsilon(four_point_distances(), {0, 1, 2}), 0.408248290463863, 1e-15);
  EXPECT_THROW(distance_epsilon(four_point_distances(), {0}), Error);
}

TEST(Relations, SpatialProximityValues) {
  const double eps = distance_epsilon(four_point_distances(), {0, 1, 2});
  const Tensor sp = spatial_proximity(four_point_distances(), eps);
  EXPECT_EQ(sp.at(0, 0), 1.0);
  EXPECT_NEAR(sp.at(0, 3) / 2.031092662734811e-42, 1.0, 1e-12);
  EXPECT_NEAR(sp.at(1, 2), 1.3709590863840842e-06, 1e-18);
  EXPECT_EQ(sp.at(1, 2), sp.at(2, 1));
}

TEST(Relations, SpatialProximityAtEpsilonIsInverseE) {
  const double eps = 1.7;
  const Tensor d = Tensor::matrix(2, 2, {0, eps, eps, 0});
  EXPECT_NEAR(spatial_proximity(d, eps).at(0, 1), std::exp(-1.0), 1e-12);
}

TEST(Relations, PearsonReference) {
  const std::vector<double> a{1, 3, 0, 2, 5}, b{2, 1, 4, 0, 3}, c{4, 0, 1, 1, 2}, d{2, 3, 1, 2, 6};
  EXPECT_NEAR(pearson(a, b), -0.16439898730535726, 1e-15);
  EXPECT_NEAR(pearson(a, c), -0.1371182340382122, 1e-15);
  EXPECT_NEAR(pearson(a, d), 0.9594594594594593, 1e-15);
}

TEST(Relations, FunctionalSimilarityClampsNegatives) {
  const Tensor poi = Tensor::matrix(3, 5, {1, 3, 0, 2, 5, 2, 1, 4, 0, 3, 2, 3, 1, 2, 6});
  const Tensor fs = functional_similarity(poi);
  EXPECT_EQ(fs.at(0, 1), 0.0);
  EXPECT_NEAR(fs.at(0, 2), 0.9594594594594593, 1e-15);
  EXPECT_NEAR(fs.at(0, 0), 1.0, 1e-15);
}

TEST(Relations, FunctionalSimilarityExtremes) {
  // identical non-constant profiles give 1, mirrored ones 0
  const Tensor poi = Tensor::matrix(3, 3, {1, 2, 3, 1, 2, 3, 3, 2, 1});
  const Tensor fs = functional_similarity(poi);
  EXPECT_NEAR(fs.at(0, 1), 1.0, 1e-12);
  EXPECT_EQ(fs.at(0, 2), 0.0);
}

TEST(Relations, FunctionalSimilarityConstantProfileIsZero) {
  const Tensor poi = Tensor::matrix(2, 3, {2, 2, 2, 1, 2, 3});
  const Tensor fs = functional_similarity(poi);
  EXPECT_EQ(fs.at(0, 1), 0.0);
  EXPECT_TRUE(std::isfinite(fs.at(0, 0)));
}

TEST(Relations, TransitionProbabilityRows) {
  const Tensor flows(Shape{1, 3, 3}, std::vector<double>{0, 3, 1, 2, 0, 2, 0, 0, 0});
  const Tensor tp = transition_probability(flows);
  const double expect[] = {0, 0.75, 0.25, 0.5, 0, 0.5, 0, 0, 0};
  for (int i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(tp[i], expect[i]);
  EXPECT_THROW(transition_probability(Tensor(Shape{3, 3}, 0.0)), ShapeError);
}

TEST(Relations, RandomMatricesStayInRange) {
  Rng rng(21);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 6, b = 3;
    Tensor flows(Shape{b, n, n}, 0.0);
    for (double& v : flows.storage()) v = rng.uniform() < 0.3 ? 0.0 : std::floor(rng.uniform(0, 9));
    const Tensor tp = transition_probability(flows);
    for (std::size_t t = 0; t < b; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double v = tp[(t * n + i) * n + j];
          EXPECT_GE(v, 0.0);
          row += v;
        }
        EXPECT_LE(row, 1.0 + 1e-12);
      }
    }
    Tensor poi(Shape{n, 5}, 0.0);
    for (double& v : poi.storage()) v = std::floor(rng.uniform(0, 6));
    const Tensor fs = functional_similarity(poi);
    for (double v : fs.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0 + 1e-12);
    }
    Tensor pos(Shape{n, 2}, 0.0);
    for (double& v : pos.storage()) v = rng.uniform(0, 5);
    Tensor dist(Shape{n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        dist.at(i, j) = std::hypot(pos.at(i, 0) - pos.at(j, 0), pos.at(i, 1) - pos.at(j, 1));
      }
    }
    const Tensor sp = spatial_proximity(dist, distance_epsilon(dist, {0, 1, 2, 3, 4, 5}));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GE(sp.at(i, j), 0.0);
        EXPECT_LE(sp.at(i, j), 1.0);
        EXPECT_EQ(sp.at(i, j), sp.at(j, i));
      }
    }
  }
}

TEST(Neighbors, TopKOrderingAndTies) {
  const std::vector<double> w{0.5, 0.9, 0.5, 0.1, 1.0};
  const auto ns = top_k_neighbors(w, 3, 4, {0, 1, 2, 3, 4});
  ASSERT_EQ(ns.size(), 3u);
  EXPECT_EQ(ns.index[0], 1u);
  EXPECT_EQ(ns.index[1], 0u);  // tie with 2 goes to the lower index
  EXPECT_EQ(ns.index[2], 2u);
  EXPECT_FALSE(ns.contains(4));
}

TEST(Neighbors, ExclusionAndShortPools) {
  const std::vector<double> w{0.5, 0.9, 0.5, 0.1, 1.0};
  const auto ns = top_k_neighbors(w, 10, 0, {0, 1, 2, 3}, {1});
  ASSERT_EQ(ns.size(), 2u);
  EXPECT_EQ(ns.index[0], 2u);
  EXPECT_EQ(ns.index[1], 3u);
  EXPECT_THROW(top_k_neighbors(w, 0, 0, {1}), ConfigError);
}

TEST(Neighbors, AllZeroWeightsCannotBeKriged) {
  const std::vector<double> w{0.0, 0.0, 0.0};
  EXPECT_THROW(top_k_neighbors(w, 2, 0, {0, 1, 2}), KrigingError);
}

TEST(RelationGraph, NeighboursComeFromThePool) {
  const SensorNetwork net = four_point_network();
  const RelationGraph g(net, {Relation::SP}, {0, 1, 3});
  const auto ns = g.neighbors(Relation::SP, 2, 3, {});
  for (std::size_t i : ns.index) EXPECT_NE(i, 2u);
  EXPECT_EQ(ns.index.front(), 1u);
  const auto held = g.neighbors(Relation::SP, 1, 3, {});
  EXPECT_FALSE(held.contains(1));
  EXPECT_FALSE(held.contains(2));
}

TEST(RelationGraph, MissingSideDataIsAnError) {
  const SensorNetwork net = four_point_network();
  EXPECT_THROW(RelationGraph(net, {Relation::FS}, {0, 1, 2}), DataError);
  EXPECT_THROW(RelationGraph(net, {Relation::TP}, {0, 1, 2}), DataError);
}

TEST(RelationGraph, TransitionRankingUsesTheBucketMean) {
  SensorNetwork net = four_point_network();
  net.flow_buckets = 2;
  Tensor f(Shape{2, 4, 4}, 0.0);
  // into location 3: from 0 only in bucket 0, from 1 in both buckets
  f[(0 * 4 + 0) * 4 + 3] = 1;
  f[(0 * 4 + 1) * 4 + 3] = 1;
  f[(0 * 4 + 1) * 4 + 2] = 1;
  f[(1 * 4 + 1) * 4 + 3] = 1;
  net.flows = f;
  const RelationGraph g(net, {Relation::TP}, {0, 1, 2});
  EXPECT_EQ(g.weight(Relation::TP, 0, 3, 0), 1.0);
  EXPECT_EQ(g.weight(Relation::TP, 0, 3, 1), 0.0);
  EXPECT_EQ(g.weight(Relation::TP, 1, 3, 1), 1.0);
  EXPECT_DOUBLE_EQ(g.ranking_weight(Relation::TP, 0, 3), 0.5);
  EXPECT_DOUBLE_EQ(g.ranking_weight(Relation::TP, 1, 3), 0.75);
  EXPECT_EQ(g.neighbors(Relation::TP, 3, 1, {}).index.front(), 1u);
}

TEST(RelationGraph, SyntheticGraphsHaveNoSelfNeighbours) {
  const auto syn = generate_synthetic(fixture::small_spec());
  const auto& ds = syn.dataset;
  const RelationGraph g(ds.network, {Relation::SP, Relation::FS, Relation::TP},
                        ds.observed_indices());
  for (std::size_t l = 0; l < ds.num_locations(); ++l) {
    for (Relation r : g.relations()) {
      const auto ns = g.neighbors(r, l, 4, {});
      EXPECT_FALSE(ns.contains(l));
      for (std::size_t i : ns.index) EXPECT_TRUE(ds.observed[i]);
    }
  }
}
