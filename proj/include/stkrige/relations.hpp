// SPDX-License-Identifier: Apache-2.0
#pragma once

// Heterogeneous location-relevance weights between observed locations and
// kriging targets, and per-target top-K neighbour selection.
//
// Weight matrices are indexed [i][l]: relevance of (observed) location i
// for (target) location l. Spatial proximity and functional similarity are
// symmetric; transition probability is directional and varies with the
// time-of-day bucket.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "stkrige/error.hpp"
#include "stkrige/tensor.hpp"

namespace stkrige {

enum class Relation { SP, FS, TP };

inline constexpr Relation kAllRelations[] = {Relation::SP, Relation::FS,
                                             Relation::TP};

inline std::string relation_name(Relation r) {
  switch (r) {
    case Relation::SP: return "SP";
    case Relation::FS: return "FS";
    case Relation::TP: return "TP";
  }
  return "?";
}

inline Relation parse_relation(const std::string& s) {
  if (s == "SP") return Relation::SP;
  if (s == "FS") return Relation::FS;
  if (s == "TP") return Relation::TP;
  throw ConfigError("unknown relation '" + s + "' (expected SP, FS or TP)");
}

/// Parses "SP,FS" style lists; result keeps the canonical SP, FS, TP order.
inline std::vector<Relation> parse_relation_list(const std::string& s) {
  std::vector<bool> seen(3, false);
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t next = s.find_first_of(",+ ", pos);
    if (next == std::string::npos) next = s.size();
    const std::string tok = s.substr(pos, next - pos);
    if (!tok.empty()) seen[static_cast<int>(parse_relation(tok))] = true;
    pos = next + 1;
  }
  std::vector<Relation> out;
  for (Relation r : kAllRelations) {
    if (seen[static_cast<int>(r)]) out.push_back(r);
  }
  if (out.empty()) throw ConfigError("empty relation set");
  return out;
}

inline std::string relation_list_str(const std::vector<Relation>& rs) {
  std::string out;
  for (std::size_t i = 0; i < rs.size(); ++i) {
    if (i) out += ',';
    out += relation_name(rs[i]);
  }
  return out;
}

/// Static geography of the sensor network.
struct SensorNetwork {
  std::vector<std::string> ids;
  std::vector<double> x, y;
  Tensor dist;                 // L x L
  std::optional<Tensor> poi;   // L x categories, non-negative counts
  std::size_t flow_buckets = 0;
  std::optional<Tensor> flows; // buckets x L x L, flows[t][from][to]

  std::size_t size() const { return ids.size(); }

  void validate() const {
    const std::size_t n = size();
    if (dist.shape() != Shape{n, n}) {
      throw DataError("distance matrix has shape " + shape_str(dist.shape()) +
                      ", expected " + shape_str(Shape{n, n}));
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (dist.at(i, i) != 0.0) {
        throw DataError("dist[" + ids[i] + "][" + ids[i] + "] must be 0");
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double d = dist.at(i, j);
        if (!(d >= 0.0) || !std::isfinite(d)) {
          throw DataError("dist[" + ids[i] + "][" + ids[j] +
                          "] must be finite and non-negative");
        }
        if (d != dist.at(j, i)) {
          throw DataError("dist is asymmetric at (" + ids[i] + ", " + ids[j] +
                          ")");
        }
      }
    }
    if (poi) {
      if (poi->rank() != 2 || poi->dim(0) != n) {
        throw DataError("POI matrix must have one row per location");
      }
      for (double v : poi->data()) {
        if (!(v >= 0.0) || v != std::floor(v)) {
          throw DataError("POI counts must be non-negative integers");
        }
      }
    }
    if (flows) {
      if (flows->shape() != Shape{flow_buckets, n, n}) {
        throw DataError("flow tensor has shape " + shape_str(flows->shape()));
      }
      for (double v : flows->data()) {
        if (!(v >= 0.0)) throw DataError("flow counts must be non-negative");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Relation weights

/// Population standard deviation of the distances over unordered pairs of
/// the given (observed) locations.
inline double distance_epsilon(const Tensor& dist,
                               const std::vector<std::size_t>& observed) {
  if (observed.size() < 2) {
    throw DataError("distance_epsilon: at least 2 observed locations required");
  }
  double sum = 0.0, sumsq = 0.0;
  std::size_t count = 0;
  for (std::size_t a = 0; a < observed.size(); ++a) {
    for (std::size_t b = a + 1; b < observed.size(); ++b) {
      const double d = dist.at(observed[a], observed[b]);
      sum += d;
      ++count;
    }
  }
  const double mean = sum / static_cast<double>(count);
  for (std::size_t a = 0; a < observed.size(); ++a) {
    for (std::size_t b = a + 1; b < observed.size(); ++b) {
      const double d = dist.at(observed[a], observed[b]) - mean;
      sumsq += d * d;
    }
  }
  const double eps = std::sqrt(sumsq / static_cast<double>(count));
  if (!(eps > 0.0)) {
    throw DataError(
        "distance_epsilon: observed distances have zero spread (degenerate "
        "geometry)");
  }
  return eps;
}

/// exp(-dist^2 / eps^2) elementwise.
inline Tensor spatial_proximity(const Tensor& dist, double eps) {
  if (!(eps > 0.0)) throw DataError("spatial_proximity: epsilon must be positive");
  Tensor out(dist.shape());
  for (std::size_t i = 0; i < dist.numel(); ++i) {
    const double r = dist[i] / eps;
    out[i] = std::exp(-r * r);
  }
  return out;
}

/// Pearson correlation of two equally long vectors; 0 when either has zero
/// variance.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  if (n == 0 || b.size() != n) throw ShapeError("pearson: length mismatch");
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// max(0, Pearson(F_i, F_l)) over POI rows.
inline Tensor functional_similarity(const Tensor& poi) {
  if (poi.rank() != 2) throw ShapeError("functional_similarity: POI must be a matrix");
  const std::size_t n = poi.dim(0), k = poi.dim(1);
  Tensor out(Shape{n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = i; l < n; ++l) {
      const double r = pearson(poi.data().subspan(i * k, k),
                               poi.data().subspan(l * k, k));
      out.at(i, l) = out.at(l, i) = std::max(0.0, r);
    }
  }
  return out;
}

/// flows[t][i][l] / sum_j flows[t][i][j]; rows with zero outflow give 0.
inline Tensor transition_probability(const Tensor& flows) {
  if (flows.rank() != 3 || flows.dim(1) != flows.dim(2)) {
    throw ShapeError("transition_probability: flows must be buckets x L x L");
  }
  const std::size_t buckets = flows.dim(0), n = flows.dim(1);
  Tensor out(flows.shape(), 0.0);
  for (std::size_t t = 0; t < buckets; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = (t * n + i) * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (flows[row + j] < 0.0) {
          throw DataError("transition_probability: negative flow count");
        }
        total += flows[row + j];
      }
      if (total <= 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[row + j] = flows[row + j] / total;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neighbour selection

/// Ordered top-K neighbour list of one target under one relation.
struct NeighborSet {
  std::vector<std::size_t> index;   // location indices, best first
  std::vector<double> rank_weight;  // weight used for the ranking

  std::size_t size() const { return index.size(); }
  bool contains(std::size_t i) const {
    return std::find(index.begin(), index.end(), i) != index.end();
  }
};

/// Selects the K largest `weight_toward_target` entries among `eligible`
/// (never the target itself, never excluded indices). Ties go to the lower
/// index. Throws KrigingError when no candidate has positive weight.
inline NeighborSet top_k_neighbors(std::span<const double> weight_toward_target,
                                   std::size_t k, std::size_t target,
                                   const std::vector<std::size_t>& eligible,
                                   const std::vector<std::size_t>& exclude = {}) {
  if (k < 1) throw ConfigError("top_k_neighbors: K must be at least 1");
  std::vector<std::size_t> cand;
  cand.reserve(eligible.size());
  for (std::size_t i : eligible) {
    if (i == target) continue;
    if (std::find(exclude.begin(), exclude.end(), i) != exclude.end()) continue;
    if (i >= weight_toward_target.size()) {
      throw ShapeError("top_k_neighbors: eligible index out of range");
    }
    cand.push_back(i);
  }
  std::sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
    const double wa = weight_toward_target[a], wb = weight_toward_target[b];
    if (wa != wb) return wa > wb;
    return a < b;
  });
  if (cand.empty() || !(weight_toward_target[cand.front()] > 0.0)) {
    throw KrigingError("no eligible neighbour with positive weight for target " +
                       std::to_string(target));
  }
  NeighborSet ns;
  const std::size_t take = std::min(k, cand.size());
  for (std::size_t j = 0; j < take; ++j) {
    ns.index.push_back(cand[j]);
    ns.rank_weight.push_back(weight_toward_target[cand[j]]);
  }
  return ns;
}

/**
 * Relation weights computed from a sensor network, restricted to a pool of
 * observed locations for epsilon and neighbour eligibility.
 *
 * Immutable after construction; safe to share across threads.
 */
class RelationGraph {
 public:
  RelationGraph() = default;

  RelationGraph(const SensorNetwork& net, std::vector<Relation> relations,
                std::vector<std::size_t> observed_pool)
      : relations_(std::move(relations)),
        pool_(std::move(observed_pool)),
        size_(net.size()) {
    std::sort(pool_.begin(), pool_.end());
    for (Relation r : relations_) {
      switch (r) {
        case Relation::SP:
          epsilon_ = distance_epsilon(net.dist, pool_);
          sp_ = spatial_proximity(net.dist, epsilon_);
          break;
        case Relation::FS:
          if (!net.poi) throw DataError("FS relation requires POI data");
          fs_ = functional_similarity(*net.poi);
          break;
        case Relation::TP: {
          if (!net.flows) throw DataError("TP relation requires flow data");
          tp_ = transition_probability(*net.flows);
          buckets_ = net.flow_buckets;
          tp_mean_ = Tensor(Shape{size_, size_}, 0.0);
          for (std::size_t t = 0; t < buckets_; ++t) {
            for (std::size_t i = 0; i < size_ * size_; ++i) {
              tp_mean_[i] += tp_[t * size_ * size_ + i];
            }
          }
          for (double& v : tp_mean_.storage()) v /= static_cast<double>(buckets_);
          break;
        }
      }
    }
  }

  const std::vector<Relation>& relations() const { return relations_; }
  const std::vector<std::size_t>& pool() const { return pool_; }
  double epsilon() const { return epsilon_; }
  std::size_t size() const { return size_; }
  std::size_t buckets() const { return buckets_; }

  bool has(Relation r) const {
    return std::find(relations_.begin(), relations_.end(), r) != relations_.end();
  }

  /// alpha of observed i toward target l at time-of-day bucket.
  double weight(Relation r, std::size_t i, std::size_t l,
                std::size_t bucket) const {
    switch (r) {
      case Relation::SP: return sp_.at(i, l);
      case Relation::FS: return fs_.at(i, l);
      case Relation::TP:
        return tp_[(bucket % buckets_ * size_ + i) * size_ + l];
    }
    return 0.0;
  }

  /// Time-invariant weight used to rank neighbours (bucket mean for TP).
  double ranking_weight(Relation r, std::size_t i, std::size_t l) const {
    if (r == Relation::TP) return tp_mean_.at(i, l);
    return weight(r, i, l, 0);
  }

  const Tensor& matrix(Relation r) const {
    switch (r) {
      case Relation::SP: return sp_;
      case Relation::FS: return fs_;
      case Relation::TP: return tp_;
    }
    return sp_;
  }

  NeighborSet neighbors(Relation r, std::size_t target, std::size_t k,
                        const std::vector<std::size_t>& exclude = {}) const {
    if (!has(r)) {
      throw ConfigError("relation " + relation_name(r) + " not in graph");
    }
    std::vector<double> col(size_);
    for (std::size_t i = 0; i < size_; ++i) col[i] = ranking_weight(r, i, target);
    try {
      return top_k_neighbors(col, k, target, pool_, exclude);
    } catch (const KrigingError&) {
      throw KrigingError("target " + std::to_string(target) +
                         " cannot be kriged under relation " + relation_name(r) +
                         ": no eligible neighbour with positive weight");
    }
  }

 private:
  std::vector<Relation> relations_;
  std::vector<std::size_t> pool_;
  std::size_t size_ = 0;
  std::size_t buckets_ = 1;
  double epsilon_ = 0.0;
  Tensor sp_, fs_, tp_, tp_mean_;
};

}  // namespace stkrige
