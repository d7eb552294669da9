// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dataset directory layout (all files UTF-8 CSV with a header row):
//
//   meta.csv       steps_per_day,channels
//   locations.csv  id,x,y,is_observed
//   readings.csv   location_id,t,<one column per channel>
//   dist.csv       id,<id_1>,...,<id_L>   full symmetric matrix
//   poi.csv        id,<category columns>  (optional, enables FS)
//   flows.csv      t_of_day,from_id,to_id,count (optional, enables TP)

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "stkrige/csv.hpp"
#include "stkrige/error.hpp"
#include "stkrige/relations.hpp"
#include "stkrige/tensor.hpp"

namespace stkrige {

/// Half-open range of time steps [begin, end).
struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t t) const { return t >= begin && t < end; }
  bool contains(const Range& r) const { return r.begin >= begin && r.end <= end; }
  bool operator==(const Range&) const = default;
};

struct Dataset {
  SensorNetwork network;
  Tensor readings;  // locations x steps x channels; NaN where unrecorded
  std::vector<bool> observed;
  std::size_t steps_per_day = 24;
  std::vector<std::string> channel_names;
  std::string source;
  std::uint64_t checksum = 0;

  std::size_t num_locations() const { return network.size(); }
  std::size_t num_steps() const { return readings.rank() == 3 ? readings.dim(1) : 0; }
  std::size_t channels() const { return readings.rank() == 3 ? readings.dim(2) : 0; }

  double value(std::size_t loc, std::size_t t, std::size_t c) const {
    return readings[(loc * num_steps() + t) * channels() + c];
  }

  std::vector<std::size_t> observed_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < observed.size(); ++i) {
      if (observed[i]) out.push_back(i);
    }
    return out;
  }

  std::vector<std::size_t> unobserved_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < observed.size(); ++i) {
      if (!observed[i]) out.push_back(i);
    }
    return out;
  }

  std::size_t index_of(const std::string& id) const {
    auto it = std::find(network.ids.begin(), network.ids.end(), id);
    if (it == network.ids.end()) throw DataError("unknown location id '" + id + "'");
    return static_cast<std::size_t>(it - network.ids.begin());
  }

  /// SP always; FS iff POI data exists; TP iff flow data exists.
  std::vector<Relation> available_relations() const {
    std::vector<Relation> out{Relation::SP};
    if (network.poi) out.push_back(Relation::FS);
    if (network.flows) out.push_back(Relation::TP);
    return out;
  }

  bool has_ground_truth(std::size_t loc) const {
    for (std::size_t t = 0; t < num_steps(); ++t) {
      for (std::size_t c = 0; c < channels(); ++c) {
        if (std::isnan(value(loc, t, c))) return false;
      }
    }
    return true;
  }

  std::uint64_t compute_checksum() const {
    std::uint64_t h = hash_doubles(readings.data());
    h = hash_doubles(network.dist.data(), h);
    if (network.poi) h = hash_doubles(network.poi->data(), h);
    if (network.flows) h = hash_doubles(network.flows->data(), h);
    for (const auto& id : network.ids) h = hash_string(id, h);
    return h;
  }

  void validate() const {
    network.validate();
    const std::size_t L = num_locations();
    if (observed.size() != L || readings.rank() != 3 || readings.dim(0) != L) {
      throw DataError("readings/observed partition do not match location count");
    }
    std::size_t n_obs = 0;
    for (bool b : observed) n_obs += b ? 1 : 0;
    if (n_obs < 2) throw DataError("at least 2 observed locations required");
    if (L - n_obs < 1) throw DataError("at least 1 unobserved location required");
    if (steps_per_day < 1) throw DataError("steps_per_day must be positive");
    for (std::size_t l = 0; l < L; ++l) {
      if (!observed[l]) continue;
      for (std::size_t t = 0; t < num_steps(); ++t) {
        for (std::size_t c = 0; c < channels(); ++c) {
          if (!std::isfinite(value(l, t, c))) {
            throw DataError("observed location '" + network.ids[l] +
                            "' has a missing reading at t=" + std::to_string(t));
          }
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Loading

namespace detail {

inline std::unordered_map<std::string, std::size_t> id_index(
    const std::vector<std::string>& ids) {
  std::unordered_map<std::string, std::size_t> m;
  for (std::size_t i = 0; i < ids.size(); ++i) m.emplace(ids[i], i);
  return m;
}

inline std::size_t lookup(const std::unordered_map<std::string, std::size_t>& m,
                          const std::string& id, const std::string& where) {
  auto it = m.find(id);
  if (it == m.end()) throw DataError(where + ": unknown location id '" + id + "'");
  return it->second;
}

inline void require_header(const csv::Table& t,
                           const std::vector<std::string>& prefix) {
  if (t.header.size() < prefix.size() ||
      !std::equal(prefix.begin(), prefix.end(), t.header.begin())) {
    std::string want;
    for (const auto& p : prefix) want += (want.empty() ? "" : ",") + p;
    throw DataError(t.path + ": header must start with " + want);
  }
}

}  // namespace detail

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  for (const char* f : {"meta.csv", "locations.csv", "readings.csv", "dist.csv"}) {
    if (!fs::exists(root / f)) {
      throw DataError("dataset directory " + dir + " is missing " + f);
    }
  }
  Dataset ds;
  ds.source = "csv:" + dir;

  const auto meta = csv::read_table((root / "meta.csv").string());
  detail::require_header(meta, {"steps_per_day", "channels"});
  if (meta.rows.size() != 1) throw DataError(meta.path + ": expected one data row");
  ds.steps_per_day = static_cast<std::size_t>(meta.integer(0, 0));
  const auto channels = static_cast<std::size_t>(meta.integer(0, 1));
  if (ds.steps_per_day < 1 || channels < 1) {
    throw DataError(meta.path + ": steps_per_day and channels must be positive");
  }

  const auto locs = csv::read_table((root / "locations.csv").string());
  detail::require_header(locs, {"id", "x", "y", "is_observed"});
  for (std::size_t r = 0; r < locs.rows.size(); ++r) {
    const std::string& id = locs.rows[r][0];
    if (id.empty()) throw DataError(locs.where(r) + ": empty id");
    if (std::find(ds.network.ids.begin(), ds.network.ids.end(), id) !=
        ds.network.ids.end()) {
      throw DataError(locs.where(r) + ": duplicate id '" + id + "'");
    }
    ds.network.ids.push_back(id);
    ds.network.x.push_back(locs.number(r, 1));
    ds.network.y.push_back(locs.number(r, 2));
    const auto flag = locs.integer(r, 3);
    if (flag != 0 && flag != 1) throw DataError(locs.where(r) + ": is_observed must be 0 or 1");
    ds.observed.push_back(flag == 1);
  }
  const std::size_t L = ds.network.ids.size();
  const auto index = detail::id_index(ds.network.ids);

  // readings
  const auto rd = csv::read_table((root / "readings.csv").string());
  detail::require_header(rd, {"location_id", "t"});
  if (rd.header.size() != 2 + channels) {
    throw DataError(rd.path + ": expected " + std::to_string(channels) +
                    " channel columns per meta.csv");
  }
  ds.channel_names.assign(rd.header.begin() + 2, rd.header.end());
  std::size_t T = 0;
  for (std::size_t r = 0; r < rd.rows.size(); ++r) {
    const auto t = rd.integer(r, 1);
    if (t < 0) throw DataError(rd.where(r) + ": negative time step");
    T = std::max(T, static_cast<std::size_t>(t) + 1);
  }
  if (T == 0) throw DataError(rd.path + ": no readings");
  ds.readings = Tensor(Shape{L, T, channels},
                       std::numeric_limits<double>::quiet_NaN());
  std::vector<char> seen(L * T, 0);
  for (std::size_t r = 0; r < rd.rows.size(); ++r) {
    const std::size_t l = detail::lookup(index, rd.rows[r][0], rd.where(r));
    const auto t = static_cast<std::size_t>(rd.integer(r, 1));
    if (seen[l * T + t]) {
      throw DataError(rd.where(r) + ": duplicate reading for (" + rd.rows[r][0] +
                      ", " + std::to_string(t) + ")");
    }
    seen[l * T + t] = 1;
    for (std::size_t c = 0; c < channels; ++c) {
      ds.readings[(l * T + t) * channels + c] = rd.number(r, 2 + c);
    }
  }

  // distances
  const auto dt = csv::read_table((root / "dist.csv").string());
  if (dt.header.size() != L + 1 || dt.header[0] != "id") {
    throw DataError(dt.path + ": header must be id followed by all " +
                    std::to_string(L) + " location ids");
  }
  if (dt.rows.size() != L) {
    throw DataError(dt.path + ": expected " + std::to_string(L) + " rows");
  }
  std::vector<std::size_t> col_of(L);
  for (std::size_t c = 0; c < L; ++c) {
    col_of[c] = detail::lookup(index, dt.header[c + 1], dt.path + ":1");
  }
  ds.network.dist = Tensor(Shape{L, L}, 0.0);
  std::vector<char> row_seen(L, 0);
  for (std::size_t r = 0; r < L; ++r) {
    const std::size_t i = detail::lookup(index, dt.rows[r][0], dt.where(r));
    if (row_seen[i]) throw DataError(dt.where(r) + ": duplicate row");
    row_seen[i] = 1;
    for (std::size_t c = 0; c < L; ++c) {
      ds.network.dist.at(i, col_of[c]) = dt.number(r, c + 1);
    }
  }
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      if (ds.network.dist.at(i, j) != ds.network.dist.at(j, i)) {
        throw DataError(dt.path + ": asymmetric at (" + ds.network.ids[i] + ", " +
                        ds.network.ids[j] + ")");
      }
    }
  }

  if (fs::exists(root / "poi.csv")) {
    const auto pt = csv::read_table((root / "poi.csv").string());
    if (pt.header.size() < 2 || pt.header[0] != "id") {
      throw DataError(pt.path + ": header must be id followed by category columns");
    }
    const std::size_t K = pt.header.size() - 1;
    Tensor poi(Shape{L, K}, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t r = 0; r < pt.rows.size(); ++r) {
      const std::size_t i = detail::lookup(index, pt.rows[r][0], pt.where(r));
      for (std::size_t c = 0; c < K; ++c) poi.at(i, c) = pt.number(r, c + 1);
    }
    for (std::size_t i = 0; i < L; ++i) {
      if (std::isnan(poi.at(i, 0))) {
        throw DataError(pt.path + ": no POI row for '" + ds.network.ids[i] + "'");
      }
    }
    ds.network.poi = std::move(poi);
  }

  if (fs::exists(root / "flows.csv")) {
    const auto ft = csv::read_table((root / "flows.csv").string());
    detail::require_header(ft, {"t_of_day", "from_id", "to_id", "count"});
    const std::size_t B = ds.steps_per_day;
    Tensor flows(Shape{B, L, L}, 0.0);
    for (std::size_t r = 0; r < ft.rows.size(); ++r) {
      const auto b = ft.integer(r, 0);
      if (b < 0 || static_cast<std::size_t>(b) >= B) {
        throw DataError(ft.where(r) + ": t_of_day outside [0, steps_per_day)");
      }
      const std::size_t from = detail::lookup(index, ft.rows[r][1], ft.where(r));
      const std::size_t to = detail::lookup(index, ft.rows[r][2], ft.where(r));
      const double count = ft.number(r, 3);
      if (!(count >= 0.0)) throw DataError(ft.where(r) + ": negative flow count");
      flows[(static_cast<std::size_t>(b) * L + from) * L + to] += count;
    }
    ds.network.flow_buckets = B;
    ds.network.flows = std::move(flows);
  }

  ds.validate();
  ds.checksum = ds.compute_checksum();
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  ds.validate();
  fs::create_directories(dir);
  const fs::path root(dir);
  const std::size_t L = ds.num_locations(), T = ds.num_steps(), C = ds.channels();
  const auto& ids = ds.network.ids;
  using csv::format_double;

  {
    std::ostringstream os;
    os << "steps_per_day,channels\n" << ds.steps_per_day << ',' << C << '\n';
    csv::write_file((root / "meta.csv").string(), os.str());
  }
  {
    std::ostringstream os;
    os << "id,x,y,is_observed\n";
    for (std::size_t i = 0; i < L; ++i) {
      os << ids[i] << ',' << format_double(ds.network.x[i]) << ','
         << format_double(ds.network.y[i]) << ',' << (ds.observed[i] ? 1 : 0) << '\n';
    }
    csv::write_file((root / "locations.csv").string(), os.str());
  }
  {
    std::ostringstream os;
    os << "location_id,t";
    for (std::size_t c = 0; c < C; ++c) {
      os << ',' << (c < ds.channel_names.size() ? ds.channel_names[c]
                                                : "value_" + std::to_string(c));
    }
    os << '\n';
    for (std::size_t l = 0; l < L; ++l) {
      if (!ds.observed[l] && !ds.has_ground_truth(l)) {
        bool any = false;
        for (std::size_t t = 0; t < T && !any; ++t) {
          for (std::size_t c = 0; c < C; ++c) any = any || !std::isnan(ds.value(l, t, c));
        }
        if (!any) continue;
      }
      for (std::size_t t = 0; t < T; ++t) {
        os << ids[l] << ',' << t;
        for (std::size_t c = 0; c < C; ++c) os << ',' << format_double(ds.value(l, t, c));
        os << '\n';
      }
    }
    csv::write_file((root / "readings.csv").string(), os.str());
  }
  {
    std::ostringstream os;
    os << "id";
    for (const auto& id : ids) os << ',' << id;
    os << '\n';
    for (std::size_t i = 0; i < L; ++i) {
      os << ids[i];
      for (std::size_t j = 0; j < L; ++j) os << ',' << format_double(ds.network.dist.at(i, j));
      os << '\n';
    }
    csv::write_file((root / "dist.csv").string(), os.str());
  }
  if (ds.network.poi) {
    const Tensor& poi = *ds.network.poi;
    std::ostringstream os;
    os << "id";
    for (std::size_t c = 0; c < poi.dim(1); ++c) os << ",poi_" << c;
    os << '\n';
    for (std::size_t i = 0; i < L; ++i) {
      os << ids[i];
      for (std::size_t c = 0; c < poi.dim(1); ++c) os << ',' << format_double(poi.at(i, c));
      os << '\n';
    }
    csv::write_file((root / "poi.csv").string(), os.str());
  }
  if (ds.network.flows) {
    const Tensor& f = *ds.network.flows;
    std::ostringstream os;
    os << "t_of_day,from_id,to_id,count\n";
    for (std::size_t b = 0; b < ds.network.flow_buckets; ++b) {
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
          const double v = f[(b * L + i) * L + j];
          if (v != 0.0) os << b << ',' << ids[i] << ',' << ids[j] << ',' << format_double(v) << '\n';
        }
      }
    }
    csv::write_file((root / "flows.csv").string(), os.str());
  }
}

// ---------------------------------------------------------------------------
// Windowing

struct Window {
  std::size_t start = 0;
  std::size_t length = 0;
  std::vector<std::size_t> time_of_day;  // one slot per step

  Range range() const { return {start, start + length}; }
};

inline Window make_window(std::size_t start, std::size_t length,
                          std::size_t steps_per_day) {
  Window w{start, length, {}};
  w.time_of_day.reserve(length);
  for (std::size_t t = start; t < start + length; ++t) {
    w.time_of_day.push_back(t % steps_per_day);
  }
  return w;
}

/// Windows [a, a+P) for a = begin, begin+stride, ... that fit in the range.
inline std::vector<Window> window_iter(const Range& range, std::size_t P,
                                       std::size_t stride,
                                       std::size_t steps_per_day) {
  if (P == 0 || stride == 0) throw ConfigError("window length and stride must be positive");
  if (P > range.size()) {
    throw ConfigError("window length " + std::to_string(P) +
                      " exceeds range length " + std::to_string(range.size()));
  }
  std::vector<Window> out;
  for (std::size_t a = range.begin; a + P <= range.end; a += stride) {
    out.push_back(make_window(a, P, steps_per_day));
  }
  return out;
}

/// Non-overlapping windows covering every step of the range; when the range
/// length is not a multiple of P the last window is aligned to the end and
/// overlaps its predecessor. `first_new` tells how many leading steps of
/// each window were already covered.
struct CoveringWindow {
  Window window;
  std::size_t first_new = 0;
};

inline std::vector<CoveringWindow> covering_windows(const Range& range,
                                                    std::size_t P,
                                                    std::size_t steps_per_day) {
  std::vector<CoveringWindow> out;
  for (const auto& w : window_iter(range, P, P, steps_per_day)) out.push_back({w, 0});
  const std::size_t covered = out.empty() ? range.begin : out.back().window.range().end;
  if (covered < range.end) {
    const std::size_t start = range.end - P;
    out.push_back({make_window(start, P, steps_per_day), covered - start});
  }
  return out;
}

}  // namespace stkrige
