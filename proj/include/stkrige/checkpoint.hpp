// SPDX-License-Identifier: Apache-2.0
#pragma once

// JSON checkpoints. Doubles are written in shortest round-trip form, so a
// save/load cycle reproduces every parameter bit for bit.

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stkrige/csv.hpp"
#include "stkrige/error.hpp"
#include "stkrige/model.hpp"
#include "stkrige/normalizer.hpp"
#include "stkrige/training.hpp"

namespace stkrige {

inline constexpr const char* kCheckpointFormat = "stkrige-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;  // model section fully resolved
  ModelParams params;
  Normalizer normalizer;
};

namespace detail {

inline nlohmann::json model_json(const ModelConfig& m) {
  std::vector<std::string> rels;
  for (Relation r : m.relations) rels.push_back(relation_name(r));
  return {{"relations", rels},
          {"channels", m.channels},
          {"hidden", m.hidden},
          {"embed", m.embed},
          {"time_slots", m.time_slots},
          {"top_k", m.top_k},
          {"difference", m.use_difference},
          {"input_gate", m.use_input_gate},
          {"forget_gate", m.use_forget_gate},
          {"context", m.use_context},
          {"fusion", fusion_name(m.fusion)}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.relations.clear();
  for (const auto& r : j.at("relations")) m.relations.push_back(parse_relation(r.get<std::string>()));
  m.channels = j.at("channels").get<std::size_t>();
  m.hidden = j.at("hidden").get<std::size_t>();
  m.embed = j.at("embed").get<std::size_t>();
  m.time_slots = j.at("time_slots").get<std::size_t>();
  m.top_k = j.at("top_k").get<std::size_t>();
  m.use_difference = j.at("difference").get<bool>();
  m.use_input_gate = j.at("input_gate").get<bool>();
  m.use_forget_gate = j.at("forget_gate").get<bool>();
  m.use_context = j.at("context").get<bool>();
  m.fusion = parse_fusion(j.at("fusion").get<std::string>());
  m.validate();
  return m;
}

}  // namespace detail

inline std::string checkpoint_to_string(const Checkpoint& ck) {
  using nlohmann::json;
  const TrainConfig& c = ck.config;
  json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["model"] = detail::model_json(ck.params.config());
  j["training"] = {{"window", c.window},         {"stride", c.effective_stride()},
                   {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
                   {"patience", c.patience},     {"lr", c.lr},
                   {"split", c.split},           {"seed", c.seed}};
  j["normalizer"] = {{"mean", ck.normalizer.mean}, {"std", ck.normalizer.std}};
  json params = json::array();
  for (std::size_t i = 0; i < ck.params.names().size(); ++i) {
    const Tensor& t = ck.params.tensors()[i];
    params.push_back({{"name", ck.params.names()[i]},
                      {"shape", t.shape()},
                      {"data", t.storage()}});
  }
  j["params"] = params;
  j["param_hash"] = ck.params.hash();
  return j.dump(1) + "\n";
}

inline void checkpoint_save(const Checkpoint& ck, const std::string& path) {
  csv::write_file(path, checkpoint_to_string(ck));
}

inline Checkpoint checkpoint_from_string(const std::string& text, const std::string& origin) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(origin + ": checkpoint parse error at byte " + std::to_string(e.byte) +
                    ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw DataError(origin + ": not a checkpoint file");
    }
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw DataError(origin + ": checkpoint version " + std::to_string(version) +
                      " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    ck.config.model = detail::model_from_json(j.at("model"));
    ck.config.auto_relations = false;
    const auto& tr = j.at("training");
    ck.config.window = tr.at("window").get<std::size_t>();
    ck.config.stride = tr.at("stride").get<std::size_t>();
    ck.config.batch_size = tr.at("batch_size").get<std::size_t>();
    ck.config.max_epochs = tr.at("max_epochs").get<std::size_t>();
    ck.config.patience = tr.at("patience").get<std::size_t>();
    ck.config.lr = tr.at("lr").get<double>();
    ck.config.split = tr.at("split").get<std::array<double, 3>>();
    ck.config.seed = tr.at("seed").get<std::uint64_t>();
    ck.config.validate();
    ck.normalizer.mean = j.at("normalizer").at("mean").get<std::vector<double>>();
    ck.normalizer.std = j.at("normalizer").at("std").get<std::vector<double>>();
    if (ck.normalizer.mean.size() != ck.config.model.channels ||
        ck.normalizer.std.size() != ck.config.model.channels) {
      throw DataError(origin + ": normalizer channel count differs from model");
    }
    std::map<std::string, Tensor> named;
    for (const auto& p : j.at("params")) {
      const auto name = p.at("name").get<std::string>();
      named[name] = Tensor(p.at("shape").get<Shape>(), p.at("data").get<std::vector<double>>());
    }
    ck.params = ModelParams::from_tensors(ck.config.model, named);
    if (j.contains("param_hash") && j.at("param_hash").get<std::uint64_t>() != ck.params.hash()) {
      throw DataError(origin + ": parameter hash mismatch (corrupt checkpoint)");
    }
    return ck;
  } catch (const json::exception& e) {
    throw DataError(origin + ": malformed checkpoint: " + e.what());
  } catch (const ShapeError& e) {
    throw DataError(origin + ": malformed checkpoint: " + e.what());
  }
}

/// Loads a checkpoint; with `requested` set, its relation set must equal the
/// trained one.
inline Checkpoint checkpoint_load(const std::string& path,
                                  const std::optional<std::vector<Relation>>& requested = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  Checkpoint ck = checkpoint_from_string(ss.str(), path);
  if (requested && *requested != ck.config.model.relations) {
    throw ConfigError("relation set mismatch: checkpoint trained with {" +
                      relation_list_str(ck.config.model.relations) + "}, requested {" +
                      relation_list_str(*requested) + "}");
  }
  return ck;
}

inline Checkpoint make_checkpoint(const TrainResult& r) {
  return {r.config, r.params, r.normalizer};
}

}  // namespace stkrige
