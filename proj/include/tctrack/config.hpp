#pragma once

// JSON run configuration.
//
// {
//   "model": "toy" | "full",
//   "seed": 0,
//   "epochs": 100, "freeze_epochs": 10, "batch_size": 124,
//   "curriculum": {"enabled": true, "boundaries": [33, 50], "lengths": [2, 3, 4]},
//   "lr": {"start": 0.005, "end": 0.0005, "momentum": 0.9},
//   "grad_clip_norm": 0,
//   "tracker": {"window_influence": 0.3},
//   "online": {"scheduling": "latest" | "fifo", "pairing": "frame_end" | "frame_arrival"}
// }
//
// Every key is optional; unknown keys are rejected.

#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "tctrack/online.hpp"
#include "tctrack/tracker.hpp"
#include "tctrack/training.hpp"

namespace tctrack {

using json = nlohmann::json;

enum class ModelPreset { Toy, Full };

struct RunConfig {
  ModelPreset preset = ModelPreset::Toy;
  std::uint64_t seed = 0;
  TrainConfig train;
  TrackerConfig tracker;
  OnlineOptions online;

  ModelConfig model() const {
    ModelConfig m = preset == ModelPreset::Toy ? ModelConfig::toy() : ModelConfig::full();
    m.seed = seed;
    return m;
  }
};

namespace detail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : obj.items())
    if (!allowed.count(k)) throw ConfigError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <class T>
void read_key(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + (where.empty() ? std::string(key) : where + "." + key) + "' has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
  using detail::read_key;
  RunConfig c;
  detail::reject_unknown(j,
                         {"model", "seed", "epochs", "freeze_epochs", "batch_size", "curriculum", "lr",
                          "grad_clip_norm", "tracker", "online"},
                         "");
  std::string preset = "toy";
  read_key(j, "model", preset, "");
  if (preset == "toy")
    c.preset = ModelPreset::Toy;
  else if (preset == "full")
    c.preset = ModelPreset::Full;
  else
    throw ConfigError("model must be 'toy' or 'full', got '" + preset + "'");

  read_key(j, "seed", c.seed, "");
  c.train.seed = c.seed;
  int epochs = c.train.lr.epochs;
  read_key(j, "epochs", epochs, "");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  c.train.lr.epochs = epochs;
  c.train.curriculum.total_epochs = epochs;
  read_key(j, "freeze_epochs", c.train.freeze_epochs, "");
  if (c.train.freeze_epochs < 0) throw ConfigError("freeze_epochs must be >= 0");
  read_key(j, "batch_size", c.train.lr.batch_size, "");
  if (c.train.lr.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  read_key(j, "grad_clip_norm", c.train.grad_clip_norm, "");
  if (c.train.grad_clip_norm < 0.0) throw ConfigError("grad_clip_norm must be >= 0");

  if (j.contains("curriculum")) {
    const json& cj = j.at("curriculum");
    detail::reject_unknown(cj, {"enabled", "boundaries", "lengths", "fixed_length"}, "curriculum");
    read_key(cj, "enabled", c.train.curriculum.enabled, "curriculum");
    read_key(cj, "boundaries", c.train.curriculum.boundaries, "curriculum");
    read_key(cj, "lengths", c.train.curriculum.lengths, "curriculum");
    read_key(cj, "fixed_length", c.train.curriculum.fixed_length, "curriculum");
  }
  c.train.curriculum.validate();

  if (j.contains("lr")) {
    const json& lj = j.at("lr");
    detail::reject_unknown(lj, {"start", "end", "momentum"}, "lr");
    read_key(lj, "start", c.train.lr.start, "lr");
    read_key(lj, "end", c.train.lr.end, "lr");
    read_key(lj, "momentum", c.train.lr.momentum, "lr");
  }
  if (!(c.train.lr.start > 0.0) || !(c.train.lr.end > 0.0)) throw ConfigError("learning rates must be > 0");
  if (c.train.lr.momentum < 0.0 || c.train.lr.momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");

  if (j.contains("tracker")) {
    const json& tj = j.at("tracker");
    detail::reject_unknown(tj, {"window_influence"}, "tracker");
    read_key(tj, "window_influence", c.tracker.window_influence, "tracker");
    if (c.tracker.window_influence < 0.0 || c.tracker.window_influence > 1.0)
      throw ConfigError("tracker.window_influence must be in [0, 1]");
  }

  if (j.contains("online")) {
    const json& oj = j.at("online");
    detail::reject_unknown(oj, {"scheduling", "pairing"}, "online");
    std::string s = "latest", p = "frame_end";
    read_key(oj, "scheduling", s, "online");
    read_key(oj, "pairing", p, "online");
    if (s == "latest")
      c.online.scheduling = Scheduling::LatestWithSkip;
    else if (s == "fifo")
      c.online.scheduling = Scheduling::Fifo;
    else
      throw ConfigError("online.scheduling must be 'latest' or 'fifo'");
    if (p == "frame_end")
      c.online.instant = PairingInstant::FrameEnd;
    else if (p == "frame_arrival")
      c.online.instant = PairingInstant::FrameArrival;
    else
      throw ConfigError("online.pairing must be 'frame_end' or 'frame_arrival'");
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return parse_config(j);
}

/// The effective configuration, in the same layout parse_config accepts.
inline json to_json(const RunConfig& c) {
  const auto& t = c.train;
  return {
      {"model", c.preset == ModelPreset::Toy ? "toy" : "full"},
      {"seed", c.seed},
      {"epochs", t.lr.epochs},
      {"freeze_epochs", t.freeze_epochs},
      {"batch_size", t.lr.batch_size},
      {"grad_clip_norm", t.grad_clip_norm},
      {"curriculum",
       {{"enabled", t.curriculum.enabled},
        {"boundaries", t.curriculum.boundaries},
        {"lengths", t.curriculum.lengths},
        {"fixed_length", t.curriculum.fixed_length}}},
      {"lr", {{"start", t.lr.start}, {"end", t.lr.end}, {"momentum", t.lr.momentum}}},
      {"tracker", {{"window_influence", c.tracker.window_influence}}},
      {"online",
       {{"scheduling", c.online.scheduling == Scheduling::Fifo ? "fifo" : "latest"},
        {"pairing", c.online.instant == PairingInstant::FrameEnd ? "frame_end" : "frame_arrival"}}},
  };
}

}  // namespace tctrack
