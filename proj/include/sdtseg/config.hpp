#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "sdtseg/common.hpp"
#include "sdtseg/synth.hpp"
#include "sdtseg/trainer.hpp"

namespace sdtseg {

// JSON run configuration. Unknown keys are rejected; missing keys take the
// documented defaults so a config file records exactly what was overridden.
struct RunConfig {
  std::string out_dir;
  TrainConfig train;
  SynthSpec synth;
  int images = 250;  // generated per run, split 80/20 train/val
};

namespace detail {

using json = nlohmann::json;

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw config_error(std::string("config: bad value for '") + key + "': " + e.what());
    }
  }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known,
                           const std::string& scope) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) {
        ok = true;
        break;
      }
    if (!ok) throw config_error("config: unknown key '" + scope + key + "'");
  }
}

inline VoidPolicy parse_void_policy(const std::string& s) {
  if (s == "background") return VoidPolicy::background;
  if (s == "exclude-from-loss") return VoidPolicy::exclude_from_loss;
  throw config_error("config: unknown void_policy '" + s + "'");
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw config_error("config: top-level document must be an object");
  detail::reject_unknown(j, {"out_dir", "train", "synth", "images"}, "");

  RunConfig cfg;
  detail::take(j, "out_dir", cfg.out_dir);
  detail::take(j, "images", cfg.images);
  if (cfg.images < 5) throw config_error("config: images must be >= 5");

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown(t,
                           {"epochs", "batch_size", "lr", "lr_milestones", "weight_decay",
                            "lambda", "clip", "crop", "seed", "balance", "trunk_width",
                            "void_policy"},
                           "train.");
    detail::take(t, "epochs", cfg.train.epochs);
    detail::take(t, "batch_size", cfg.train.batch_size);
    detail::take(t, "lr", cfg.train.lr);
    detail::take(t, "lr_milestones", cfg.train.lr_milestones);
    detail::take(t, "weight_decay", cfg.train.weight_decay);
    detail::take(t, "lambda", cfg.train.lambda);
    detail::take(t, "clip", cfg.train.clip);
    detail::take(t, "crop", cfg.train.crop);
    detail::take(t, "seed", cfg.train.seed);
    detail::take(t, "balance", cfg.train.balance);
    detail::take(t, "trunk_width", cfg.train.trunk_width);
    if (t.contains("void_policy"))
      cfg.train.void_policy = detail::parse_void_policy(t.at("void_policy").get<std::string>());
  }

  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    detail::reject_unknown(s,
                           {"image_size", "classes", "min_shapes", "max_shapes", "shape_kinds",
                            "noise_sigma", "seed"},
                           "synth.");
    detail::take(s, "image_size", cfg.synth.image_size);
    detail::take(s, "classes", cfg.synth.classes);
    detail::take(s, "min_shapes", cfg.synth.min_shapes);
    detail::take(s, "max_shapes", cfg.synth.max_shapes);
    detail::take(s, "noise_sigma", cfg.synth.noise_sigma);
    detail::take(s, "seed", cfg.synth.seed);
    if (s.contains("shape_kinds")) {
      cfg.synth.disks = false;
      cfg.synth.rectangles = false;
      for (const auto& kind : s.at("shape_kinds")) {
        const std::string k = kind.get<std::string>();
        if (k == "disk")
          cfg.synth.disks = true;
        else if (k == "rectangle")
          cfg.synth.rectangles = true;
        else
          throw config_error("config: unknown shape kind '" + k + "'");
      }
    }
  }

  try {
    cfg.train.validate();
    cfg.synth.validate();
  } catch (const std::invalid_argument& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  if (cfg.train.crop > cfg.synth.image_size)
    throw config_error("config: crop larger than synthetic image size");
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("config: malformed JSON: ") + e.what());
  }
  return parse_run_config(j);
}

}  // namespace sdtseg
