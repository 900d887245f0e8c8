#include "ordalign/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ordalign/model.hpp"

namespace ordalign {

using nlohmann::json;

namespace {

LossWeights weights_from_json(const json& j) {
  LossWeights w;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "bce") w.bce = it.value().get<double>();
      else if (k == "ml") w.ml = it.value().get<double>();
      else if (k == "mv") w.mv = it.value().get<double>();
      else if (k == "poe") w.poe = it.value().get<double>();
      else if (k == "reg") w.reg = it.value().get<double>();
      else if (k == "margin") w.margin = it.value().get<double>();
      else if (k == "triplets_per_batch") w.triplets_per_batch = it.value().get<int>();
      else throw ConfigError("loss weights: unknown key \"" + k + "\"");
    } catch (const json::exception& e) {
      throw ConfigError("loss weights: bad value for \"" + k + "\": " + e.what());
    }
  }
  return w;
}

AblationFlags ablations_from_json(const json& j) {
  AblationFlags a;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "disable_mv") a.disable_mv = it.value().get<bool>();
      else if (k == "disable_poe") a.disable_poe = it.value().get<bool>();
      else if (k == "disable_align") a.disable_align = it.value().get<bool>();
      else if (k == "disable_ml") a.disable_ml = it.value().get<bool>();
      else if (k == "stp_mode") a.stp_mode = it.value().get<bool>();
      else throw ConfigError("ablations: unknown key \"" + k + "\"");
    } catch (const json::exception& e) {
      throw ConfigError("ablations: bad value for \"" + k + "\": " + e.what());
    }
  }
  return a;
}

TrainConfig train_config_from_json_obj(const json& j) {
  TrainConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "lr") cfg.lr = it.value().get<double>();
      else if (k == "batch_size") cfg.batch_size = it.value().get<std::size_t>();
      else if (k == "lr_decay") cfg.lr_decay = it.value().get<double>();
      else if (k == "lr_patience") cfg.lr_patience = it.value().get<int>();
      else if (k == "early_stop_patience") cfg.early_stop_patience = it.value().get<int>();
      else if (k == "max_epochs") cfg.max_epochs = it.value().get<int>();
      else if (k == "seed") cfg.seed = it.value().get<std::uint64_t>();
      else if (k == "improve_threshold") cfg.improve_threshold = it.value().get<double>();
      else if (k == "augment") cfg.augment = it.value().get<bool>();
      else if (k == "bootstrap_iters") cfg.bootstrap_iters = it.value().get<int>();
      else if (k == "weights") cfg.weights = weights_from_json(it.value());
      else if (k == "ablations") cfg.ablations = ablations_from_json(it.value());
      else if (k == "model") cfg.model = model_config_from_json_text(it.value().dump());
      else throw ConfigError("train config: unknown key \"" + k + "\"");
    } catch (const json::exception& e) {
      throw ConfigError("train config: bad value for \"" + k + "\": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return train_config_from_json_obj(j);
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["lr"] = cfg.lr;
  j["batch_size"] = cfg.batch_size;
  j["lr_decay"] = cfg.lr_decay;
  j["lr_patience"] = cfg.lr_patience;
  j["early_stop_patience"] = cfg.early_stop_patience;
  j["max_epochs"] = cfg.max_epochs;
  j["seed"] = cfg.seed;
  j["improve_threshold"] = cfg.improve_threshold;
  j["augment"] = cfg.augment;
  j["bootstrap_iters"] = cfg.bootstrap_iters;
  j["weights"] = {{"bce", cfg.weights.bce},
                  {"ml", cfg.weights.ml},
                  {"mv", cfg.weights.mv},
                  {"poe", cfg.weights.poe},
                  {"reg", cfg.weights.reg},
                  {"margin", cfg.weights.margin},
                  {"triplets_per_batch", cfg.weights.triplets_per_batch}};
  j["ablations"] = {{"disable_mv", cfg.ablations.disable_mv},
                    {"disable_poe", cfg.ablations.disable_poe},
                    {"disable_align", cfg.ablations.disable_align},
                    {"disable_ml", cfg.ablations.disable_ml},
                    {"stp_mode", cfg.ablations.stp_mode}};
  j["model"] = json::parse(model_config_to_json_text(cfg.model));
  return j.dump(2);
}

FileConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  FileConfig fc;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "generate") fc.gen = gen_config_from_json(it.value().dump());
    else if (k == "train") fc.train = train_config_from_json_obj(it.value());
    else throw ConfigError("config: unknown top-level key \"" + k + "\"");
  }
  return fc;
}

}  // namespace ordalign
