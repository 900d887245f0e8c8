#pragma once

#include <string>

#include "ordalign/synth.hpp"
#include "ordalign/train.hpp"

namespace ordalign {

// JSON config files: a "generate" block (GenConfig) and a "train" block
// (TrainConfig, including model, loss weights, and ablations). Unknown keys
// are config errors so typos fail fast; absent keys keep defaults.

TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);

struct FileConfig {
  GenConfig gen;
  TrainConfig train;
};

FileConfig load_config_file(const std::string& path);  // throws ConfigError / IoError

}  // namespace ordalign
