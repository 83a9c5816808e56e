#pragma once

#include "sadkit/losses.hpp"
#include "sadkit/model.hpp"
#include "sadkit/synth.hpp"
#include "sadkit/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace sadkit {

using Json = nlohmann::json;

/// Dataset locations and the sizes used when generating them.
struct DataConfig {
  std::string train_dir = "data/train";
  std::string val_dir = "data/val";
  std::size_t train_count = 500;
  std::size_t val_count = 100;
  std::uint64_t seed = 2024;
  int train_label_width = 0;  // dilate training labels to this width; 0 keeps them
};

/// Everything a run needs, as one JSON document.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SadConfig sad;
  LossWeights loss;
  SynthConfig synth;
  DataConfig data;
  std::vector<int> deep_supervision_blocks{2, 3, 4};  // used in deep_supervision mode
  std::vector<PathSet> ablation_path_sets{{{2, 3}, {3, 4}}, {{2, 4}, {3, 4}}, {{1, 2}}};
};

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);

Json to_json(const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(const Json& j);

/// Applies "dotted.key=value" to a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
void apply_override(Json& doc, const std::string& assignment);

}  // namespace sadkit
