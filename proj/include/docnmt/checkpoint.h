#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "docnmt/train.h"
#include "docnmt/transformer.h"

namespace docnmt {

// Config files use the field names of the structs. Unknown keys are rejected
// with ConfigError; missing keys keep their defaults.
nlohmann::json to_json(const TransformerConfig& config);
nlohmann::json to_json(const TrainConfig& config);
TransformerConfig transformer_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Checkpoint layout:
//   docnmt-checkpoint 1
//   config <json on one line>
//   tensor <name> <rows> <cols> <offset>     (offset in floats into the data block)
//   ...
//   end
// followed by little-endian float32 data.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
// The text header only, for inspection.
std::string read_checkpoint_header(const std::filesystem::path& path);

void write_train_log(const std::vector<TrainLogEntry>& log, const std::filesystem::path& path);

}  // namespace docnmt
