#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace docnmt {

// A stage runs its steps in order inside one output directory. Step
// arguments may contain "{in:key}" (a resolved input path) and "{out:name}"
// (a file in the stage's output directory). Input values are file paths,
// relative to the config's directory, or "@stage/output" references to
// outputs of earlier stages.
struct Stage {
  std::string name;
  std::map<std::string, std::string> inputs;
  std::vector<std::vector<std::string>> steps;

  // Output names, in order of first appearance in the steps.
  std::vector<std::string> outputs() const;
};

struct Pipeline {
  std::filesystem::path workdir;   // relative to base_dir unless absolute
  std::filesystem::path base_dir;  // directory of the config file
  std::vector<Stage> stages;

  const Stage* find(std::string_view name) const;
};

// Throws ConfigError.
Pipeline parse_pipeline(const nlohmann::json& j, const std::filesystem::path& base_dir);
Pipeline load_pipeline(const std::filesystem::path& config_path);
nlohmann::json to_json(const Pipeline& pipeline);

struct CommandRunner {
  std::function<bool(const std::string& command)> knows;
  // Runs one step; throws on failure. Progress goes to `log`.
  std::function<void(const std::vector<std::string>& args, std::ostream& log)> run;
};

struct StageRecord {
  std::string name;
  std::string hash;
  std::filesystem::path dir;
  bool skipped = false;
};

// Validates everything up front (ConfigError naming the offending stage,
// reference or missing path), then runs stages in order. A stage whose
// content hash already has a completed output directory is skipped.
// Throws StageFailure with the captured log of the failing stage.
std::vector<StageRecord> run_pipeline(const Pipeline& pipeline, const CommandRunner& runner, std::ostream& log);

// Content hash of a stage: its steps plus the hashes of its inputs.
std::string sha256_hex(std::string_view data);
std::string file_sha256(const std::filesystem::path& path);

// The system-building recipe as twelve stages over files in data/.
Pipeline preset_system_pipeline();

}  // namespace docnmt
