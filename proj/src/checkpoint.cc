#include "docnmt/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "docnmt/error.h"

namespace docnmt {

namespace {

constexpr std::string_view kMagic = "docnmt-checkpoint 1";

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
}

template <class V>
void read_field(const nlohmann::json& j, const char* key, V& out, const char* what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(what) + ": bad value for '" + key + "': " + e.what());
  }
}

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

}  // namespace

nlohmann::json to_json(const TransformerConfig& c) {
  return {{"depth", c.depth},
          {"model_dim", c.model_dim},
          {"ff_dim", c.ff_dim},
          {"heads", c.heads},
          {"max_len", c.max_len},
          {"vocab_size", c.vocab_size},
          {"dual_encoder", c.dual_encoder},
          {"mask_rate", c.mask_rate},
          {"mlm_weight", c.mlm_weight},
          {"bert_mask_split", c.bert_mask_split},
          {"tie_mlm_head", c.tie_mlm_head},
          {"init_scaling", std::string(to_string(c.init_scaling))}};
}

TransformerConfig transformer_config_from_json(const nlohmann::json& j) {
  const char* what = "model config";
  reject_unknown(j,
                 {"depth", "model_dim", "ff_dim", "heads", "max_len", "vocab_size", "dual_encoder", "mask_rate",
                  "mlm_weight", "bert_mask_split", "tie_mlm_head", "init_scaling"},
                 what);
  TransformerConfig c;
  read_field(j, "depth", c.depth, what);
  read_field(j, "model_dim", c.model_dim, what);
  read_field(j, "ff_dim", c.ff_dim, what);
  read_field(j, "heads", c.heads, what);
  read_field(j, "max_len", c.max_len, what);
  read_field(j, "vocab_size", c.vocab_size, what);
  read_field(j, "dual_encoder", c.dual_encoder, what);
  read_field(j, "mask_rate", c.mask_rate, what);
  read_field(j, "mlm_weight", c.mlm_weight, what);
  read_field(j, "bert_mask_split", c.bert_mask_split, what);
  read_field(j, "tie_mlm_head", c.tie_mlm_head, what);
  std::string scaling = std::string(to_string(c.init_scaling));
  read_field(j, "init_scaling", scaling, what);
  try {
    c.init_scaling = parse_init_scaling(scaling);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"optimizer", std::string(to_string(c.optimizer))},
          {"learning_rate", c.learning_rate},
          {"warmup_updates", c.warmup_updates},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"optimizer_delay", c.optimizer_delay},
          {"batch_tokens", c.batch_tokens},
          {"max_updates", c.max_updates},
          {"seed", c.seed},
          {"early_stop_metric", c.early_stop_metric},
          {"patience", c.patience},
          {"eval_every", c.eval_every},
          {"multitask_on_parallel_source", c.multitask_on_parallel_source}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  const char* what = "train config";
  reject_unknown(j,
                 {"optimizer", "learning_rate", "warmup_updates", "beta1", "beta2", "epsilon", "optimizer_delay",
                  "batch_tokens", "max_updates", "seed", "early_stop_metric", "patience", "eval_every",
                  "multitask_on_parallel_source"},
                 what);
  TrainConfig c;
  std::string opt = "adam";
  read_field(j, "optimizer", opt, what);
  if (opt == "adam") c.optimizer = OptimizerKind::adam;
  else if (opt == "sgd") c.optimizer = OptimizerKind::sgd;
  else throw ConfigError("train config: unknown optimizer '" + opt + "'");
  read_field(j, "learning_rate", c.learning_rate, what);
  read_field(j, "warmup_updates", c.warmup_updates, what);
  read_field(j, "beta1", c.beta1, what);
  read_field(j, "beta2", c.beta2, what);
  read_field(j, "epsilon", c.epsilon, what);
  read_field(j, "optimizer_delay", c.optimizer_delay, what);
  read_field(j, "batch_tokens", c.batch_tokens, what);
  read_field(j, "max_updates", c.max_updates, what);
  read_field(j, "seed", c.seed, what);
  read_field(j, "early_stop_metric", c.early_stop_metric, what);
  read_field(j, "patience", c.patience, what);
  read_field(j, "eval_every", c.eval_every, what);
  read_field(j, "multitask_on_parallel_source", c.multitask_on_parallel_source, what);
  return c;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint data is little-endian");
  const auto& p = model.params();
  std::ostringstream header;
  header << kMagic << '\n' << "config " << to_json(model.config()).dump() << '\n';
  long offset = 0;
  for (int i = 0; i < p.size(); ++i) {
    const auto& info = p.info(i);
    header << "tensor " << info.name << ' ' << info.rows << ' ' << info.cols << ' ' << offset << '\n';
    offset += static_cast<long>(info.rows) * info.cols;
  }
  header << "end\n";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  auto text = header.str();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (int i = 0; i < p.size(); ++i) {
    const auto& v = p.value(i);
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

namespace {

struct TensorEntry {
  std::string name;
  int rows = 0, cols = 0;
  long offset = 0;
};

}  // namespace

std::string read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::string header, line;
  while (std::getline(in, line)) {
    header += line + '\n';
    if (line == "end") return header;
  }
  throw IoError("checkpoint " + path.string() + " has no header terminator");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kMagic) throw IoError(path.string() + " is not a checkpoint");
  std::getline(in, line);
  if (line.rfind("config ", 0) != 0) throw IoError(path.string() + ": missing config line");
  TransformerConfig config;
  try {
    config = transformer_config_from_json(nlohmann::json::parse(line.substr(7)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad config line: " + e.what());
  }
  std::vector<TensorEntry> entries;
  while (std::getline(in, line) && line != "end") {
    std::istringstream row(line);
    std::string tag;
    TensorEntry e;
    if (!(row >> tag >> e.name >> e.rows >> e.cols >> e.offset) || tag != "tensor")
      throw IoError(path.string() + ": bad tensor line '" + line + "'");
    entries.push_back(e);
  }
  if (line != "end") throw IoError(path.string() + ": truncated header");
  const auto data_start = in.tellg();

  Model model(config);
  auto& p = model.params();
  if (static_cast<int>(entries.size()) != p.size())
    throw IoError(path.string() + ": tensor count " + std::to_string(entries.size()) + " does not match config");
  for (const auto& e : entries) {
    int i = p.find(e.name);
    if (i < 0) throw IoError(path.string() + ": unexpected tensor " + e.name);
    auto& v = p.value(i);
    if (v.rows() != e.rows || v.cols() != e.cols) throw IoError(path.string() + ": shape mismatch for " + e.name);
    in.seekg(data_start + static_cast<std::streamoff>(e.offset * static_cast<long>(sizeof(float))));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!in) throw IoError(path.string() + ": truncated data for " + e.name);
  }
  p.zero_grad();
  return model;
}

void write_train_log(const std::vector<TrainLogEntry>& log, const std::filesystem::path& path) {
  write_file(path, format_train_log(log));
}

}  // namespace docnmt
