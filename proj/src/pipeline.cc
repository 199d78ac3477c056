#include "docnmt/pipeline.h"

#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "docnmt/corpus.h"
#include "docnmt/error.h"

namespace docnmt {

namespace fs = std::filesystem;

namespace {

const std::regex kPlaceholder(R"(\{(in|out):([A-Za-z0-9_.\-]+)\})");

bool valid_name(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  return true;
}

struct StageRef {
  std::string stage;
  std::string output;
};

std::optional<StageRef> parse_ref(const std::string& value) {
  if (value.empty() || value[0] != '@') return std::nullopt;
  auto slash = value.find('/');
  if (slash == std::string::npos) throw ConfigError("reference '" + value + "' must look like @stage/output");
  return StageRef{value.substr(1, slash - 1), value.substr(slash + 1)};
}

std::string digest_hex(const unsigned char* md, unsigned int len) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

}  // namespace

std::vector<std::string> Stage::outputs() const {
  std::vector<std::string> out;
  for (const auto& step : steps)
    for (const auto& arg : step)
      for (std::sregex_iterator it(arg.begin(), arg.end(), kPlaceholder), end; it != end; ++it)
        if ((*it)[1] == "out" && std::find(out.begin(), out.end(), (*it)[2].str()) == out.end())
          out.push_back((*it)[2]);
  return out;
}

const Stage* Pipeline::find(std::string_view name) const {
  for (const auto& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr)) throw Error("sha256 failed");
  return digest_hex(md, len);
}

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buffer(1 << 16);
  while (in) {
    in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    EVP_DigestUpdate(ctx.get(), buffer.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  return digest_hex(md, len);
}

Pipeline parse_pipeline(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("pipeline config must be an object");
  for (const auto& [key, value] : j.items())
    if (key != "workdir" && key != "stages") throw ConfigError("pipeline config: unknown key '" + key + "'");
  Pipeline p;
  p.base_dir = base_dir;
  try {
    p.workdir = j.value("workdir", std::string("work"));
    if (!j.contains("stages") || !j.at("stages").is_array()) throw ConfigError("pipeline config: 'stages' list required");
    for (const auto& s : j.at("stages")) {
      for (const auto& [key, value] : s.items())
        if (key != "name" && key != "inputs" && key != "steps")
          throw ConfigError("pipeline config: unknown stage key '" + key + "'");
      Stage stage;
      stage.name = s.at("name").get<std::string>();
      if (s.contains("inputs")) stage.inputs = s.at("inputs").get<std::map<std::string, std::string>>();
      stage.steps = s.at("steps").get<std::vector<std::vector<std::string>>>();
      p.stages.push_back(std::move(stage));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("pipeline config: ") + e.what());
  }
  return p;
}

Pipeline load_pipeline(const fs::path& config_path) {
  if (!fs::exists(config_path)) throw ConfigError("config file " + config_path.string() + " does not exist");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(config_path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(config_path.string() + ": " + e.what());
  }
  return parse_pipeline(j, config_path.parent_path());
}

nlohmann::json to_json(const Pipeline& p) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : p.stages) stages.push_back({{"name", s.name}, {"inputs", s.inputs}, {"steps", s.steps}});
  return {{"workdir", p.workdir.string()}, {"stages", stages}};
}

namespace {

void validate(const Pipeline& p, const CommandRunner& runner) {
  std::map<std::string, std::vector<std::string>> produced;
  for (const auto& stage : p.stages) {
    const std::string where = "stage '" + stage.name + "'";
    if (!valid_name(stage.name)) throw ConfigError("invalid stage name '" + stage.name + "'");
    if (produced.count(stage.name)) throw ConfigError("duplicate " + where);
    if (stage.steps.empty()) throw ConfigError(where + " has no steps");
    for (const auto& [key, value] : stage.inputs) {
      if (auto ref = parse_ref(value)) {
        auto it = produced.find(ref->stage);
        if (it == produced.end())
          throw ConfigError(where + ": input '" + key + "' refers to unknown or later stage '" + ref->stage + "'");
        if (std::find(it->second.begin(), it->second.end(), ref->output) == it->second.end())
          throw ConfigError(where + ": stage '" + ref->stage + "' has no output '" + ref->output + "'");
      } else {
        fs::path path = fs::path(value).is_absolute() ? fs::path(value) : p.base_dir / value;
        if (!fs::is_regular_file(path)) throw ConfigError(where + ": input file " + path.string() + " does not exist");
      }
    }
    for (const auto& step : stage.steps) {
      if (step.empty()) throw ConfigError(where + " has an empty step");
      if (!runner.knows(step[0])) throw ConfigError(where + ": unknown command '" + step[0] + "'");
      for (const auto& arg : step)
        for (std::sregex_iterator it(arg.begin(), arg.end(), kPlaceholder), end; it != end; ++it)
          if ((*it)[1] == "in" && !stage.inputs.count((*it)[2]))
            throw ConfigError(where + ": step uses undeclared input '" + (*it)[2].str() + "'");
    }
    produced[stage.name] = stage.outputs();
  }
}

std::string substitute(const std::string& arg, const std::map<std::string, fs::path>& inputs, const fs::path& out_dir) {
  std::string result;
  std::size_t last = 0;
  for (std::sregex_iterator it(arg.begin(), arg.end(), kPlaceholder), end; it != end; ++it) {
    result += arg.substr(last, static_cast<std::size_t>(it->position()) - last);
    result += (*it)[1] == "in" ? inputs.at((*it)[2]).string() : (out_dir / (*it)[2].str()).string();
    last = static_cast<std::size_t>(it->position() + it->length());
  }
  return result + arg.substr(last);
}

}  // namespace

std::vector<StageRecord> run_pipeline(const Pipeline& p, const CommandRunner& runner, std::ostream& log) {
  validate(p, runner);
  const fs::path workdir = p.workdir.is_absolute() ? p.workdir : p.base_dir / p.workdir;
  std::map<std::string, StageRecord> done;
  std::vector<StageRecord> records;
  for (const auto& stage : p.stages) {
    nlohmann::json inputs_json = nlohmann::json::object();
    std::map<std::string, fs::path> resolved;
    for (const auto& [key, value] : stage.inputs) {
      if (auto ref = parse_ref(value)) {
        const auto& upstream = done.at(ref->stage);
        resolved[key] = upstream.dir / ref->output;
        inputs_json[key] = {{"ref", value}, {"hash", upstream.hash + "/" + ref->output}};
      } else {
        fs::path path = fs::path(value).is_absolute() ? fs::path(value) : p.base_dir / value;
        resolved[key] = fs::absolute(path);
        inputs_json[key] = {{"ref", value}, {"hash", file_sha256(path)}};
      }
    }
    nlohmann::json identity = {{"steps", stage.steps}, {"inputs", inputs_json}};
    StageRecord record{stage.name, sha256_hex(identity.dump()), fs::absolute(workdir / "cache"), false};
    record.dir /= record.hash;

    if (fs::exists(record.dir / "DONE")) {
      record.skipped = true;
      log << "[" << stage.name << "] up to date (" << record.hash.substr(0, 12) << ")\n";
    } else {
      log << "[" << stage.name << "] running (" << record.hash.substr(0, 12) << ")\n";
      fs::path partial = record.dir;
      partial += ".partial";
      fs::remove_all(partial);
      fs::create_directories(partial);
      std::ostringstream stage_log;
      try {
        for (const auto& step : stage.steps) {
          std::vector<std::string> args;
          for (const auto& arg : step) args.push_back(substitute(arg, resolved, partial));
          stage_log << "$";
          for (const auto& a : step) stage_log << ' ' << a;
          stage_log << '\n';
          runner.run(args, stage_log);
        }
        for (const auto& out : stage.outputs())
          if (!fs::exists(partial / out)) throw Error("declared output '" + out + "' was not written");
      } catch (const std::exception& e) {
        stage_log << "error: " << e.what() << '\n';
        write_file(workdir / "logs" / (stage.name + ".log"), stage_log.str());
        throw StageFailure(stage.name, stage_log.str());
      }
      nlohmann::json outputs = nlohmann::json::object();
      for (const auto& out : stage.outputs()) outputs[out] = file_sha256(partial / out);
      nlohmann::json provenance = {{"stage", stage.name}, {"hash", record.hash}, {"steps", stage.steps},
                                   {"inputs", inputs_json}, {"outputs", outputs}};
      write_file(partial / "provenance.json", provenance.dump(2) + "\n");
      write_file(partial / "log.txt", stage_log.str());
      fs::remove_all(record.dir);
      fs::rename(partial, record.dir);
      write_file(record.dir / "DONE", record.hash + "\n");
    }
    done[stage.name] = record;
    records.push_back(record);
  }
  nlohmann::json index = nlohmann::json::object();
  for (const auto& r : records) index[r.name] = r.dir.string();
  write_file(workdir / "stages.json", index.dump(2) + "\n");
  return records;
}

// ---------------------------------------------------------------------------
// Preset

namespace {

using Step = std::vector<std::string>;

Step train_step(const std::string& out, const std::string& src, const std::string& tgt, const std::string& config,
                const std::string& level, const std::string& seed, std::vector<std::string> extra = {}) {
  Step s = {"train", "--src", src, "--tgt", tgt, "--vocab", "{in:vocab}", "--config", config,
            "--level", level, "--seed", seed, "--out", "{out:" + out + "}", "--log", "{out:" + out + ".log}"};
  s.insert(s.end(), extra.begin(), extra.end());
  return s;
}

Step ensemble_step(const std::string& out, const std::string& label,
                   const std::vector<std::pair<std::string, std::string>>& members) {
  Step s = {"ensemble", "--label", label};
  for (const auto& [model, weight] : members) {
    s.insert(s.end(), {"--model", model, "--weight", weight});
  }
  s.insert(s.end(), {"--out", "{out:" + out + "}"});
  return s;
}

}  // namespace

Pipeline preset_system_pipeline() {
  Pipeline p;
  p.workdir = "work";
  auto add = [&](std::string name, std::map<std::string, std::string> inputs, std::vector<Step> steps) {
    p.stages.push_back({std::move(name), std::move(inputs), std::move(steps)});
  };
  const std::string vocab = "@subword/vocab";

  add("subword", {{"src", "data/parallel.src"}, {"tgt", "data/parallel.tgt"}, {"mono", "data/mono.tgt"}},
      {{"subword", "--input", "{in:src}", "--input", "{in:tgt}", "--input", "{in:mono}", "--size", "32000", "--out",
        "{out:vocab}"}});

  add("filter",
      {{"src", "data/parallel.src"}, {"tgt", "data/parallel.tgt"}, {"vocab", vocab}, {"config", "data/sentence.json"}},
      {train_step("fwd_model", "{in:src}", "{in:tgt}", "{in:config}", "sentence", "1"),
       train_step("bwd_model", "{in:src}", "{in:tgt}", "{in:config}", "sentence", "1", {"--reverse"}),
       {"filter", "--src", "{in:src}", "--tgt", "{in:tgt}", "--vocab", "{in:vocab}", "--fwd", "{out:fwd_model}",
        "--bwd", "{out:bwd_model}", "--keep", "0.8", "--scores", "{out:scores.tsv}", "--out-src", "{out:src}",
        "--out-tgt", "{out:tgt}"}});

  add("reverse-model",
      {{"src", "@filter/src"}, {"tgt", "@filter/tgt"}, {"vocab", vocab}, {"config", "data/sentence.json"}},
      {train_step("model", "{in:src}", "{in:tgt}", "{in:config}", "sentence", "1", {"--reverse"})});

  add("backtranslate", {{"mono", "data/mono.tgt"}, {"model", "@reverse-model/model"}, {"vocab", vocab}},
      {{"backtranslate", "--input", "{in:mono}", "--model", "{in:model}", "--vocab", "{in:vocab}", "--temperature",
        "1.0", "--seed", "1", "--out-src", "{out:src}", "--out-tgt", "{out:tgt}"}});

  add("mix", {{"par_src", "@filter/src"}, {"par_tgt", "@filter/tgt"}, {"bt_src", "@backtranslate/src"},
              {"bt_tgt", "@backtranslate/tgt"}},
      {{"mix", "--src", "{in:par_src}", "--tgt", "{in:par_tgt}", "--fraction", "0.5", "--src", "{in:bt_src}", "--tgt",
        "{in:bt_tgt}", "--fraction", "0.5", "--seed", "1", "--out-src", "{out:src}", "--out-tgt", "{out:tgt}"}});

  {
    std::vector<Step> steps;
    for (int k = 1; k <= 4; ++k)
      steps.push_back(train_step("a" + std::to_string(k), "{in:par_src}", "{in:par_tgt}", "{in:config}", "sentence",
                                 std::to_string(k)));
    for (int k = 1; k <= 4; ++k)
      steps.push_back(train_step("b" + std::to_string(k), "{in:mix_src}", "{in:mix_tgt}", "{in:config}", "sentence",
                                 std::to_string(k)));
    add("sentence-models",
        {{"par_src", "@filter/src"}, {"par_tgt", "@filter/tgt"}, {"mix_src", "@mix/src"}, {"mix_tgt", "@mix/tgt"},
         {"vocab", vocab}, {"config", "data/sentence.json"}},
        steps);
  }

  {
    std::map<std::string, std::string> inputs = {{"src", "@filter/src"}, {"tgt", "@filter/tgt"}, {"vocab", vocab},
                                                 {"config", "data/sentence.json"}, {"dev_src", "data/dev.src"},
                                                 {"dev_tgt", "data/dev.tgt"}, {"dev_manifest", "data/dev.manifest"}};
    std::vector<Step> steps;
    for (int k = 1; k <= 4; ++k) {
      auto b = "b" + std::to_string(k);
      inputs[b] = "@sentence-models/" + b;
      steps.push_back({"finetune", "--init", "{in:" + b + "}", "--src", "{in:src}", "--tgt", "{in:tgt}", "--vocab",
                       "{in:vocab}", "--config", "{in:config}", "--level", "sentence", "--dev-src", "{in:dev_src}",
                       "--dev-tgt", "{in:dev_tgt}", "--dev-manifest", "{in:dev_manifest}", "--dev-origin",
                       "original-src", "--out", "{out:c" + std::to_string(k) + "}"});
    }
    add("finetune", inputs, steps);
  }

  add("document-data",
      {{"doc_src", "data/doc_parallel.src"}, {"doc_tgt", "data/doc_parallel.tgt"}, {"par_src", "@filter/src"},
       {"par_tgt", "@filter/tgt"}, {"bt_src", "@backtranslate/src"}, {"bt_tgt", "@backtranslate/tgt"}},
      {{"subdocs", "--src", "{in:doc_src}", "--tgt", "{in:doc_tgt}", "--reference", "{in:bt_src}", "--ratio", "0.5",
        "--max-per-doc", "10", "--seed", "1", "--out-src", "{out:aug_src}", "--out-tgt", "{out:aug_tgt}"},
       {"fakedocs", "--src", "{in:par_src}", "--tgt", "{in:par_tgt}", "--lengths-from", "{in:doc_src}", "--shuffle",
        "--seed", "1", "--out-src", "{out:fake_src}", "--out-tgt", "{out:fake_tgt}"},
       {"mix", "--src", "{out:aug_src}", "--tgt", "{out:aug_tgt}", "--fraction", "0.5", "--src", "{out:fake_src}",
        "--tgt", "{out:fake_tgt}", "--fraction", "0.5", "--seed", "1", "--out-src", "{out:parallel_src}",
        "--out-tgt", "{out:parallel_tgt}"},
       {"mix", "--src", "{out:parallel_src}", "--tgt", "{out:parallel_tgt}", "--fraction", "0.5", "--src",
        "{in:bt_src}", "--tgt", "{in:bt_tgt}", "--fraction", "0.5", "--seed", "1", "--out-src", "{out:full_src}",
        "--out-tgt", "{out:full_tgt}"}});

  {
    std::map<std::string, std::string> in = {
        {"par_src", "@document-data/parallel_src"}, {"par_tgt", "@document-data/parallel_tgt"},
        {"full_src", "@document-data/full_src"},    {"full_tgt", "@document-data/full_tgt"},
        {"mono", "data/mono.src"},                  {"vocab", vocab},
        {"config", "data/document.json"}};
    auto finetune = [](const std::string& out, const std::string& init, std::vector<std::string> extra) {
      Step s = {"finetune", "--init", "{out:" + init + "}", "--src", "{in:par_src}", "--tgt", "{in:par_tgt}",
                "--vocab", "{in:vocab}", "--config", "{in:config}", "--level", "document", "--out", "{out:" + out + "}"};
      s.insert(s.end(), extra.begin(), extra.end());
      return s;
    };
    add("document-models", in,
        {train_step("A", "{in:par_src}", "{in:par_tgt}", "{in:config}", "document", "1"),
         train_step("B", "{in:full_src}", "{in:full_tgt}", "{in:config}", "document", "1"),
         train_step("B_mlm", "{in:full_src}", "{in:full_tgt}", "{in:config}", "document", "1", {"--mono", "{in:mono}"}),
         finetune("C", "B", {}), finetune("C_mlm", "B_mlm", {"--multitask"})});
  }

  add("first-pass",
      {{"doc_src", "data/doc_parallel.src"}, {"dev_src", "data/dev.src"}, {"vocab", vocab}, {"c1", "@finetune/c1"}},
      {{"translate", "--mode", "sentence", "--model", "{in:c1}", "--vocab", "{in:vocab}", "--input", "{in:doc_src}",
        "--sample", "--seed", "1", "--out", "{out:train_first_pass}"},
       {"translate", "--mode", "sentence", "--model", "{in:c1}", "--vocab", "{in:vocab}", "--input", "{in:dev_src}",
        "--beam", "4", "--out", "{out:dev_first_pass}"}});

  add("second-pass-models",
      {{"doc_src", "data/doc_parallel.src"}, {"doc_tgt", "data/doc_parallel.tgt"},
       {"first_pass", "@first-pass/train_first_pass"}, {"vocab", vocab}, {"config", "data/dual.json"},
       {"C", "@document-models/C"}},
      {train_step("P_A", "{in:doc_src}", "{in:doc_tgt}", "{in:config}", "document", "1", {"--aux", "{in:first_pass}"}),
       train_step("P_C", "{in:doc_src}", "{in:doc_tgt}", "{in:config}", "document", "1",
                  {"--aux", "{in:first_pass}", "--init", "{in:C}"})});

  {
    std::map<std::string, std::string> in = {{"dev_src", "data/dev.src"},
                                             {"dev_tgt", "data/dev.tgt"},
                                             {"dev_manifest", "data/dev.manifest"},
                                             {"vocab", vocab},
                                             {"first_pass", "@first-pass/dev_first_pass"},
                                             {"A", "@document-models/A"},
                                             {"B", "@document-models/B"},
                                             {"C", "@document-models/C"},
                                             {"C_mlm", "@document-models/C_mlm"},
                                             {"P_A", "@second-pass-models/P_A"},
                                             {"P_C", "@second-pass-models/P_C"}};
    std::vector<std::pair<std::string, std::string>> a4, c4, a4_weighted, all8, weighted8;
    for (int k = 1; k <= 4; ++k) {
      auto a = "a" + std::to_string(k), c = "c" + std::to_string(k);
      in[a] = "@sentence-models/" + a;
      in[c] = "@finetune/" + c;
      a4.push_back({"{in:" + a + "}", "1.0"});
      c4.push_back({"{in:" + c + "}", "1.0"});
      a4_weighted.push_back({"{in:" + a + "}", "0.3"});
    }
    all8 = a4;
    all8.insert(all8.end(), c4.begin(), c4.end());
    weighted8 = a4_weighted;
    weighted8.insert(weighted8.end(), c4.begin(), c4.end());

    std::vector<Step> steps;
    auto evaluate = [&](const std::string& name, const std::string& spec, const std::string& mode) {
      Step t = {"translate", "--mode", mode, "--ensemble", "{out:" + spec + "}", "--vocab", "{in:vocab}", "--input",
                "{in:dev_src}", "--beam", "4", "--out", "{out:" + name + ".hyp}"};
      if (mode == "second-pass") t.insert(t.end(), {"--first-pass", "{in:first_pass}"});
      steps.push_back(t);
      steps.push_back({"evaluate", "--hyp", "{out:" + name + ".hyp}", "--ref", "{in:dev_tgt}", "--manifest",
                       "{in:dev_manifest}", "--out", "{out:" + name + ".tsv}"});
    };
    auto single = [&](const std::string& key) {
      steps.push_back(ensemble_step(key + ".spec", key, {{"{in:" + key + "}", "1.0"}}));
    };
    steps.push_back(ensemble_step("4a.spec", "(4×a)", a4));
    evaluate("4a", "4a.spec", "sentence");
    steps.push_back(ensemble_step("4c.spec", "(4×c)", c4));
    evaluate("4c", "4c.spec", "sentence");
    steps.push_back(ensemble_step("4a_4c.spec", "(4×a)+(4×c)", all8));
    evaluate("4a_4c", "4a_4c.spec", "sentence");
    steps.push_back(ensemble_step("submitted.spec", "0.3·(4×a)+1.0·(4×c)", weighted8));
    evaluate("submitted", "submitted.spec", "sentence");
    for (std::string key : {"A", "B", "C", "C_mlm"}) {
      single(key);
      evaluate(key, key + ".spec", "document");
    }
    for (std::string key : {"P_A", "P_C"}) {
      single(key);
      evaluate(key, key + ".spec", "second-pass");
    }
    add("evaluation", in, steps);
  }
  return p;
}

}  // namespace docnmt
