#include "docnmt/pipeline.h"

#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "docnmt/cli.h"
#include "docnmt/corpus.h"
#include "docnmt/error.h"
#include "test_util.h"

namespace docnmt {
namespace {

namespace fs = std::filesystem;

// "append OUT TEXT [IN...]" writes the inputs' contents followed by TEXT.
// "fail" always throws. Every call is recorded.
struct FakeRunner {
  std::vector<std::vector<std::string>> calls;

  CommandRunner runner() {
    return {[](const std::string& c) { return c == "append" || c == "fail"; },
            [this](const std::vector<std::string>& args, std::ostream& log) {
              calls.push_back(args);
              if (args[0] == "fail") throw Error("deliberate failure");
              std::string text;
              for (std::size_t i = 3; i < args.size(); ++i) text += read_file(args[i]);
              write_file(args[1], text + args[2] + "\n");
              log << "wrote " << args[1] << '\n';
            }};
  }
};

nlohmann::json chain_config() {
  return nlohmann::json::parse(R"({
    "workdir": "work",
    "stages": [
      {"name": "one", "inputs": {"seed": "seed.txt"}, "steps": [["append", "{out:a}", "one", "{in:seed}"]]},
      {"name": "two", "inputs": {"a": "@one/a", "extra": "extra.txt"},
       "steps": [["append", "{out:b}", "two", "{in:a}", "{in:extra}"], ["append", "{out:c}", "two-c", "{out:b}"]]},
      {"name": "three", "inputs": {"c": "@two/c"}, "steps": [["append", "{out:d}", "three", "{in:c}"]]},
      {"name": "side", "inputs": {"a": "@one/a"}, "steps": [["append", "{out:e}", "side", "{in:a}"]]}
    ]})");
}

struct Workspace {
  testing::TempDir dir;
  Workspace() {
    write_file(dir / "seed.txt", "seed\n");
    write_file(dir / "extra.txt", "extra\n");
  }
  Pipeline pipeline(nlohmann::json j = chain_config()) const { return parse_pipeline(j, dir.path()); }
};

std::vector<bool> skipped(const std::vector<StageRecord>& records) {
  std::vector<bool> out;
  for (const auto& r : records) out.push_back(r.skipped);
  return out;
}

TEST(Pipeline, RunsStagesAndWiresOutputs) {
  Workspace ws;
  FakeRunner fake;
  std::ostringstream log;
  auto records = run_pipeline(ws.pipeline(), fake.runner(), log);
  ASSERT_EQ(records.size(), 4u);
  EXPECT_EQ(skipped(records), (std::vector<bool>{false, false, false, false}));
  EXPECT_EQ(fake.calls.size(), 5u);
  EXPECT_EQ(read_file(records[2].dir / "d"), "seed\none\nextra\ntwo\ntwo-c\nthree\n");
  EXPECT_EQ(read_file(records[3].dir / "e"), "seed\none\nside\n");
  auto index = nlohmann::json::parse(read_file(ws.dir / "work" / "stages.json"));
  EXPECT_EQ(index["three"], records[2].dir.string());
}

TEST(Pipeline, RerunSkipsEverything) {
  Workspace ws;
  FakeRunner fake;
  std::ostringstream log;
  auto first = run_pipeline(ws.pipeline(), fake.runner(), log);
  fake.calls.clear();
  auto second = run_pipeline(ws.pipeline(), fake.runner(), log);
  EXPECT_TRUE(fake.calls.empty());
  EXPECT_EQ(skipped(second), (std::vector<bool>{true, true, true, true}));
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(first[i].hash, second[i].hash);
}

TEST(Pipeline, ChangedInputInvalidatesStageAndDescendants) {
  Workspace ws;
  FakeRunner fake;
  std::ostringstream log;
  run_pipeline(ws.pipeline(), fake.runner(), log);
  write_file(ws.dir / "extra.txt", "changed\n");
  auto records = run_pipeline(ws.pipeline(), fake.runner(), log);
  EXPECT_EQ(skipped(records), (std::vector<bool>{true, false, false, true}));
  EXPECT_EQ(read_file(records[2].dir / "d"), "seed\none\nchanged\ntwo\ntwo-c\nthree\n");
}

TEST(Pipeline, ChangedStepsInvalidateStageAndDescendants) {
  Workspace ws;
  FakeRunner fake;
  std::ostringstream log;
  run_pipeline(ws.pipeline(), fake.runner(), log);
  auto j = chain_config();
  j["stages"][0]["steps"][0][2] = "uno";
  auto records = run_pipeline(ws.pipeline(j), fake.runner(), log);
  EXPECT_EQ(skipped(records), (std::vector<bool>{false, false, false, false}));
  // Going back reuses the earlier cache entries.
  EXPECT_EQ(skipped(run_pipeline(ws.pipeline(), fake.runner(), log)), (std::vector<bool>{true, true, true, true}));
}

TEST(Pipeline, ConfigErrorsBeforeAnythingRuns) {
  Workspace ws;
  FakeRunner fake;
  std::ostringstream log;
  auto expect_config_error = [&](nlohmann::json j, const std::string& needle) {
    fake.calls.clear();
    try {
      run_pipeline(ws.pipeline(j), fake.runner(), log);
      ADD_FAILURE() << "no ConfigError for " << needle;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
    EXPECT_TRUE(fake.calls.empty());
  };
  auto j = chain_config();
  j["stages"][2]["inputs"]["c"] = "missing.txt";
  expect_config_error(j, "missing.txt");
  j = chain_config();
  j["stages"][2]["inputs"]["c"] = "@side/e";
  expect_config_error(j, "side");
  j = chain_config();
  j["stages"][2]["inputs"]["c"] = "@two/zzz";
  expect_config_error(j, "zzz");
  j = chain_config();
  j["stages"][3]["steps"][0][0] = "frobnicate";
  expect_config_error(j, "frobnicate");
  j = chain_config();
  j["stages"][3]["steps"][0][3] = "{in:nothing}";
  expect_config_error(j, "nothing");
  j = chain_config();
  j["stages"][3]["name"] = "one";
  expect_config_error(j, "duplicate");

  EXPECT_THROW(parse_pipeline(nlohmann::json::parse(R"({"stages": [], "bogus": 1})"), ws.dir.path()), ConfigError);
  EXPECT_THROW(load_pipeline(ws.dir / "nope.json"), ConfigError);
  write_file(ws.dir / "broken.json", "{");
  EXPECT_THROW(load_pipeline(ws.dir / "broken.json"), ConfigError);
}

TEST(Pipeline, FailingStageKeepsLogAndLeavesNoCacheEntry) {
  Workspace ws;
  FakeRunner fake;
  std::ostringstream log;
  auto j = chain_config();
  j["stages"][2]["steps"].push_back({"fail"});
  try {
    run_pipeline(ws.pipeline(j), fake.runner(), log);
    FAIL();
  } catch (const StageFailure& e) {
    EXPECT_EQ(e.stage(), "three");
    EXPECT_NE(std::string(e.what()).find("deliberate failure"), std::string::npos);
  }
  EXPECT_NE(read_file(ws.dir / "work" / "logs" / "three.log").find("deliberate failure"), std::string::npos);
  auto records = run_pipeline(ws.pipeline(), fake.runner(), log);
  EXPECT_EQ(skipped(records), (std::vector<bool>{true, true, false, false}));
}

TEST(Pipeline, UnwrittenOutputFailsStage) {
  Workspace ws;
  FakeRunner fake;
  std::ostringstream log;
  auto j = chain_config();
  // Mentions {out:never} only as text, so that file is never created.
  j["stages"][3]["steps"].push_back({"append", "{out:f}", "{out:never}"});
  EXPECT_THROW(run_pipeline(ws.pipeline(j), fake.runner(), log), StageFailure);
}

TEST(Pipeline, ProvenanceRecordsInputsAndOutputs) {
  Workspace ws;
  FakeRunner fake;
  std::ostringstream log;
  auto records = run_pipeline(ws.pipeline(), fake.runner(), log);
  auto prov = nlohmann::json::parse(read_file(records[1].dir / "provenance.json"));
  EXPECT_EQ(prov["stage"], "two");
  EXPECT_EQ(prov["hash"], records[1].hash);
  EXPECT_EQ(prov["inputs"]["a"]["hash"], records[0].hash + "/a");
  EXPECT_EQ(prov["inputs"]["extra"]["hash"], file_sha256(ws.dir / "extra.txt"));
  EXPECT_EQ(prov["outputs"]["c"], file_sha256(records[1].dir / "c"));
  EXPECT_TRUE(fs::exists(records[1].dir / "log.txt"));
}

TEST(Pipeline, Sha256) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  testing::TempDir dir;
  write_file(dir / "f", "abc");
  EXPECT_EQ(file_sha256(dir / "f"), sha256_hex("abc"));
}

TEST(Pipeline, JsonRoundTrip) {
  Workspace ws;
  auto p = ws.pipeline();
  auto q = parse_pipeline(to_json(p), ws.dir.path());
  EXPECT_EQ(to_json(q), to_json(p));
  EXPECT_EQ(p.stages[1].outputs(), (std::vector<std::string>{"b", "c"}));
}

TEST(Preset, TwelveStagesInOrder) {
  auto p = preset_system_pipeline();
  std::vector<std::string> names;
  for (const auto& s : p.stages) names.push_back(s.name);
  EXPECT_EQ(names, (std::vector<std::string>{"subword", "filter", "reverse-model", "backtranslate", "mix",
                                             "sentence-models", "finetune", "document-data", "document-models",
                                             "first-pass", "second-pass-models", "evaluation"}));
}

TEST(Preset, FineTuneStageReadsFilteredDataAndDevSet) {
  auto p = preset_system_pipeline();
  const Stage* s = p.find("finetune");
  ASSERT_NE(s, nullptr);
  EXPECT_EQ(s->inputs.at("src"), "@filter/src");
  EXPECT_EQ(s->inputs.at("tgt"), "@filter/tgt");
  EXPECT_EQ(s->inputs.at("dev_manifest"), "data/dev.manifest");
  for (int k = 1; k <= 4; ++k) EXPECT_EQ(s->inputs.at("b" + std::to_string(k)), "@sentence-models/b" + std::to_string(k));
  EXPECT_EQ(s->outputs(), (std::vector<std::string>{"c1", "c2", "c3", "c4"}));
}

TEST(Preset, SubmittedEnsembleWeights) {
  auto p = preset_system_pipeline();
  const Stage* s = p.find("evaluation");
  ASSERT_NE(s, nullptr);
  bool found = false;
  for (const auto& step : s->steps) {
    if (step[0] != "ensemble" || step[2] != "0.3\xc2\xb7(4\xc3\x97" "a)+1.0\xc2\xb7(4\xc3\x97" "c)") continue;
    found = true;
    std::vector<std::string> weights;
    for (std::size_t i = 0; i + 1 < step.size(); ++i)
      if (step[i] == "--weight") weights.push_back(step[i + 1]);
    EXPECT_EQ(weights, (std::vector<std::string>{"0.3", "0.3", "0.3", "0.3", "1.0", "1.0", "1.0", "1.0"}));
  }
  EXPECT_TRUE(found);
}

TEST(Preset, ValidatesAgainstRealCommands) {
  testing::TempDir dir;
  for (const char* f : {"parallel.src", "parallel.tgt", "mono.tgt", "mono.src", "sentence.json", "document.json",
                        "dual.json", "dev.src", "dev.tgt", "dev.manifest", "doc_parallel.src", "doc_parallel.tgt"})
    write_file(dir / "data" / f, "x\n");
  auto p = preset_system_pipeline();
  p.base_dir = dir.path();
  std::vector<std::string> ran;
  CommandRunner runner{is_command, [&](const std::vector<std::string>& args, std::ostream&) {
                         ran.push_back(args[0]);
                         throw Error("stop");
                       }};
  std::ostringstream log;
  EXPECT_THROW(run_pipeline(p, runner, log), StageFailure);
  EXPECT_EQ(ran, (std::vector<std::string>{"subword"}));
}

}  // namespace
}  // namespace docnmt
