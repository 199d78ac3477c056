#include "docnmt/cli.h"

#include <sstream>

#include <gtest/gtest.h>

#include "docnmt/checkpoint.h"
#include "docnmt/corpus.h"
#include "docnmt/eval.h"
#include "support/toy.h"
#include "test_util.h"

namespace docnmt {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    auto lex = testing::make_lexicon(12, 1);
    testing::CipherShape shape{1, 3, 2, 4};
    auto train = testing::cipher_corpus(lex, 150, shape, 2, "train");
    auto test = testing::cipher_corpus(lex, 12, shape, 3, "test");
    for (std::size_t d = 0; d < test.size(); ++d)
      test.set_origin(d, d % 2 ? Origin::original_tgt : Origin::original_src);
    write_parallel(train, dir / "train.src", dir / "train.tgt");
    write_parallel(test, dir / "test.src", dir / "test.tgt");
    write_manifest(test, dir / "test.manifest");
    write_documents(target_side(train), dir / "mono.tgt");
    write_file(dir / "model.json", R"({
      "model": {"depth": 1, "model_dim": 32, "ff_dim": 64, "heads": 4, "max_len": 64},
      "train": {"learning_rate": 0.003, "warmup_updates": 50, "optimizer_delay": 1, "batch_tokens": 200,
                "max_updates": 400, "eval_every": 0}
    })");
  }

  std::string p(const std::string& name) const { return (dir / name).string(); }

  testing::TempDir dir;
};

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
  EXPECT_EQ(cli({"subword", "--size", "10"}).code, kExitConfigError);  // --input and --out missing
  EXPECT_EQ(cli({"no-such-command"}).code, kExitConfigError);
  EXPECT_EQ(cli({"subword", "--input", p("absent.txt"), "--out", p("v")}).code, kExitStageFailure);
  write_file(dir / "bad.json", "{");
  EXPECT_EQ(cli({"pipeline", "run", p("bad.json")}).code, kExitConfigError);
  EXPECT_EQ(cli({"pipeline", "run", p("missing.json")}).code, kExitConfigError);
  auto r = cli({"pipeline", "preset"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_EQ(nlohmann::json::parse(r.out)["stages"].size(), 12u);
}

TEST_F(CliTest, EndToEndCommands) {
  ASSERT_EQ(cli({"subword", "--input", p("train.src"), "--input", p("train.tgt"), "--size", "80", "--out", p("vocab")})
                .code,
            kExitOk);
  auto train = [&](std::vector<std::string> extra, const std::string& out) {
    std::vector<std::string> args{"train", "--src", p("train.src"), "--tgt", p("train.tgt"), "--vocab", p("vocab"),
                                  "--config", p("model.json"), "--out", p(out), "--log", p(out + ".log")};
    args.insert(args.end(), extra.begin(), extra.end());
    auto r = cli(args);
    EXPECT_EQ(r.code, kExitOk) << r.err;
  };
  train({}, "fwd.ckpt");
  train({"--reverse"}, "bwd.ckpt");
  EXPECT_EQ(load_checkpoint(p("fwd.ckpt")).config().model_dim, 32);
  EXPECT_NE(read_file(p("fwd.ckpt.log")).find("update"), std::string::npos);

  auto r = cli({"translate", "--input", p("test.src"), "--model", p("fwd.ckpt"), "--vocab", p("vocab"), "--out",
                p("test.hyp")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(load_documents(p("test.hyp")).sentence_count(), load_documents(p("test.src")).sentence_count());

  r = cli({"evaluate", "--hyp", p("test.hyp"), "--ref", p("test.tgt"), "--manifest", p("test.manifest"), "--out",
           p("report.tsv")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto report = read_file(p("report.tsv"));
  EXPECT_NE(report.find("original-src\t"), std::string::npos);
  EXPECT_NE(report.find("original-tgt\t"), std::string::npos);
  double score = bleu(all_sentences(load_documents(p("test.hyp"))), all_sentences(load_documents(p("test.tgt")))).score;
  EXPECT_GT(score, 50.0);  // the word-for-word cipher is easy

  ASSERT_EQ(cli({"ensemble", "--model", p("fwd.ckpt"), "--model", p("fwd.ckpt"), "--weight", "0.3", "--weight", "1",
                 "--label", "pair", "--out", p("spec.tsv")})
                .code,
            kExitOk);
  r = cli({"translate", "--input", p("test.src"), "--ensemble", p("spec.tsv"), "--vocab", p("vocab"), "--out",
           p("test.ens.hyp")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_file(p("test.ens.hyp")), read_file(p("test.hyp")));

  r = cli({"backtranslate", "--input", p("mono.tgt"), "--model", p("bwd.ckpt"), "--vocab", p("vocab"), "--out-src",
           p("bt.src"), "--out-tgt", p("bt.tgt")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto bt = load_parallel(p("bt.src"), p("bt.tgt"));
  EXPECT_EQ(target_side(bt).documents.size(), load_documents(p("mono.tgt")).size());

  r = cli({"filter", "--src", p("train.src"), "--tgt", p("train.tgt"), "--vocab", p("vocab"), "--fwd", p("fwd.ckpt"),
           "--bwd", p("bwd.ckpt"), "--keep", "0.5", "--scores", p("scores.tsv"), "--out-src", p("f.src"), "--out-tgt",
           p("f.tgt")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  r = cli({"filter-apply", "--src", p("train.src"), "--tgt", p("train.tgt"), "--scores", p("scores.tsv"), "--keep",
           "0.5", "--out-src", p("g.src"), "--out-tgt", p("g.tgt")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_file(p("f.src")), read_file(p("g.src")));

  r = cli({"mix", "--src", p("train.src"), "--tgt", p("train.tgt"), "--fraction", "0.5", "--src", p("bt.src"), "--tgt",
           p("bt.tgt"), "--fraction", "0.5", "--out-src", p("mix.src"), "--out-tgt", p("mix.tgt")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  r = cli({"subdocs", "--src", p("train.src"), "--tgt", p("train.tgt"), "--target", "100", "--out-src", p("sd.src"),
           "--out-tgt", p("sd.tgt")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  r = cli({"fakedocs", "--src", p("train.src"), "--tgt", p("train.tgt"), "--length", "5", "--shuffle", "--out-src",
           p("fd.src"), "--out-tgt", p("fd.tgt")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(load_parallel(p("fd.src"), p("fd.tgt")).sentence_count(), load_parallel(p("train.src"), p("train.tgt")).sentence_count());
  r = cli({"upsample", "--src", p("mono.tgt"), "--target", "1000", "--out-src", p("up.tgt")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_GE(load_documents(p("up.tgt")).sentence_count(), 1000u);
  r = cli({"markup", "--src", p("test.src"), "--tgt", p("test.tgt"), "--vocab", p("vocab"), "--out-src", p("m.src"),
           "--out-tgt", p("m.tgt")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_file(p("m.src")).substr(0, 5), "<BEG>");

  r = cli({"translate", "--mode", "document", "--input", p("test.src"), "--model", p("fwd.ckpt"), "--vocab", p("vocab"),
           "--out", p("doc.hyp")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto doc_hyp = load_documents(p("doc.hyp")), src = load_documents(p("test.src"));
  ASSERT_EQ(doc_hyp.size(), src.size());
  for (std::size_t d = 0; d < src.size(); ++d)
    EXPECT_EQ(doc_hyp.documents[d].sentences.size(), src.documents[d].sentences.size());

  EXPECT_EQ(cli({"translate", "--mode", "second-pass", "--input", p("test.src"), "--model", p("fwd.ckpt"), "--vocab",
                 p("vocab"), "--out", p("x")})
                .code,
            kExitConfigError);
}

TEST_F(CliTest, PipelineRunCachesStages) {
  nlohmann::json config = {
      {"workdir", "work"},
      {"stages",
       {{{"name", "vocab"},
         {"inputs", {{"src", "train.src"}, {"tgt", "train.tgt"}}},
         {"steps", {{"subword", "--input", "{in:src}", "--input", "{in:tgt}", "--size", "80", "--out", "{out:vocab}"}}}},
        {{"name", "model"},
         {"inputs", {{"src", "train.src"}, {"tgt", "train.tgt"}, {"vocab", "@vocab/vocab"}, {"config", "model.json"}}},
         {"steps",
          {{"train", "--src", "{in:src}", "--tgt", "{in:tgt}", "--vocab", "{in:vocab}", "--config", "{in:config}",
            "--out", "{out:model}"}}}},
        {{"name", "eval"},
         {"inputs",
          {{"src", "test.src"}, {"tgt", "test.tgt"}, {"manifest", "test.manifest"}, {"vocab", "@vocab/vocab"},
           {"model", "@model/model"}}},
         {"steps",
          {{"translate", "--input", "{in:src}", "--model", "{in:model}", "--vocab", "{in:vocab}", "--greedy", "--out",
            "{out:hyp}"},
           {"evaluate", "--hyp", "{out:hyp}", "--ref", "{in:tgt}", "--manifest", "{in:manifest}", "--out",
            "{out:report}"}}}}}}};
  write_file(dir / "pipeline.json", config.dump(2));
  auto first = cli({"pipeline", "run", p("pipeline.json")});
  ASSERT_EQ(first.code, kExitOk) << first.err;
  EXPECT_NE(first.out.find("3 stages, 0 up to date"), std::string::npos) << first.out;
  auto second = cli({"pipeline", "run", p("pipeline.json")});
  EXPECT_NE(second.out.find("3 stages, 3 up to date"), std::string::npos) << second.out;

  config["stages"][2]["steps"][0][1] = "--nope";
  write_file(dir / "pipeline.json", config.dump(2));
  auto failed = cli({"pipeline", "run", p("pipeline.json")});
  EXPECT_EQ(failed.code, kExitStageFailure);
  EXPECT_NE(failed.err.find("eval"), std::string::npos);
}

}  // namespace
}  // namespace docnmt
