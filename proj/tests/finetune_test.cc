#include <gtest/gtest.h>

#include "docnmt/decode.h"
#include "docnmt/eval.h"
#include "docnmt/train.h"
#include "support/toy.h"

namespace docnmt {
namespace {

struct CipherSetup {
  SubwordVocab vocab;
  Corpus first, second, dev;
};

CipherSetup cipher_setup() {
  auto lex = testing::make_lexicon(24, 5);
  testing::CipherShape shape{1, 1, 3, 6};
  CipherSetup s;
  s.first = testing::cipher_corpus(lex, 2000, shape, 6, "first");
  s.second = testing::cipher_corpus(lex, 2000, shape, 7, "second");
  s.dev = testing::cipher_corpus(lex, 60, shape, 8, "dev");
  auto text = all_sentences(target_side(s.first));
  for (const auto& t : all_sentences(source_side(s.first))) text.push_back(t);
  s.vocab = SubwordVocab::train(text, 120);
  return s;
}

double dev_bleu(const Model& m, const CipherSetup& s) {
  auto view = std::shared_ptr<const Model>(&m, [](const Model*) {});
  TransformerScorer scorer(view);
  DecodeConfig c;
  c.mode = DecodeMode::greedy;
  c.max_out_len = m.config().max_len;
  auto hyps = translate_corpus(scorer, c, s.dev, s.vocab, TranslateMode::sentence).hyps;
  return bleu(all_sentences(hyps), all_sentences(target_side(s.dev))).score;
}

TEST(FineTune, SameDistributionDoesNotDegrade) {
  auto s = cipher_setup();
  TransformerConfig mc;
  mc.depth = 1;
  mc.model_dim = 32;
  mc.ff_dim = 64;
  mc.heads = 4;
  mc.max_len = 32;
  mc.vocab_size = s.vocab.size();
  TrainConfig tc;
  tc.learning_rate = 2e-3;
  tc.warmup_updates = 50;
  tc.optimizer_delay = 1;
  tc.batch_tokens = 300;
  tc.max_updates = 2000;
  tc.eval_every = 250;
  tc.patience = 3;
  Model m(mc);
  m.init(1);
  auto dev = [&](const Model& model) { return dev_bleu(model, s); };
  ShuffledBatches first(build_examples(s.first, s.vocab, Level::sentence), tc.batch_tokens, 1);
  train(m, tc, first, nullptr, dev);
  double before = dev_bleu(m, s);
  ShuffledBatches second(build_examples(s.second, s.vocab, Level::sentence), tc.batch_tokens, 2);
  auto result = fine_tune(m, tc, second, dev);
  double after = dev_bleu(m, s);
  RecordProperty("before", std::to_string(before));
  RecordProperty("after", std::to_string(after));
  ASSERT_TRUE(result.best_metric.has_value());
  EXPECT_DOUBLE_EQ(after, *result.best_metric);
  EXPECT_GE(after, before - 0.5) << "before " << before << " after " << after;
}

}  // namespace
}  // namespace docnmt
