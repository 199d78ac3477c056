#include "docnmt/docmark.h"

#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "docnmt/error.h"
#include "support/oracles.h"

namespace docnmt {
namespace {

using special::kBeg;
using special::kBrk;
using special::kCnt;
using special::kEnd;
using special::kSep;

std::vector<TokenIds> sentences_of_lengths(const std::vector<int>& lengths) {
  std::vector<TokenIds> out;
  TokenId next = special::kCount;
  for (int n : lengths) {
    TokenIds s;
    for (int k = 0; k < n; ++k) s.push_back(next++ % 50 + special::kCount);
    out.push_back(s);
  }
  return out;
}

std::vector<int> counts_of(const MarkupResult& r) {
  std::vector<int> out;
  for (const auto& s : r.sequences) out.push_back(s.sentence_count);
  return out;
}

void expect_well_formed(const std::vector<MarkedSequence>& chunks) {
  ASSERT_FALSE(chunks.empty());
  int brk = 0, cnt = 0;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    const auto& ids = chunks[c].ids;
    EXPECT_EQ(ids.front(), c == 0 ? kBeg : kCnt);
    EXPECT_EQ(ids.back(), c + 1 == chunks.size() ? kEnd : kBrk);
    EXPECT_EQ(chunks[c].opener, ids.front());
    EXPECT_EQ(chunks[c].closer, ids.back());
    brk += ids.back() == kBrk;
    cnt += ids.front() == kCnt;
    EXPECT_EQ(std::count(ids.begin(), ids.end(), kSep), chunks[c].sentence_count);
    EXPECT_EQ(ids[ids.size() - 2], kSep);
  }
  EXPECT_EQ(brk, cnt);
}

SubwordVocab toy_vocab() {
  return SubwordVocab::train({"the toys plans to sell stores", "Toys R Us Plans", "a b c d e f g h"}, 200);
}

TEST(Docmark, ShortDocumentIsOneSequence) {
  auto vocab = toy_vocab();
  Document doc{"d", Origin::unknown, {"Toys R Us Plans", "the toys", "sell stores"}};
  auto r = mark_up(doc, vocab);
  ASSERT_EQ(r.sequences.size(), 1u);
  const auto& ids = r.sequences[0].ids;
  TokenIds expected{kBeg};
  for (const auto& s : doc.sentences) {
    auto e = vocab.encode(s);
    expected.insert(expected.end(), e.begin(), e.end());
    expected.push_back(kSep);
  }
  expected.push_back(kEnd);
  EXPECT_EQ(ids, expected);
  EXPECT_EQ(r.sequences[0].sentence_count, 3);
  EXPECT_EQ(render_marked(r.sequences[0], vocab), "<BEG> Toys R Us Plans<SEP> the toys<SEP> sell stores<SEP><END>");
}

TEST(Docmark, SingleSentenceDocument) {
  auto vocab = toy_vocab();
  auto r = mark_up({"d", Origin::unknown, {"a b"}}, vocab);
  ASSERT_EQ(r.sequences.size(), 1u);
  auto s = vocab.encode("a b");
  TokenIds expected{kBeg};
  expected.insert(expected.end(), s.begin(), s.end());
  expected.push_back(kSep);
  expected.push_back(kEnd);
  EXPECT_EQ(r.sequences[0].ids, expected);
}

TEST(Docmark, FortySentencesOfThirtyTokens) {
  std::vector<int> lengths(40, 30);
  auto r = mark_up_ids(sentences_of_lengths(lengths), 1000);
  EXPECT_EQ(counts_of(r), testing::greedy_pack_counts(lengths, 1000));
  EXPECT_EQ(counts_of(r), (std::vector<int>{32, 8}));
  for (const auto& s : r.sequences) EXPECT_LE(s.ids.size(), 1000u);
  expect_well_formed(r.sequences);
}

TEST(Docmark, GreedyPackingMatchesOracleOnRandomLengths) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> lengths(1 + rng() % 30);
    for (auto& n : lengths) n = 1 + static_cast<int>(rng() % 40);
    int limit = 5 + static_cast<int>(rng() % 120);
    auto r = mark_up_ids(sentences_of_lengths(lengths), limit);
    ASSERT_EQ(counts_of(r), testing::greedy_pack_counts(lengths, limit)) << "trial " << trial;
    expect_well_formed(r.sequences);
    for (const auto& s : r.sequences) {
      if (s.sentence_count >= 2) EXPECT_LE(static_cast<int>(s.ids.size()), limit);
      EXPECT_EQ(s.overlong, static_cast<int>(s.ids.size()) > limit);
    }
    std::size_t overlong = std::count_if(r.sequences.begin(), r.sequences.end(), [](auto& s) { return s.overlong; });
    EXPECT_EQ(r.warnings.size(), overlong);
  }
}

TEST(Docmark, OverlongSentenceIsEmittedAloneWithWarning) {
  auto r = mark_up_ids(sentences_of_lengths({3, 50, 3}), 20);
  ASSERT_EQ(counts_of(r), (std::vector<int>{1, 1, 1}));
  EXPECT_TRUE(r.sequences[1].overlong);
  EXPECT_EQ(r.warnings.size(), 1u);
}

TEST(Docmark, JointPackingMatchesOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    std::size_t n = 1 + rng() % 25;
    std::vector<int> a(n), b(n);
    for (auto& x : a) x = 1 + static_cast<int>(rng() % 30);
    for (auto& x : b) x = 1 + static_cast<int>(rng() % 30);
    int limit = 10 + static_cast<int>(rng() % 100);
    auto r = mark_up_parallel_ids(sentences_of_lengths(a), sentences_of_lengths(b), limit);
    std::vector<int> src_counts, tgt_counts;
    std::vector<MarkedSequence> src_chunks, tgt_chunks;
    for (const auto& [s, t] : r.sequences) {
      src_counts.push_back(s.sentence_count);
      tgt_counts.push_back(t.sentence_count);
      EXPECT_EQ(s.first_sentence, t.first_sentence);
      src_chunks.push_back(s);
      tgt_chunks.push_back(t);
    }
    ASSERT_EQ(src_counts, testing::joint_pack_counts(a, b, limit)) << "trial " << trial;
    EXPECT_EQ(src_counts, tgt_counts);
    expect_well_formed(src_chunks);
    expect_well_formed(tgt_chunks);
  }
}

TEST(Docmark, LongSourceDictatesSharedBreaks) {
  std::vector<int> src(6, 20), tgt(6, 2);
  auto r = mark_up_parallel_ids(sentences_of_lengths(src), sentences_of_lengths(tgt), 50);
  std::vector<int> counts;
  for (const auto& p : r.sequences) counts.push_back(p.first.sentence_count);
  EXPECT_EQ(counts, testing::greedy_pack_counts(src, 50));
  EXPECT_EQ(counts, (std::vector<int>{2, 2, 2}));
}

TEST(Docmark, JointPackingTakesTheFinerSide) {
  // Alone, side a packs as {2,2} and side b as {1,2,1}.
  std::vector<int> a{10, 10, 10, 10}, b{20, 8, 8, 20};
  const int limit = 26;
  ASSERT_EQ(testing::greedy_pack_counts(a, limit), (std::vector<int>{2, 2}));
  ASSERT_EQ(testing::greedy_pack_counts(b, limit), (std::vector<int>{1, 2, 1}));
  auto r = mark_up_parallel_ids(sentences_of_lengths(a), sentences_of_lengths(b), limit);
  EXPECT_EQ(r.sequences.size(), 3u);
}

TEST(Docmark, StripMarkupInvertsMarkUp) {
  std::mt19937_64 rng(6);
  auto corpus = testing::random_monolingual(rng, 1000, "rt");
  auto vocab = train_subwords(corpus, 500);
  for (const auto& doc : corpus.documents) {
    int longest = 0;
    for (const auto& s : doc.sentences) longest = std::max(longest, static_cast<int>(vocab.encode(s).size()));
    int limit = longest + 3 + static_cast<int>(rng() % 40);
    auto r = mark_up(doc, vocab, limit);
    EXPECT_TRUE(r.warnings.empty());
    std::vector<Sentence> back;
    for (const auto& seq : r.sequences) {
      auto part = strip_markup(seq, vocab);
      EXPECT_EQ(static_cast<int>(part.size()), seq.sentence_count);
      back.insert(back.end(), part.begin(), part.end());
      EXPECT_EQ(parse_marked(render_marked(seq, vocab), vocab).ids, seq.ids);
    }
    ASSERT_EQ(back, doc.sentences) << doc.id;
    expect_well_formed(r.sequences);
  }
}

TEST(Docmark, ParallelRoundTripKeepsChunksAligned) {
  std::mt19937_64 rng(7);
  auto corpus = testing::random_parallel(rng, 1000, "prt");
  auto vocab = train_subwords(corpus, 500);
  for (const auto& pd : corpus.pairs) {
    auto r = mark_up_parallel(pd, vocab, 40);
    std::vector<Sentence> src, tgt;
    for (const auto& [s, t] : r.sequences) {
      ASSERT_EQ(s.sentence_count, t.sentence_count);
      auto a = strip_markup(s, vocab), b = strip_markup(t, vocab);
      src.insert(src.end(), a.begin(), a.end());
      tgt.insert(tgt.end(), b.begin(), b.end());
    }
    EXPECT_EQ(src, pd.src.sentences);
    EXPECT_EQ(tgt, pd.tgt.sentences);
  }
}

TEST(Docmark, StripRejectsMalformedSequences) {
  auto vocab = toy_vocab();
  TokenId a = vocab.encode("a")[0];
  EXPECT_THROW(split_marked(TokenIds{kBeg, a, kSep}), MalformedMarkup);          // no closer
  EXPECT_THROW(split_marked(TokenIds{a, kSep, kEnd}), MalformedMarkup);          // no opener
  EXPECT_THROW(split_marked(TokenIds{kBeg, a, kSep, kSep, kEnd}), MalformedMarkup);  // empty segment
  EXPECT_THROW(split_marked(TokenIds{kBeg, a, kEnd}), MalformedMarkup);          // unterminated
  EXPECT_THROW(split_marked(TokenIds{}), MalformedMarkup);
}

TEST(Docmark, SeparatorCountGivesSentenceCount) {
  auto vocab = toy_vocab();
  TokenId a = vocab.encode("a")[0], b = vocab.encode("b")[0];
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    TokenIds ids{kBeg};
    int k = 1 + static_cast<int>(rng() % 10);
    for (int s = 0; s < k; ++s) {
      int len = 1 + static_cast<int>(rng() % 4);
      for (int t = 0; t < len; ++t) ids.push_back(rng() % 2 ? a : b);
      ids.push_back(kSep);
    }
    ids.push_back(kEnd);
    EXPECT_EQ(static_cast<int>(strip_markup(ids, vocab).size()), k);
  }
}

TEST(Docmark, EqualListsAlignOneToOne) {
  std::vector<Sentence> a{"a b c", "d e", "f g h i"}, b{"c b a", "e d", "i h g f"};
  auto al = align_sentences(a, b);
  ASSERT_EQ(al.links.size(), 3u);
  for (const auto& l : al.links) EXPECT_TRUE(l.is_one_to_one());
}

TEST(Docmark, SingletonListsAlignOneToOne) {
  std::vector<Sentence> a{"a b c d e f"}, b{"x"};
  auto al = align_sentences(a, b);
  ASSERT_EQ(al.links.size(), 1u);
  EXPECT_TRUE(al.links[0].is_one_to_one());
}

TEST(Docmark, ExtraShortSentenceGivesOneNonOneToOneLink) {
  std::vector<int> a{10, 12, 1, 9}, b{10, 12, 9};
  auto al = align_lengths(a, b);
  auto non11 = std::count_if(al.links.begin(), al.links.end(), [](auto& l) { return !l.is_one_to_one(); });
  EXPECT_EQ(non11, 1);
  auto oracle = testing::exhaustive_alignment(a, b);
  EXPECT_NEAR(al.cost, oracle.cost, 1e-9);
}

TEST(Docmark, AlignmentCostMatchesExhaustiveSearch) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 400; ++trial) {
    std::vector<int> a(1 + rng() % 6), b(1 + rng() % 6);
    for (auto& x : a) x = 1 + static_cast<int>(rng() % 15);
    for (auto& x : b) x = 1 + static_cast<int>(rng() % 15);
    auto al = align_lengths(a, b);
    auto oracle = testing::exhaustive_alignment(a, b);
    ASSERT_NEAR(al.cost, oracle.cost, 1e-9) << "trial " << trial;
    // The returned path is one of the optimal ones.
    std::vector<testing::OracleLink> path;
    int i = 0, j = 0;
    for (const auto& l : al.links) {
      EXPECT_EQ(l.a_begin, i);
      EXPECT_EQ(l.b_begin, j);
      i += l.a_len;
      j += l.b_len;
      EXPECT_FALSE(l.a_len == 0 && l.b_len == 0);
      EXPECT_LE(l.a_len, 2);
      EXPECT_LE(l.b_len, 2);
      path.push_back({l.a_len, l.b_len});
    }
    EXPECT_EQ(i, static_cast<int>(a.size()));
    EXPECT_EQ(j, static_cast<int>(b.size()));
    bool found = std::any_of(oracle.best_paths.begin(), oracle.best_paths.end(), [&](const auto& p) {
      return p.size() == path.size() && std::equal(p.begin(), p.end(), path.begin(), [](auto& x, auto& y) {
               return x.a == y.a && x.b == y.b;
             });
    });
    EXPECT_TRUE(found) << "trial " << trial;
  }
}

TEST(Docmark, LinkCostFollowsDefinition) {
  EXPECT_DOUBLE_EQ(link_cost(4, 4, 1, 1), 0.0);
  EXPECT_DOUBLE_EQ(link_cost(5, 0, 1, 0), 4.0 + 5.0 / std::sqrt(5.0));
  EXPECT_DOUBLE_EQ(link_cost(9, 7, 2, 1), 2.0 + 2.0 / 4.0);
}

TEST(Docmark, FailsafeSkippedWhenCountsMatch) {
  std::vector<Sentence> out{"x y", "z"}, tmpl{"a b", "c"};
  EXPECT_EQ(failsafe_merge(out, tmpl), out);
}

TEST(Docmark, FailsafeFallsBackToTemplateOnEmptyOutput) {
  std::vector<Sentence> tmpl{"a b", "c"};
  EXPECT_EQ(failsafe_merge(std::vector<Sentence>{}, tmpl), tmpl);
}

TEST(Docmark, FailsafeKeepsTemplateAtMergedPosition) {
  // The document-level output merged template sentences 2 and 3.
  std::vector<Sentence> tmpl{"t1 t1 t1 t1 t1", "t2 t2 t2 t2", "t3 t3 t3 t3 t3", "t4 t4 t4 t4 t4 t4"};
  std::vector<Sentence> out{"d1 d1 d1 d1 d1", "d23 d23 d23 d23 d23 d23 d23 d23 d23", "d4 d4 d4 d4 d4 d4"};
  auto merged = failsafe_merge(out, tmpl);
  auto al = align_sentences(out, tmpl);
  std::vector<Sentence> expected = tmpl;
  for (const auto& l : al.links)
    if (l.is_one_to_one()) expected[static_cast<std::size_t>(l.b_begin)] = out[static_cast<std::size_t>(l.a_begin)];
  EXPECT_EQ(merged, expected);
  EXPECT_EQ(merged, (std::vector<Sentence>{"d1 d1 d1 d1 d1", "t2 t2 t2 t2", "t3 t3 t3 t3 t3", "d4 d4 d4 d4 d4 d4"}));
}

TEST(Docmark, FailsafeAlwaysReturnsTemplateLength) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Sentence> out(rng() % 8), tmpl(1 + rng() % 8);
    for (auto& s : out) s = testing::random_sentence(rng);
    for (auto& s : tmpl) s = testing::random_sentence(rng);
    EXPECT_EQ(failsafe_merge(out, tmpl).size(), tmpl.size());
  }
}

}  // namespace
}  // namespace docnmt
