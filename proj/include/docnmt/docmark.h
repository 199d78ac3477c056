#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "docnmt/corpus.h"
#include "docnmt/subword.h"

namespace docnmt {

inline constexpr int kDefaultMaxDocTokens = 1000;

// One length-capped chunk of a document:
//   <BEG>|<CNT>  s_1 <SEP> s_2 <SEP> ... s_k <SEP>  <END>|<BRK>
struct MarkedSequence {
  TokenIds ids;
  TokenId opener = special::kBeg;
  TokenId closer = special::kEnd;
  int sentence_count = 0;
  int first_sentence = 0;  // index of the first covered sentence in the document
  bool overlong = false;   // single sentence that alone exceeds the limit

  bool operator==(const MarkedSequence&) const = default;
};

struct MarkupResult {
  std::vector<MarkedSequence> sequences;
  std::vector<std::string> warnings;
};

struct ParallelMarkupResult {
  std::vector<std::pair<MarkedSequence, MarkedSequence>> sequences;
  std::vector<std::string> warnings;
};

// Greedy packing of already-encoded sentences. Each chunk takes the longest
// sentence prefix whose marked length (mark-up tokens included) fits `limit`.
MarkupResult mark_up_ids(std::span<const TokenIds> sentences, int limit = kDefaultMaxDocTokens);
MarkupResult mark_up(const Document& doc, const SubwordVocab& vocab,
                     int limit = kDefaultMaxDocTokens);

// Joint packing: a chunk boundary is placed where both sides still fit.
ParallelMarkupResult mark_up_parallel_ids(std::span<const TokenIds> src,
                                          std::span<const TokenIds> tgt,
                                          int limit = kDefaultMaxDocTokens);
// Joint packing over any number of aligned sides; result[c][k] is chunk c
// of side k.
struct JointMarkupResult {
  std::vector<std::vector<MarkedSequence>> chunks;
  std::vector<std::string> warnings;
};
JointMarkupResult mark_up_joint(std::span<const std::vector<TokenIds>> sides, int limit = kDefaultMaxDocTokens);

ParallelMarkupResult mark_up_parallel(const ParallelDocument& pdoc, const SubwordVocab& vocab,
                                      int limit = kDefaultMaxDocTokens);

// Splits a marked id sequence on <SEP>. Throws MalformedMarkup for a missing
// opener or closer, an empty or unterminated segment, or stray specials.
std::vector<TokenIds> split_marked(std::span<const TokenId> ids);
std::vector<Sentence> strip_markup(const MarkedSequence& seq, const SubwordVocab& vocab);
std::vector<Sentence> strip_markup(std::span<const TokenId> ids, const SubwordVocab& vocab);

// Text form used in marked corpora, one sequence per line:
//   "<BEG> first sentence<SEP> second sentence<SEP><END>"
std::string render_marked(const MarkedSequence& seq, const SubwordVocab& vocab);
// Parses the text form back; symbols are recognized with or without spaces.
MarkedSequence parse_marked(std::string_view line, const SubwordVocab& vocab);

struct AlignmentLink {
  int a_begin = 0;
  int a_len = 0;
  int b_begin = 0;
  int b_len = 0;

  bool is_one_to_one() const { return a_len == 1 && b_len == 1; }
  bool operator==(const AlignmentLink&) const = default;
};

struct Alignment {
  std::vector<AlignmentLink> links;
  double cost = 0.0;
};

struct AlignmentCosts {
  double one_to_one = 0.0;
  double insertion_deletion = 4.0;  // 1-0 and 0-1
  double merge = 2.0;               // 2-1 and 1-2
  double length_ratio = 1.0;
};

// Cost of one link of the given summed lengths and shape.
double link_cost(int len_a, int len_b, int a_count, int b_count,
                 const AlignmentCosts& costs = {});

// Monotone length-based alignment over links {1-1, 1-0, 0-1, 2-1, 1-2}.
Alignment align_lengths(std::span<const int> a, std::span<const int> b,
                        const AlignmentCosts& costs = {});
// Lengths are subword counts under `vocab`, or code-point counts without one.
Alignment align_sentences(std::span<const Sentence> a, std::span<const Sentence> b,
                          const SubwordVocab* vocab = nullptr);

// Returns |tmpl| sentences: positions 1-1 aligned with `doc_out` take the
// document-level text, every other position keeps the template sentence.
std::vector<Sentence> failsafe_merge(std::span<const Sentence> doc_out,
                                     std::span<const Sentence> tmpl,
                                     const SubwordVocab* vocab = nullptr);

}  // namespace docnmt
