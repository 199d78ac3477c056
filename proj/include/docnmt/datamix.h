#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "docnmt/corpus.h"
#include "docnmt/subword.h"
#include "docnmt/transformer.h"

namespace docnmt {

// Up to `max_per_doc` distinct contiguous proper spans of `doc`, drawn
// uniformly over (start, length) pairs. Ids get a "/<start>+<length>" suffix.
std::vector<ParallelDocument> sample_subdocuments(const ParallelDocument& doc, int max_per_doc,
                                                  std::uint64_t seed);

// Repeats rounds of (authentic documents + fresh sub-documents of each) until
// the corpus holds `target_sentences` sentences; the final round is cut at
// the first document that reaches the target.
Corpus augment_with_subdocuments(const Corpus& authentic, std::size_t target_sentences, int max_per_doc,
                                 std::uint64_t seed);

// Empirical document-length distribution.
class LengthSampler {
 public:
  explicit LengthSampler(std::vector<int> lengths);
  static LengthSampler from_corpus(const Corpus& corpus);
  static LengthSampler constant(int length) { return LengthSampler({length}); }

  int sample(std::mt19937_64& rng) const;
  const std::vector<int>& lengths() const { return lengths_; }

 private:
  std::vector<int> lengths_;
};

// Cuts an (already shuffled) sentence-pair list into consecutive documents
// with lengths drawn from `sampler`; the last one takes what is left.
Corpus make_fake_documents(const std::vector<std::pair<Sentence, Sentence>>& pairs, const LengthSampler& sampler,
                           std::uint64_t seed);

// floor(target/size) full copies plus documents from a seeded permutation
// until the remainder is covered. Sizes are counted in sentences. Copies get
// an "~k" id suffix so ids stay unique.
Corpus upsample(const Corpus& corpus, std::size_t target_sentences, std::uint64_t seed);

struct MixStream {
  Corpus corpus;
  double fraction = 0.0;
};

struct MixRecipe {
  std::vector<MixStream> streams;
  std::uint64_t seed = 1;

  // Throws InvalidConfig unless fractions are non-negative and sum to 1.
  void validate() const;
};

// Up-samples every stream so that each makes up its fraction of the result
// (no stream is down-sampled), then shuffles the documents.
Corpus mix(const MixRecipe& recipe);

struct FilterScore {
  double value = 0.0;
  double fwd = 0.0;  // per-token cross-entropy of tgt given src
  double bwd = 0.0;  // per-token cross-entropy of src given tgt

  static FilterScore from_components(double fwd, double bwd);
};

// Per-token cross-entropy of `predicted` given `given` under some model.
class PairScorer {
 public:
  virtual ~PairScorer() = default;
  virtual double cross_entropy_per_token(const Sentence& given, const Sentence& predicted) const = 0;
};

// Tokens are subwords of `predicted` plus the end-of-sentence symbol.
class TransformerPairScorer : public PairScorer {
 public:
  TransformerPairScorer(const Model& model, const SubwordVocab& vocab) : model_(model), vocab_(vocab) {}
  double cross_entropy_per_token(const Sentence& given, const Sentence& predicted) const override;

 private:
  const Model& model_;
  const SubwordVocab& vocab_;
};

// Throws EmptySentence.
FilterScore dual_xe_score(const PairScorer& fwd, const PairScorer& bwd, const Sentence& src, const Sentence& tgt);
// One score per sentence pair, in document order.
std::vector<FilterScore> score_corpus(const PairScorer& fwd, const PairScorer& bwd, const Corpus& corpus);

// Keeps the ceil(keep_fraction * n) lowest-scoring sentence pairs (ties by
// position), preserving order; documents left empty are dropped.
Corpus filter_corpus(const Corpus& corpus, const std::vector<FilterScore>& scores, double keep_fraction);

// Tab-separated: pair index, fwd, bwd, value.
void write_scores(const std::vector<FilterScore>& scores, const std::filesystem::path& path);
std::vector<FilterScore> read_scores(const std::filesystem::path& path);

}  // namespace docnmt
