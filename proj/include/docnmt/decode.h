#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "docnmt/corpus.h"
#include "docnmt/docmark.h"
#include "docnmt/transformer.h"

namespace docnmt {

// Incremental scoring state for a set of live hypotheses.
class DecoderSession {
 public:
  virtual ~DecoderSession() = default;
  // Row h holds next-token log-probabilities of live hypothesis h.
  virtual void next_log_probs(Matrix<double>& out) = 0;
  // New live set: hypothesis i continues old hypothesis parents[i] with tokens[i].
  virtual void advance(std::span<const int> parents, std::span<const TokenId> tokens) = 0;
};

class ScoringModel {
 public:
  virtual ~ScoringModel() = default;
  virtual int vocab_size() const = 0;
  virtual int max_len() const = 0;
  // Starts with one empty hypothesis. `aux` is the first-pass context, if any.
  virtual std::unique_ptr<DecoderSession> start(const TokenIds& src, const TokenIds* aux) const = 0;
};

class TransformerScorer : public ScoringModel {
 public:
  explicit TransformerScorer(std::shared_ptr<const Model> model) : model_(std::move(model)) {}
  int vocab_size() const override { return model_->config().vocab_size; }
  int max_len() const override { return model_->config().max_len; }
  std::unique_ptr<DecoderSession> start(const TokenIds& src, const TokenIds* aux) const override;
  const Model& model() const { return *model_; }

 private:
  std::shared_ptr<const Model> model_;
};

struct EnsembleMember {
  std::shared_ptr<const ScoringModel> model;
  double weight = 1.0;
};

struct EnsembleSpec {
  std::vector<EnsembleMember> members;

  // Throws InvalidConfig: no members, non-positive weight, or members that
  // disagree on vocabulary size or max_len.
  void validate() const;
};

// (sum_m w_m * log p_m) / (sum_m w_m), row by row.
Matrix<double> ensemble_logprob(std::span<const double> weights, std::span<const Matrix<double>> member_log_probs);

class Ensemble : public ScoringModel {
 public:
  explicit Ensemble(EnsembleSpec spec);
  int vocab_size() const override;
  int max_len() const override;
  std::unique_ptr<DecoderSession> start(const TokenIds& src, const TokenIds* aux) const override;
  const EnsembleSpec& spec() const { return spec_; }

 private:
  EnsembleSpec spec_;
};

// Spec file: one "checkpoint-path<TAB>weight" line per member; relative paths
// resolve against the spec file's directory. The weight column is optional.
EnsembleSpec load_ensemble_spec(const std::filesystem::path& path);
EnsembleSpec single_model(std::shared_ptr<const Model> model, double weight = 1.0);

enum class DecodeMode { beam, greedy, sample };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::beam;
  int beam_size = 4;
  int max_out_len = 256;
  double length_norm_alpha = 0.6;
  double temperature = 1.0;
  std::uint64_t seed = 1;

  // Throws InvalidConfig.
  void validate(int max_len) const;
};

struct Hypothesis {
  TokenIds ids;         // <EOS> excluded
  double score = 0.0;   // summed log-probability, <EOS> included when completed
  bool completed = false;
};

// Highest score / len^alpha among completed hypotheses (len counts <EOS>).
// When none completes within max_out_len, the best partial hypothesis is
// returned with completed == false.
Hypothesis beam_decode(const ScoringModel& model, const DecodeConfig& config, const TokenIds& src,
                       const TokenIds* aux = nullptr);
Hypothesis greedy_decode(const ScoringModel& model, const DecodeConfig& config, const TokenIds& src,
                         const TokenIds* aux = nullptr);
// Each step emits argmax(log p / temperature + Gumbel noise). The generator
// is seeded with seed ^ input_index.
Hypothesis sample_decode(const ScoringModel& model, const DecodeConfig& config, const TokenIds& src,
                         std::uint64_t input_index, const TokenIds* aux = nullptr);
// Dispatches on config.mode.
Hypothesis decode(const ScoringModel& model, const DecodeConfig& config, const TokenIds& src,
                  std::uint64_t input_index = 0, const TokenIds* aux = nullptr);

// Index of the largest entry of logits/temperature + standard Gumbel noise.
int gumbel_argmax(std::span<const double> log_probs, double temperature, Rng& rng);

// Splits decoder output into sentences on <SEP>, ignoring other mark-up and
// dropping empty segments. Never throws on malformed mark-up.
std::vector<Sentence> split_output(std::span<const TokenId> ids, const SubwordVocab& vocab);

struct DocumentTranslation {
  Document document;
  bool used_failsafe = false;
  std::vector<std::string> warnings;
};

// Sentence-by-sentence decoding of plain (unmarked) sentences.
Document translate_sentences(const ScoringModel& model, const DecodeConfig& config, const Document& doc,
                             const SubwordVocab& vocab, std::uint64_t first_index = 0);

// Decodes each marked chunk of `doc`. When the output sentence count differs
// from the input, a per-sentence translation with the same model serves as
// the fail-safe template. Always returns |doc| sentences.
DocumentTranslation translate_document(const ScoringModel& model, const DecodeConfig& config, const Document& doc,
                                       const SubwordVocab& vocab, int limit = kDefaultMaxDocTokens,
                                       std::uint64_t first_index = 0);

// Pairs sampled (or decoded) sources with the authentic target documents.
// Throws EmptyCorpus for an empty input.
Corpus backtranslate_corpus(const ScoringModel& reverse, const DecodeConfig& config, const Corpus& mono,
                            const SubwordVocab& vocab);

// Dual-encoder decoding with the first pass as second context and fail-safe
// template. Throws LengthMismatch.
DocumentTranslation second_pass_decode(const ScoringModel& model, const DecodeConfig& config, const Document& src,
                                       const Document& first_pass, const SubwordVocab& vocab,
                                       int limit = kDefaultMaxDocTokens, std::uint64_t first_index = 0);

enum class TranslateMode { sentence, document, second_pass };
std::string_view to_string(TranslateMode mode);
TranslateMode parse_translate_mode(std::string_view text);

struct CorpusTranslation {
  Corpus hyps;  // monolingual, mirroring the input documents
  int failsafe_documents = 0;
  std::vector<std::string> warnings;
};

// Translates every document of `src` (the source side when parallel).
// Second-pass mode needs `first_pass` with the same structure.
CorpusTranslation translate_corpus(const ScoringModel& model, const DecodeConfig& config, const Corpus& src,
                                   const SubwordVocab& vocab, TranslateMode mode, int limit = kDefaultMaxDocTokens,
                                   const Corpus* first_pass = nullptr);

}  // namespace docnmt
