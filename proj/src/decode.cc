#include "docnmt/decode.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "docnmt/checkpoint.h"
#include "docnmt/error.h"

namespace docnmt {

namespace {

class TransformerSession : public DecoderSession {
 public:
  TransformerSession(const Model& model, const TokenIds& src, const TokenIds* aux)
      : model_(model), input_(model.encode(src, aux)), caches_{model.start_cache()}, pending_{special::kEos} {}

  void next_log_probs(Matrix<double>& out) override {
    model_.decode_step(input_, caches_, pending_, scratch_);
    out = scratch_.cast<double>();
  }

  void advance(std::span<const int> parents, std::span<const TokenId> tokens) override {
    std::vector<DecoderCache<float>> next;
    next.reserve(parents.size());
    for (int p : parents) next.push_back(caches_[static_cast<std::size_t>(p)]);
    caches_ = std::move(next);
    pending_.assign(tokens.begin(), tokens.end());
  }

 private:
  const Model& model_;
  EncodedInput<float> input_;
  std::vector<DecoderCache<float>> caches_;
  TokenIds pending_;
  Matrix<float> scratch_;
};

class EnsembleSession : public DecoderSession {
 public:
  EnsembleSession(std::vector<std::unique_ptr<DecoderSession>> members, std::vector<double> weights)
      : members_(std::move(members)), weights_(std::move(weights)), scratch_(members_.size()) {}

  void next_log_probs(Matrix<double>& out) override {
    for (std::size_t m = 0; m < members_.size(); ++m) members_[m]->next_log_probs(scratch_[m]);
    out = ensemble_logprob(weights_, scratch_);
  }

  void advance(std::span<const int> parents, std::span<const TokenId> tokens) override {
    for (auto& m : members_) m->advance(parents, tokens);
  }

 private:
  std::vector<std::unique_ptr<DecoderSession>> members_;
  std::vector<double> weights_;
  std::vector<Matrix<double>> scratch_;
};

double normalized(double score, std::size_t len, double alpha) {
  return score / std::pow(static_cast<double>(std::max<std::size_t>(len, 1)), alpha);
}

std::string join_sentences(const std::vector<Sentence>& parts) {
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out += ' ';
    out += p;
  }
  return out;
}

const std::string kUnknownSentence(special::kNames[special::kUnk]);

}  // namespace

std::unique_ptr<DecoderSession> TransformerScorer::start(const TokenIds& src, const TokenIds* aux) const {
  return std::make_unique<TransformerSession>(*model_, src, aux);
}

void EnsembleSpec::validate() const {
  if (members.empty()) throw InvalidConfig("ensemble has no members");
  for (const auto& m : members) {
    if (!m.model) throw InvalidConfig("ensemble member without a model");
    if (!(m.weight > 0)) throw InvalidConfig("ensemble weights must be positive");
    if (m.model->vocab_size() != members.front().model->vocab_size())
      throw InvalidConfig("ensemble members disagree on vocabulary size");
    if (m.model->max_len() != members.front().model->max_len())
      throw InvalidConfig("ensemble members disagree on max_len");
  }
}

Matrix<double> ensemble_logprob(std::span<const double> weights, std::span<const Matrix<double>> member_log_probs) {
  if (weights.empty() || weights.size() != member_log_probs.size())
    throw InvalidConfig("ensemble_logprob: weight count does not match member count");
  double total = 0.0;
  Matrix<double> out = Matrix<double>::Zero(member_log_probs[0].rows(), member_log_probs[0].cols());
  for (std::size_t m = 0; m < weights.size(); ++m) {
    out += weights[m] * member_log_probs[m];
    total += weights[m];
  }
  return out / total;
}

Ensemble::Ensemble(EnsembleSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

int Ensemble::vocab_size() const { return spec_.members.front().model->vocab_size(); }
int Ensemble::max_len() const { return spec_.members.front().model->max_len(); }

std::unique_ptr<DecoderSession> Ensemble::start(const TokenIds& src, const TokenIds* aux) const {
  if (spec_.members.size() == 1) return spec_.members.front().model->start(src, aux);
  std::vector<std::unique_ptr<DecoderSession>> sessions;
  std::vector<double> weights;
  for (const auto& m : spec_.members) {
    sessions.push_back(m.model->start(src, aux));
    weights.push_back(m.weight);
  }
  return std::make_unique<EnsembleSession>(std::move(sessions), std::move(weights));
}

EnsembleSpec load_ensemble_spec(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  EnsembleSpec spec;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    std::filesystem::path member = line.substr(0, tab);
    double weight = 1.0;
    if (tab != std::string::npos) {
      try {
        weight = std::stod(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bad weight");
      }
    }
    if (member.is_relative()) member = path.parent_path() / member;
    auto model = std::make_shared<const Model>(load_checkpoint(member));
    spec.members.push_back({std::make_shared<TransformerScorer>(model), weight});
  }
  spec.validate();
  return spec;
}

EnsembleSpec single_model(std::shared_ptr<const Model> model, double weight) {
  EnsembleSpec spec;
  spec.members.push_back({std::make_shared<TransformerScorer>(std::move(model)), weight});
  return spec;
}

void DecodeConfig::validate(int max_len) const {
  if (beam_size < 1) throw InvalidConfig("beam_size must be >= 1");
  if (max_out_len < 1 || max_out_len > max_len)
    throw InvalidConfig("max_out_len must lie in [1, " + std::to_string(max_len) + "]");
  if (mode == DecodeMode::sample && !(temperature > 0)) throw InvalidConfig("temperature must be positive");
}

Hypothesis beam_decode(const ScoringModel& model, const DecodeConfig& config, const TokenIds& src,
                       const TokenIds* aux) {
  config.validate(model.max_len());
  auto session = model.start(src, aux);
  struct Live {
    TokenIds ids;
    double score;
  };
  struct Candidate {
    double score;
    int parent;
    TokenId token;
  };
  std::vector<Live> live = {{{}, 0.0}};
  std::vector<Hypothesis> finished;
  Matrix<double> lp;
  const auto before = [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.parent != b.parent) return a.parent < b.parent;
    return a.token < b.token;
  };
  for (int t = 0; t < config.max_out_len; ++t) {
    session->next_log_probs(lp);
    const std::size_t k = static_cast<std::size_t>(config.beam_size) - finished.size();
    std::vector<Candidate> candidates;
    candidates.reserve(static_cast<std::size_t>(lp.size()));
    for (int h = 0; h < static_cast<int>(live.size()); ++h)
      for (int v = 0; v < lp.cols(); ++v) {
        double s = live[static_cast<std::size_t>(h)].score + lp(h, v);
        if (s > -std::numeric_limits<double>::infinity()) candidates.push_back({s, h, v});
      }
    const std::size_t take = std::min(k, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(take), candidates.end(), before);
    std::vector<Live> next;
    std::vector<int> parents;
    TokenIds tokens;
    for (std::size_t c = 0; c < take; ++c) {
      const auto& cand = candidates[c];
      const auto& parent = live[static_cast<std::size_t>(cand.parent)];
      if (cand.token == special::kEos) {
        finished.push_back({parent.ids, cand.score, true});
        continue;
      }
      Live extended{parent.ids, cand.score};
      extended.ids.push_back(cand.token);
      next.push_back(std::move(extended));
      parents.push_back(cand.parent);
      tokens.push_back(cand.token);
    }
    live = std::move(next);
    if (live.empty() || finished.size() >= static_cast<std::size_t>(config.beam_size)) break;
    if (t + 1 < config.max_out_len) session->advance(parents, tokens);
  }
  const Hypothesis* best = nullptr;
  double best_score = -std::numeric_limits<double>::infinity();
  for (const auto& h : finished) {
    double s = normalized(h.score, h.ids.size() + 1, config.length_norm_alpha);
    if (!best || s > best_score) {
      best = &h;
      best_score = s;
    }
  }
  if (best) return *best;
  Hypothesis partial;
  for (const auto& h : live) {
    double s = normalized(h.score, h.ids.size(), config.length_norm_alpha);
    if (partial.ids.empty() || s > best_score) {
      partial = {h.ids, h.score, false};
      best_score = s;
    }
  }
  return partial;
}

namespace {

template <class Pick>
Hypothesis single_path(const ScoringModel& model, const DecodeConfig& config, const TokenIds& src, const TokenIds* aux,
                       Pick pick) {
  config.validate(model.max_len());
  auto session = model.start(src, aux);
  Hypothesis hyp;
  Matrix<double> lp;
  const int parent = 0;
  for (int t = 0; t < config.max_out_len; ++t) {
    session->next_log_probs(lp);
    TokenId token = pick(lp);
    hyp.score += lp(0, token);
    if (token == special::kEos) {
      hyp.completed = true;
      return hyp;
    }
    hyp.ids.push_back(token);
    if (t + 1 < config.max_out_len) session->advance(std::span<const int>(&parent, 1), std::span<const TokenId>(&token, 1));
  }
  return hyp;
}

}  // namespace

Hypothesis greedy_decode(const ScoringModel& model, const DecodeConfig& config, const TokenIds& src,
                         const TokenIds* aux) {
  return single_path(model, config, src, aux, [](const Matrix<double>& lp) {
    Eigen::Index best;
    lp.row(0).maxCoeff(&best);
    return static_cast<TokenId>(best);
  });
}

int gumbel_argmax(std::span<const double> log_probs, double temperature, Rng& rng) {
  int best = -1;
  double best_value = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    // Uniform strictly inside (0, 1) so both logarithms stay finite.
    double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    double value = log_probs[i] / temperature - std::log(-std::log(u));
    if (best < 0 || value > best_value) {
      best = static_cast<int>(i);
      best_value = value;
    }
  }
  return best;
}

Hypothesis sample_decode(const ScoringModel& model, const DecodeConfig& config, const TokenIds& src,
                         std::uint64_t input_index, const TokenIds* aux) {
  if (!(config.temperature > 0)) throw InvalidConfig("temperature must be positive");
  Rng rng(config.seed ^ input_index);
  return single_path(model, config, src, aux, [&](const Matrix<double>& lp) {
    return static_cast<TokenId>(
        gumbel_argmax(std::span<const double>(lp.data(), static_cast<std::size_t>(lp.cols())), config.temperature, rng));
  });
}

Hypothesis decode(const ScoringModel& model, const DecodeConfig& config, const TokenIds& src,
                  std::uint64_t input_index, const TokenIds* aux) {
  switch (config.mode) {
    case DecodeMode::beam: return beam_decode(model, config, src, aux);
    case DecodeMode::greedy: return greedy_decode(model, config, src, aux);
    case DecodeMode::sample: return sample_decode(model, config, src, input_index, aux);
  }
  throw InvalidConfig("unknown decode mode");
}

std::vector<Sentence> split_output(std::span<const TokenId> ids, const SubwordVocab& vocab) {
  std::vector<Sentence> out;
  TokenIds current;
  auto flush = [&]() {
    if (current.empty()) return;
    auto text = vocab.decode(current);
    if (!text.empty()) out.push_back(std::move(text));
    current.clear();
  };
  for (TokenId id : ids) {
    if (id == special::kSep) flush();
    else if (special::is_markup(id) || id == special::kEos || id == special::kPad) continue;
    else current.push_back(id);
  }
  flush();
  return out;
}

Document translate_sentences(const ScoringModel& model, const DecodeConfig& config, const Document& doc,
                             const SubwordVocab& vocab, std::uint64_t first_index) {
  Document out{doc.id, doc.origin, {}};
  for (std::size_t i = 0; i < doc.sentences.size(); ++i) {
    auto hyp = decode(model, config, vocab.encode(doc.sentences[i]), first_index + i);
    auto text = join_sentences(split_output(hyp.ids, vocab));
    out.sentences.push_back(text.empty() ? kUnknownSentence : text);
  }
  return out;
}

DocumentTranslation translate_document(const ScoringModel& model, const DecodeConfig& config, const Document& doc,
                                       const SubwordVocab& vocab, int limit, std::uint64_t first_index) {
  DocumentTranslation result;
  result.document = {doc.id, doc.origin, {}};
  auto marked = mark_up(doc, vocab, limit);
  result.warnings = marked.warnings;
  std::vector<Sentence> produced;
  for (std::size_t c = 0; c < marked.sequences.size(); ++c) {
    auto hyp = decode(model, config, marked.sequences[c].ids, first_index + c);
    if (!hyp.completed) result.warnings.push_back("chunk " + std::to_string(c) + " ended without <EOS>");
    auto part = split_output(hyp.ids, vocab);
    produced.insert(produced.end(), part.begin(), part.end());
  }
  if (produced.size() == doc.sentences.size()) {
    result.document.sentences = std::move(produced);
    return result;
  }
  result.used_failsafe = true;
  std::vector<Sentence> tmpl;
  for (std::size_t i = 0; i < doc.sentences.size(); ++i) {
    TokenIds ids = vocab.encode(doc.sentences[i]);
    auto single = mark_up_ids(std::span<const TokenIds>(&ids, 1), limit);
    auto hyp = decode(model, config, single.sequences.front().ids, first_index + marked.sequences.size() + i);
    auto text = join_sentences(split_output(hyp.ids, vocab));
    tmpl.push_back(text.empty() ? kUnknownSentence : text);
  }
  result.document.sentences = failsafe_merge(produced, tmpl, &vocab);
  return result;
}

Corpus backtranslate_corpus(const ScoringModel& reverse, const DecodeConfig& config, const Corpus& mono,
                            const SubwordVocab& vocab) {
  if (mono.kind != CorpusKind::monolingual) throw Error("backtranslate_corpus: monolingual corpus required");
  if (mono.empty()) throw EmptyCorpus("backtranslate_corpus: empty corpus");
  Corpus out = Corpus::parallel();
  std::uint64_t index = 0;
  for (const auto& doc : mono.documents) {
    ParallelDocument pd;
    pd.src = translate_sentences(reverse, config, doc, vocab, index);
    pd.tgt = doc;
    pd.src.origin = pd.tgt.origin = Origin::synthetic;
    index += doc.sentences.size();
    out.pairs.push_back(std::move(pd));
  }
  return out;
}

DocumentTranslation second_pass_decode(const ScoringModel& model, const DecodeConfig& config, const Document& src,
                                       const Document& first_pass, const SubwordVocab& vocab, int limit,
                                       std::uint64_t first_index) {
  if (src.sentences.size() != first_pass.sentences.size())
    throw LengthMismatch("second_pass_decode: source has " + std::to_string(src.sentences.size()) +
                         " sentences, first pass " + std::to_string(first_pass.sentences.size()));
  DocumentTranslation result;
  result.document = {src.id, src.origin, {}};
  std::vector<TokenIds> s, f;
  for (const auto& x : src.sentences) s.push_back(vocab.encode(x));
  for (const auto& x : first_pass.sentences) f.push_back(vocab.encode(x));
  auto marked = mark_up_parallel_ids(s, f, limit);
  result.warnings = marked.warnings;
  std::vector<Sentence> produced;
  for (std::size_t c = 0; c < marked.sequences.size(); ++c) {
    const auto& [src_seq, fp_seq] = marked.sequences[c];
    auto hyp = decode(model, config, src_seq.ids, first_index + c, &fp_seq.ids);
    if (!hyp.completed) result.warnings.push_back("chunk " + std::to_string(c) + " ended without <EOS>");
    auto part = split_output(hyp.ids, vocab);
    produced.insert(produced.end(), part.begin(), part.end());
  }
  if (produced.size() == src.sentences.size()) {
    result.document.sentences = std::move(produced);
    return result;
  }
  result.used_failsafe = true;
  result.document.sentences = failsafe_merge(produced, first_pass.sentences, &vocab);
  return result;
}

std::string_view to_string(TranslateMode mode) {
  switch (mode) {
    case TranslateMode::sentence: return "sentence";
    case TranslateMode::document: return "document";
    case TranslateMode::second_pass: return "second-pass";
  }
  return "?";
}

TranslateMode parse_translate_mode(std::string_view text) {
  if (text == "sentence") return TranslateMode::sentence;
  if (text == "document") return TranslateMode::document;
  if (text == "second-pass") return TranslateMode::second_pass;
  throw InvalidConfig("unknown translation mode '" + std::string(text) + "'");
}

CorpusTranslation translate_corpus(const ScoringModel& model, const DecodeConfig& config, const Corpus& src,
                                   const SubwordVocab& vocab, TranslateMode mode, int limit, const Corpus* first_pass) {
  auto side = [](const Corpus& c, std::size_t d) -> const Document& {
    return c.kind == CorpusKind::parallel ? c.pairs[d].src : c.documents[d];
  };
  if (mode == TranslateMode::second_pass) {
    if (!first_pass) throw InvalidConfig("second-pass translation needs a first-pass corpus");
    if (first_pass->size() != src.size())
      throw LengthMismatch("first pass has " + std::to_string(first_pass->size()) + " documents, source " +
                           std::to_string(src.size()));
  }
  CorpusTranslation out;
  out.hyps = Corpus::monolingual();
  std::uint64_t index = 0;
  for (std::size_t d = 0; d < src.size(); ++d) {
    const Document& doc = side(src, d);
    if (mode == TranslateMode::sentence) {
      out.hyps.documents.push_back(translate_sentences(model, config, doc, vocab, index));
      index += doc.sentences.size();
      continue;
    }
    DocumentTranslation t;
    if (mode == TranslateMode::document) {
      t = translate_document(model, config, doc, vocab, limit, index);
    } else {
      const Document& fp = first_pass->kind == CorpusKind::parallel ? first_pass->pairs[d].tgt : first_pass->documents[d];
      t = second_pass_decode(model, config, doc, fp, vocab, limit, index);
    }
    index += doc.sentences.size() * 2;
    if (t.used_failsafe) ++out.failsafe_documents;
    for (auto& w : t.warnings) out.warnings.push_back(doc.id + ": " + w);
    out.hyps.documents.push_back(std::move(t.document));
  }
  return out;
}

}  // namespace docnmt
