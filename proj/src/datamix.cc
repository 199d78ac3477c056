#include "docnmt/datamix.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "docnmt/error.h"

namespace docnmt {

namespace {

using Rng64 = std::mt19937_64;

template <class V>
void shuffle_in_place(std::vector<V>& v, Rng64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

std::size_t doc_sentences(const Corpus& c, std::size_t i) {
  return c.kind == CorpusKind::parallel ? c.pairs[i].size() : c.documents[i].sentences.size();
}

void append_copy(Corpus& out, const Corpus& in, std::size_t i, const std::string& suffix) {
  if (in.kind == CorpusKind::parallel) {
    auto d = in.pairs[i];
    d.src.id += suffix;
    d.tgt.id += suffix;
    out.pairs.push_back(std::move(d));
  } else {
    auto d = in.documents[i];
    d.id += suffix;
    out.documents.push_back(std::move(d));
  }
}

Corpus empty_like(const Corpus& c) { return c.kind == CorpusKind::parallel ? Corpus::parallel() : Corpus::monolingual(); }

ParallelDocument slice(const ParallelDocument& doc, std::size_t start, std::size_t len) {
  ParallelDocument out = doc;
  auto suffix = "/" + std::to_string(start) + "+" + std::to_string(len);
  out.src.id += suffix;
  out.tgt.id += suffix;
  auto cut = [&](std::vector<Sentence>& s) {
    s = std::vector<Sentence>(s.begin() + static_cast<long>(start), s.begin() + static_cast<long>(start + len));
  };
  cut(out.src.sentences);
  cut(out.tgt.sentences);
  return out;
}

}  // namespace

std::vector<ParallelDocument> sample_subdocuments(const ParallelDocument& doc, int max_per_doc, std::uint64_t seed) {
  const std::size_t n = doc.size();
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (std::size_t len = 1; len < n; ++len)
    for (std::size_t start = 0; start + len <= n; ++start) spans.emplace_back(start, len);
  const std::size_t k = std::min(spans.size(), static_cast<std::size_t>(std::max(max_per_doc, 0)));
  Rng64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, spans.size() - 1);
    std::swap(spans[i], spans[pick(rng)]);
  }
  spans.resize(k);
  std::sort(spans.begin(), spans.end());
  std::vector<ParallelDocument> out;
  out.reserve(k);
  for (auto [start, len] : spans) out.push_back(slice(doc, start, len));
  return out;
}

Corpus augment_with_subdocuments(const Corpus& authentic, std::size_t target_sentences, int max_per_doc,
                                 std::uint64_t seed) {
  if (authentic.kind != CorpusKind::parallel) throw Error("augment_with_subdocuments: parallel corpus required");
  if (authentic.empty()) throw EmptyCorpus("augment_with_subdocuments: empty corpus");
  Corpus out = Corpus::parallel();
  std::size_t total = 0;
  Rng64 rng(seed);
  for (int round = 0; total < target_sentences; ++round) {
    const std::string tag = "~" + std::to_string(round);
    std::vector<ParallelDocument> batch;
    for (const auto& doc : authentic.pairs) {
      auto copy = doc;
      if (round > 0) {
        copy.src.id += tag;
        copy.tgt.id += tag;
      }
      batch.push_back(std::move(copy));
      for (auto& sub : sample_subdocuments(doc, max_per_doc, rng())) {
        sub.src.id += tag;
        sub.tgt.id += tag;
        batch.push_back(std::move(sub));
      }
    }
    for (auto& d : batch) {
      if (total >= target_sentences) break;
      total += d.size();
      out.pairs.push_back(std::move(d));
    }
  }
  return out;
}

LengthSampler::LengthSampler(std::vector<int> lengths) : lengths_(std::move(lengths)) {
  if (lengths_.empty()) throw EmptyCorpus("LengthSampler: no lengths");
  for (int l : lengths_)
    if (l < 1) throw Error("LengthSampler: lengths must be positive");
}

LengthSampler LengthSampler::from_corpus(const Corpus& corpus) {
  std::vector<int> lengths;
  for (std::size_t i = 0; i < corpus.size(); ++i) lengths.push_back(static_cast<int>(doc_sentences(corpus, i)));
  return LengthSampler(std::move(lengths));
}

int LengthSampler::sample(std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> pick(0, lengths_.size() - 1);
  return lengths_[pick(rng)];
}

Corpus make_fake_documents(const std::vector<std::pair<Sentence, Sentence>>& pairs, const LengthSampler& sampler,
                           std::uint64_t seed) {
  Corpus out = Corpus::parallel();
  Rng64 rng(seed);
  std::size_t pos = 0;
  while (pos < pairs.size()) {
    std::size_t len = std::min(static_cast<std::size_t>(sampler.sample(rng)), pairs.size() - pos);
    ParallelDocument doc;
    doc.src.id = "fake#" + std::to_string(out.pairs.size());
    doc.tgt.id = doc.src.id;
    doc.src.origin = doc.tgt.origin = Origin::synthetic;
    for (std::size_t i = pos; i < pos + len; ++i) {
      doc.src.sentences.push_back(pairs[i].first);
      doc.tgt.sentences.push_back(pairs[i].second);
    }
    out.pairs.push_back(std::move(doc));
    pos += len;
  }
  return out;
}

Corpus upsample(const Corpus& corpus, std::size_t target_sentences, std::uint64_t seed) {
  if (corpus.empty()) throw EmptyCorpus("upsample: empty corpus");
  const std::size_t size = corpus.sentence_count();
  if (target_sentences < size)
    throw Error("upsample: target " + std::to_string(target_sentences) + " is below the corpus size " +
                std::to_string(size));
  Corpus out = empty_like(corpus);
  const std::size_t copies = target_sentences / size;
  for (std::size_t k = 0; k < copies; ++k)
    for (std::size_t i = 0; i < corpus.size(); ++i) append_copy(out, corpus, i, k ? "~" + std::to_string(k) : "");
  const std::size_t remainder = target_sentences - copies * size;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng64 rng(seed);
  shuffle_in_place(order, rng);
  std::size_t taken = 0;
  const std::string suffix = copies ? "~" + std::to_string(copies) : "";
  for (std::size_t i : order) {
    if (taken >= remainder) break;
    append_copy(out, corpus, i, suffix);
    taken += doc_sentences(corpus, i);
  }
  return out;
}

void MixRecipe::validate() const {
  if (streams.empty()) throw InvalidConfig("mix: no streams");
  double sum = 0.0;
  for (const auto& s : streams) {
    if (!(s.fraction >= 0.0)) throw InvalidConfig("mix: negative fraction");
    if (s.fraction > 0 && s.corpus.empty()) throw InvalidConfig("mix: empty stream with positive fraction");
    sum += s.fraction;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidConfig("mix: fractions sum to " + std::to_string(sum));
  auto kind = streams.front().corpus.kind;
  for (const auto& s : streams)
    if (s.corpus.kind != kind) throw InvalidConfig("mix: streams mix parallel and monolingual corpora");
}

Corpus mix(const MixRecipe& recipe) {
  recipe.validate();
  double total = 0.0;
  for (const auto& s : recipe.streams)
    if (s.fraction > 0) total = std::max(total, static_cast<double>(s.corpus.sentence_count()) / s.fraction);
  Corpus out = empty_like(recipe.streams.front().corpus);
  Rng64 rng(recipe.seed);
  for (std::size_t k = 0; k < recipe.streams.size(); ++k) {
    const auto& s = recipe.streams[k];
    if (s.fraction <= 0) continue;
    auto target = std::max(s.corpus.sentence_count(), static_cast<std::size_t>(std::llround(s.fraction * total)));
    Corpus up = upsample(s.corpus, target, rng());
    const std::string tag = "@" + std::to_string(k);
    for (auto& d : up.pairs) {
      d.src.id += tag;
      d.tgt.id += tag;
      out.pairs.push_back(std::move(d));
    }
    for (auto& d : up.documents) {
      d.id += tag;
      out.documents.push_back(std::move(d));
    }
  }
  shuffle_in_place(out.pairs, rng);
  shuffle_in_place(out.documents, rng);
  return out;
}

FilterScore FilterScore::from_components(double fwd, double bwd) {
  return {std::abs(fwd - bwd) + 0.5 * (fwd + bwd), fwd, bwd};
}

double TransformerPairScorer::cross_entropy_per_token(const Sentence& given, const Sentence& predicted) const {
  Example ex{vocab_.encode(given), vocab_.encode(predicted), {}};
  if (ex.src.empty() || ex.tgt.empty()) throw EmptySentence("cross_entropy_per_token: empty sentence");
  return model_.translation_nll(ex) / static_cast<double>(ex.tgt.size() + 1);
}

FilterScore dual_xe_score(const PairScorer& fwd, const PairScorer& bwd, const Sentence& src, const Sentence& tgt) {
  if (src.empty() || tgt.empty()) throw EmptySentence("dual_xe_score: empty sentence");
  return FilterScore::from_components(fwd.cross_entropy_per_token(src, tgt), bwd.cross_entropy_per_token(tgt, src));
}

std::vector<FilterScore> score_corpus(const PairScorer& fwd, const PairScorer& bwd, const Corpus& corpus) {
  std::vector<FilterScore> out;
  for (const auto& [s, t] : sentence_pairs(corpus)) out.push_back(dual_xe_score(fwd, bwd, s, t));
  return out;
}

Corpus filter_corpus(const Corpus& corpus, const std::vector<FilterScore>& scores, double keep_fraction) {
  if (corpus.kind != CorpusKind::parallel) throw Error("filter_corpus: parallel corpus required");
  const std::size_t n = corpus.sentence_count();
  if (scores.size() != n)
    throw LengthMismatch("filter_corpus: " + std::to_string(scores.size()) + " scores for " + std::to_string(n) +
                         " sentence pairs");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw InvalidConfig("filter_corpus: keep_fraction outside (0,1]");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a].value < scores[b].value; });
  const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-9)));
  std::vector<bool> kept(n, false);
  for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = true;

  Corpus out = Corpus::parallel();
  std::size_t index = 0;
  for (const auto& doc : corpus.pairs) {
    ParallelDocument d = doc;
    d.src.sentences.clear();
    d.tgt.sentences.clear();
    for (std::size_t s = 0; s < doc.size(); ++s, ++index) {
      if (!kept[index]) continue;
      d.src.sentences.push_back(doc.src.sentences[s]);
      d.tgt.sentences.push_back(doc.tgt.sentences[s]);
    }
    if (d.size() > 0) out.pairs.push_back(std::move(d));
  }
  return out;
}

void write_scores(const std::vector<FilterScore>& scores, const std::filesystem::path& path) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < scores.size(); ++i)
    out << i << '\t' << scores[i].fwd << '\t' << scores[i].bwd << '\t' << scores[i].value << '\n';
  write_file(path, out.str());
}

std::vector<FilterScore> read_scores(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<FilterScore> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::size_t index;
    FilterScore s;
    if (!(row >> index >> s.fwd >> s.bwd >> s.value) || index != out.size())
      throw IoError(path.string() + ": bad score line " + std::to_string(out.size() + 1));
    out.push_back(s);
  }
  return out;
}

}  // namespace docnmt
