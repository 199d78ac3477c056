#include "toy.h"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

namespace docnmt::testing {

namespace {

std::vector<std::string> split(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

int between(int lo, int hi, std::mt19937_64& rng) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace

std::vector<std::string> make_words(int count, const std::string& consonants, const std::string& vowels,
                                    std::uint64_t seed) {
  std::vector<std::string> syllables;
  for (char c : consonants)
    for (char v : vowels) syllables.push_back(std::string{c, v});
  std::vector<std::string> all;
  for (const auto& a : syllables)
    for (const auto& b : syllables) all.push_back(a + b);
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(all.size(), static_cast<std::size_t>(count)));
  return all;
}

std::string Lexicon::translate(const std::string& sentence) const {
  std::vector<std::string> out;
  for (const auto& w : split(sentence)) {
    auto it = std::find(src.begin(), src.end(), w);
    out.push_back(it == src.end() ? w : tgt[static_cast<std::size_t>(it - src.begin())]);
  }
  return join(out);
}

Lexicon make_lexicon(int size, std::uint64_t seed) {
  return {make_words(size, "bdfgklmnprst", "aeiou", seed), make_words(size, "cjqvwxzh", "aeiouy", seed + 1)};
}

Lexicon corrupt_lexicon(const Lexicon& lexicon, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(lexicon.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(fraction * static_cast<double>(lexicon.size())));
  Lexicon out = lexicon;
  for (std::size_t k = 0; k < idx.size(); ++k) out.tgt[idx[k]] = lexicon.tgt[idx[(k + 1) % idx.size()]];
  return out;
}

Corpus cipher_corpus(const Lexicon& lexicon, int docs, const CipherShape& shape, std::uint64_t seed,
                     const std::string& name) {
  std::mt19937_64 rng(seed);
  Corpus c = Corpus::parallel();
  for (int d = 0; d < docs; ++d) {
    ParallelDocument pd;
    pd.src.id = name + ".src#" + std::to_string(d);
    pd.tgt.id = name + ".tgt#" + std::to_string(d);
    int n = between(shape.min_sentences, shape.max_sentences, rng);
    for (int s = 0; s < n; ++s) {
      std::vector<std::string> words;
      int len = between(shape.min_words, shape.max_words, rng);
      for (int k = 0; k < len; ++k) words.push_back(pick(lexicon.src, rng));
      pd.src.sentences.push_back(join(words));
      pd.tgt.sentences.push_back(lexicon.translate(pd.src.sentences.back()));
    }
    c.pairs.push_back(std::move(pd));
  }
  return c;
}

Corpus retranslate(const Corpus& corpus, const Lexicon& lexicon) {
  Corpus out = corpus;
  for (auto& pd : out.pairs)
    for (std::size_t s = 0; s < pd.size(); ++s) pd.tgt.sentences[s] = lexicon.translate(pd.src.sentences[s]);
  return out;
}

std::string substitute(const std::string& sentence, const std::map<std::string, std::string>& rules) {
  auto words = split(sentence);
  for (auto& w : words)
    if (auto it = rules.find(w); it != rules.end()) w = it->second;
  return join(words);
}

GenderTask gender_corpus(int docs, std::uint64_t seed, const std::string& name) {
  // Fixed word lists, shared by every call.
  static const Lexicon all = make_lexicon(70, 101);
  auto slice = [](std::size_t from, std::size_t n) {
    return Lexicon{{all.src.begin() + from, all.src.begin() + from + n}, {all.tgt.begin() + from, all.tgt.begin() + from + n}};
  };
  static const Lexicon nouns = slice(0, 20);  // first half masculine
  static const Lexicon verbs = slice(20, 10);
  static const Lexicon adjectives = slice(30, 10);
  static const Lexicon fillers = slice(40, 30);

  std::mt19937_64 rng(seed);
  GenderTask task;
  task.corpus = Corpus::parallel();
  for (int d = 0; d < docs; ++d) {
    const bool masculine = d % 2 == 0;
    std::size_t noun = static_cast<std::size_t>(between(0, 9, rng)) + (masculine ? 0 : 10);
    std::size_t verb = static_cast<std::size_t>(between(0, 9, rng));
    ParallelDocument pd;
    pd.src.id = name + ".src#" + std::to_string(d);
    pd.tgt.id = name + ".tgt#" + std::to_string(d);
    pd.src.sentences.push_back("the " + nouns.src[noun] + " " + verbs.src[verb] + " .");
    pd.tgt.sentences.push_back(std::string(masculine ? "der " : "die ") + nouns.tgt[noun] + " " + verbs.tgt[verb] +
                               " .");
    int middle = between(0, 2, rng);
    for (int m = 0; m < middle; ++m) {
      std::vector<std::string> words;
      int len = between(2, 4, rng);
      for (int k = 0; k < len; ++k) words.push_back(pick(fillers.src, rng));
      pd.src.sentences.push_back(join(words) + " .");
      pd.tgt.sentences.push_back(fillers.translate(join(words)) + " .");
    }
    std::size_t adj = static_cast<std::size_t>(between(0, 9, rng));
    const std::string pronoun = masculine ? kMasculinePronoun : kFemininePronoun;
    pd.src.sentences.push_back("it is " + adjectives.src[adj] + " .");
    pd.tgt.sentences.push_back(pronoun + " ist " + adjectives.tgt[adj] + " .");
    task.corpus.pairs.push_back(std::move(pd));
    task.pronoun.push_back(pronoun);
  }
  return task;
}

std::vector<std::string> last_sentence_heads(const Corpus& docs) {
  std::vector<std::string> out;
  for (const auto& doc : docs.documents) {
    auto words = split(doc.sentences.back());
    out.push_back(words.empty() ? "" : words.front());
  }
  return out;
}

}  // namespace docnmt::testing
