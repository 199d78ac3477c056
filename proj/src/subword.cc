#include "docnmt/subword.h"

#include <algorithm>
#include <set>
#include <sstream>

#include "docnmt/error.h"

namespace docnmt {

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (c >= 0xF0 && c < 0xF8) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    if (c >= 0xF8 || i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.push_back(text.substr(start, i - start));
  }
  return words;
}

std::vector<std::string> initial_symbols(std::string_view word) {
  std::vector<std::string> symbols{std::string(kWordBoundary)};
  for (auto& ch : utf8_chars(word)) symbols.push_back(std::move(ch));
  return symbols;
}

void apply_merge(std::vector<std::string>& symbols, const SubwordVocab::Merge& merge) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == merge.first && symbols[i + 1] == merge.second) {
      out.push_back(symbols[i] + symbols[i + 1]);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

}  // namespace

SubwordVocab::SubwordVocab() { rebuild(); }

SubwordVocab SubwordVocab::from_parts(std::vector<std::string> alphabet, std::vector<Merge> merges) {
  SubwordVocab v;
  v.alphabet_ = std::move(alphabet);
  v.merges_ = std::move(merges);
  v.rebuild();
  return v;
}

void SubwordVocab::rebuild() {
  pieces_.clear();
  piece_to_id_.clear();
  merge_rank_.clear();
  for (auto name : special::kNames) pieces_.emplace_back(name);
  auto add = [&](const std::string& p) {
    if (piece_to_id_.contains(p)) return;
    piece_to_id_.emplace(p, static_cast<TokenId>(pieces_.size()));
    pieces_.push_back(p);
  };
  for (const auto& a : alphabet_) add(a);
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    merge_rank_.emplace(merges_[r], static_cast<int>(r));
    add(merges_[r].first + merges_[r].second);
  }
}

SubwordVocab SubwordVocab::train(const std::vector<std::string>& sentences, int vocab_size) {
  std::map<std::string, long> word_freq;
  for (const auto& s : sentences)
    for (auto w : split_words(s)) ++word_freq[std::string(w)];

  std::set<std::string> alphabet_set{std::string(kWordBoundary)};
  std::vector<std::pair<std::vector<std::string>, long>> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    auto symbols = initial_symbols(w);
    alphabet_set.insert(symbols.begin(), symbols.end());
    words.emplace_back(std::move(symbols), f);
  }
  int base = special::kCount + static_cast<int>(alphabet_set.size());
  if (vocab_size <= base)
    throw VocabTooSmall("vocab_size " + std::to_string(vocab_size) + " must exceed " +
                        std::to_string(base) + " (specials + alphabet)");

  SubwordVocab vocab;
  vocab.alphabet_.assign(alphabet_set.begin(), alphabet_set.end());
  std::set<std::string> known(alphabet_set);
  int size = base;
  while (size < vocab_size) {
    std::map<Merge, long> counts;
    for (const auto& [symbols, f] : words)
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) counts[{symbols[i], symbols[i + 1]}] += f;
    if (counts.empty()) break;
    // std::map iterates pairs in lexicographic order, so the first maximum wins ties.
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;
    Merge merge = best->first;
    for (auto& [symbols, f] : words) apply_merge(symbols, merge);
    if (known.insert(merge.first + merge.second).second) ++size;
    vocab.merges_.push_back(std::move(merge));
  }
  vocab.rebuild();
  return vocab;
}

std::vector<std::string> SubwordVocab::segment_word(std::string_view word) const {
  auto symbols = initial_symbols(word);
  while (symbols.size() > 1) {
    int best_rank = -1;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
      if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
    }
    if (best_rank < 0) break;
    apply_merge(symbols, merges_[static_cast<std::size_t>(best_rank)]);
  }
  return symbols;
}

TokenIds SubwordVocab::encode(std::string_view text) const {
  TokenIds ids;
  for (auto word : split_words(text))
    for (const auto& p : segment_word(word)) ids.push_back(piece_id(p));
  return ids;
}

std::string SubwordVocab::decode(std::span<const TokenId> ids) const {
  std::string joined;
  for (TokenId id : ids) {
    if (id < 0 || id >= size())
      throw IdOutOfRange("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(size()));
    if (special::is_special(id)) {
      joined += ' ';
      joined += pieces_[static_cast<std::size_t>(id)];
      joined += ' ';
    } else {
      joined += pieces_[static_cast<std::size_t>(id)];
    }
  }
  std::string spaced;
  std::size_t pos = 0;
  while (true) {
    auto next = joined.find(kWordBoundary, pos);
    spaced.append(joined, pos, next == std::string::npos ? std::string::npos : next - pos);
    if (next == std::string::npos) break;
    spaced += ' ';
    pos = next + kWordBoundary.size();
  }
  std::string out;
  for (auto w : split_words(spaced)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

const std::string& SubwordVocab::piece(TokenId id) const {
  if (id < 0 || id >= size()) throw IdOutOfRange("token id " + std::to_string(id));
  return pieces_[static_cast<std::size_t>(id)];
}

TokenId SubwordVocab::piece_id(std::string_view piece) const {
  auto it = piece_to_id_.find(std::string(piece));
  return it == piece_to_id_.end() ? special::kUnk : it->second;
}

std::string SubwordVocab::serialize() const {
  std::string out = "version 1\n";
  for (auto name : special::kNames) {
    out += name;
    out += '\n';
  }
  out += "alphabet " + std::to_string(alphabet_.size()) + "\n";
  for (const auto& a : alphabet_) out += a + "\n";
  for (const auto& [l, r] : merges_) out += l + "\t" + r + "\n";
  return out;
}

SubwordVocab SubwordVocab::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "version 1")
    throw Error("vocabulary: expected header 'version 1'");
  for (auto name : special::kNames) {
    if (!std::getline(in, line) || line != name)
      throw Error("vocabulary: expected special symbol " + std::string(name));
  }
  if (!std::getline(in, line) || !line.starts_with("alphabet "))
    throw Error("vocabulary: expected alphabet line");
  auto n = std::stoul(line.substr(9));
  std::vector<std::string> alphabet;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw Error("vocabulary: truncated alphabet");
    alphabet.push_back(line);
  }
  std::vector<Merge> merges;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error("vocabulary: merge line without tab");
    merges.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return from_parts(std::move(alphabet), std::move(merges));
}

void SubwordVocab::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

SubwordVocab SubwordVocab::load(const std::filesystem::path& path) { return parse(read_file(path)); }

SubwordVocab train_subwords(const Corpus& corpus, int vocab_size) {
  return SubwordVocab::train(all_sentences(corpus), vocab_size);
}

}  // namespace docnmt
