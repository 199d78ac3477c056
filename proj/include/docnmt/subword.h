#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "docnmt/corpus.h"

namespace docnmt {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

// Reserved ids shared by every vocabulary.
namespace special {
inline constexpr TokenId kBeg = 0;
inline constexpr TokenId kSep = 1;
inline constexpr TokenId kEnd = 2;
inline constexpr TokenId kBrk = 3;
inline constexpr TokenId kCnt = 4;
inline constexpr TokenId kMask = 5;
inline constexpr TokenId kPad = 6;
inline constexpr TokenId kUnk = 7;
inline constexpr TokenId kEos = 8;
inline constexpr TokenId kCount = 9;

inline constexpr std::string_view kNames[kCount] = {
    "<BEG>", "<SEP>", "<END>", "<BRK>", "<CNT>", "<MASK>", "<PAD>", "<UNK>", "<EOS>"};

inline bool is_special(TokenId id) { return id >= 0 && id < kCount; }
inline bool is_markup(TokenId id) { return id >= kBeg && id <= kCnt; }
}  // namespace special

// Word-boundary marker prefixed to every word before merging.
inline constexpr std::string_view kWordBoundary = "\xE2\x96\x81";  // U+2581

// Splits UTF-8 text into code points. Invalid bytes become single-byte units.
std::vector<std::string> utf8_chars(std::string_view text);

// Byte-pair-merge vocabulary shared by both translation directions.
class SubwordVocab {
 public:
  using Merge = std::pair<std::string, std::string>;

  SubwordVocab();

  // Learns merges until the vocabulary holds `vocab_size` entries or no
  // adjacent pair remains. Ties between equally frequent pairs go to the
  // lexicographically smallest pair.
  static SubwordVocab train(const std::vector<std::string>& sentences, int vocab_size);

  static SubwordVocab from_parts(std::vector<std::string> alphabet, std::vector<Merge> merges);

  TokenIds encode(std::string_view text) const;
  // Specials render as their literal symbols; whitespace is normalized.
  std::string decode(std::span<const TokenId> ids) const;

  // Subword pieces of one whitespace-free word, boundary marker included.
  std::vector<std::string> segment_word(std::string_view word) const;

  int size() const { return static_cast<int>(pieces_.size()); }
  const std::string& piece(TokenId id) const;
  // Returns kUnk for pieces outside the vocabulary. Never returns a special id.
  TokenId piece_id(std::string_view piece) const;

  const std::vector<std::string>& alphabet() const { return alphabet_; }
  const std::vector<Merge>& merges() const { return merges_; }

  std::string serialize() const;
  static SubwordVocab parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static SubwordVocab load(const std::filesystem::path& path);

  bool operator==(const SubwordVocab& other) const {
    return alphabet_ == other.alphabet_ && merges_ == other.merges_;
  }

 private:
  void rebuild();

  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> piece_to_id_;
  std::map<Merge, int> merge_rank_;
};

// Trains on every sentence of a corpus (both sides for parallel corpora).
SubwordVocab train_subwords(const Corpus& corpus, int vocab_size);

}  // namespace docnmt
