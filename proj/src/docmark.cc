#include "docnmt/docmark.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "docnmt/error.h"

namespace docnmt {

namespace {

int marked_length(std::span<const TokenIds> sentences, std::size_t begin, std::size_t end) {
  int n = 2;
  for (std::size_t i = begin; i < end; ++i) n += static_cast<int>(sentences[i].size()) + 1;
  return n;
}

MarkedSequence build_chunk(std::span<const TokenIds> sentences, std::size_t begin,
                           std::size_t end, bool first, bool last) {
  MarkedSequence seq;
  seq.opener = first ? special::kBeg : special::kCnt;
  seq.closer = last ? special::kEnd : special::kBrk;
  seq.first_sentence = static_cast<int>(begin);
  seq.sentence_count = static_cast<int>(end - begin);
  seq.ids.push_back(seq.opener);
  for (std::size_t i = begin; i < end; ++i) {
    seq.ids.insert(seq.ids.end(), sentences[i].begin(), sentences[i].end());
    seq.ids.push_back(special::kSep);
  }
  seq.ids.push_back(seq.closer);
  return seq;
}

void check_limit(int limit) {
  if (limit <= 2) throw Error("mark-up limit must exceed 2, got " + std::to_string(limit));
}

std::vector<TokenIds> encode_all(const std::vector<Sentence>& sentences, const SubwordVocab& vocab) {
  std::vector<TokenIds> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(vocab.encode(s));
  return out;
}

}  // namespace

MarkupResult mark_up_ids(std::span<const TokenIds> sentences, int limit) {
  check_limit(limit);
  MarkupResult result;
  if (sentences.empty()) throw Error("mark_up: empty document");
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t begin = 0;
  while (begin < sentences.size()) {
    std::size_t end = begin;
    while (end < sentences.size() && marked_length(sentences, begin, end + 1) <= limit) ++end;
    if (end == begin) {
      end = begin + 1;
      result.warnings.push_back("sentence " + std::to_string(begin) + " exceeds the limit of " +
                                std::to_string(limit) + " tokens on its own");
    }
    spans.emplace_back(begin, end);
    begin = end;
  }
  for (std::size_t c = 0; c < spans.size(); ++c) {
    auto seq = build_chunk(sentences, spans[c].first, spans[c].second, c == 0, c + 1 == spans.size());
    seq.overlong = static_cast<int>(seq.ids.size()) > limit;
    result.sequences.push_back(std::move(seq));
  }
  return result;
}

MarkupResult mark_up(const Document& doc, const SubwordVocab& vocab, int limit) {
  auto ids = encode_all(doc.sentences, vocab);
  return mark_up_ids(ids, limit);
}

JointMarkupResult mark_up_joint(std::span<const std::vector<TokenIds>> sides, int limit) {
  check_limit(limit);
  if (sides.empty()) throw Error("mark_up_joint: no sides");
  const std::size_t n = sides[0].size();
  for (const auto& side : sides)
    if (side.size() != n)
      throw LengthMismatch("mark_up_joint: sides have " + std::to_string(n) + " and " + std::to_string(side.size()) +
                           " sentences");
  if (n == 0) throw Error("mark_up_joint: empty document");
  JointMarkupResult result;
  auto fits = [&](std::size_t begin, std::size_t end) {
    for (const auto& side : sides)
      if (marked_length(side, begin, end) > limit) return false;
    return true;
  };
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t begin = 0;
  while (begin < n) {
    std::size_t end = begin;
    while (end < n && fits(begin, end + 1)) ++end;
    if (end == begin) {
      end = begin + 1;
      result.warnings.push_back("sentence " + std::to_string(begin) + " exceeds the limit of " +
                                std::to_string(limit) + " tokens on its own");
    }
    spans.emplace_back(begin, end);
    begin = end;
  }
  for (std::size_t c = 0; c < spans.size(); ++c) {
    bool first = c == 0, last = c + 1 == spans.size();
    auto& chunk = result.chunks.emplace_back();
    for (const auto& side : sides) {
      auto seq = build_chunk(side, spans[c].first, spans[c].second, first, last);
      seq.overlong = static_cast<int>(seq.ids.size()) > limit;
      chunk.push_back(std::move(seq));
    }
  }
  return result;
}

ParallelMarkupResult mark_up_parallel_ids(std::span<const TokenIds> src, std::span<const TokenIds> tgt,
                                          int limit) {
  if (src.size() != tgt.size())
    throw LengthMismatch("mark_up_parallel: sides have " + std::to_string(src.size()) + " and " +
                         std::to_string(tgt.size()) + " sentences");
  std::vector<std::vector<TokenIds>> sides = {{src.begin(), src.end()}, {tgt.begin(), tgt.end()}};
  auto joint = mark_up_joint(sides, limit);
  ParallelMarkupResult result;
  result.warnings = std::move(joint.warnings);
  for (auto& chunk : joint.chunks) result.sequences.emplace_back(std::move(chunk[0]), std::move(chunk[1]));
  return result;
}

ParallelMarkupResult mark_up_parallel(const ParallelDocument& pdoc, const SubwordVocab& vocab, int limit) {
  auto src = encode_all(pdoc.src.sentences, vocab);
  auto tgt = encode_all(pdoc.tgt.sentences, vocab);
  return mark_up_parallel_ids(src, tgt, limit);
}

std::vector<TokenIds> split_marked(std::span<const TokenId> ids) {
  if (ids.size() < 2) throw MalformedMarkup("sequence too short to carry mark-up");
  if (ids.front() != special::kBeg && ids.front() != special::kCnt)
    throw MalformedMarkup("missing opener");
  if (ids.back() != special::kEnd && ids.back() != special::kBrk)
    throw MalformedMarkup("missing closer");
  std::vector<TokenIds> segments;
  TokenIds current;
  for (std::size_t i = 1; i + 1 < ids.size(); ++i) {
    TokenId id = ids[i];
    if (id == special::kSep) {
      if (current.empty()) throw MalformedMarkup("empty segment between separators");
      segments.push_back(std::move(current));
      current.clear();
    } else if (special::is_special(id) && id != special::kUnk) {
      throw MalformedMarkup("unexpected symbol " + std::string(special::kNames[id]) + " inside sequence");
    } else {
      current.push_back(id);
    }
  }
  if (!current.empty()) throw MalformedMarkup("unterminated final segment");
  return segments;
}

std::vector<Sentence> strip_markup(std::span<const TokenId> ids, const SubwordVocab& vocab) {
  std::vector<Sentence> out;
  for (const auto& seg : split_marked(ids)) out.push_back(vocab.decode(seg));
  return out;
}

std::vector<Sentence> strip_markup(const MarkedSequence& seq, const SubwordVocab& vocab) {
  auto out = strip_markup(std::span<const TokenId>(seq.ids), vocab);
  if (static_cast<int>(out.size()) != seq.sentence_count)
    throw MalformedMarkup("separator count disagrees with sentence_count");
  return out;
}

std::string render_marked(const MarkedSequence& seq, const SubwordVocab& vocab) {
  auto segments = split_marked(seq.ids);
  std::string out(special::kNames[seq.ids.front()]);
  for (const auto& seg : segments) {
    out += ' ';
    out += vocab.decode(seg);
    out += special::kNames[special::kSep];
  }
  out += special::kNames[seq.ids.back()];
  return out;
}

MarkedSequence parse_marked(std::string_view line, const SubwordVocab& vocab) {
  MarkedSequence seq;
  std::size_t pos = 0;
  std::string pending;
  auto flush = [&]() {
    auto ids = vocab.encode(pending);
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
    pending.clear();
  };
  while (pos < line.size()) {
    bool matched = false;
    if (line[pos] == '<') {
      for (TokenId id = special::kBeg; id <= special::kCnt; ++id) {
        auto name = special::kNames[id];
        if (line.substr(pos, name.size()) == name) {
          flush();
          seq.ids.push_back(id);
          pos += name.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) pending += line[pos++];
  }
  flush();
  auto segments = split_marked(seq.ids);
  seq.opener = seq.ids.front();
  seq.closer = seq.ids.back();
  seq.sentence_count = static_cast<int>(segments.size());
  return seq;
}

double link_cost(int len_a, int len_b, int a_count, int b_count, const AlignmentCosts& costs) {
  double penalty;
  if (a_count == 1 && b_count == 1) penalty = costs.one_to_one;
  else if (a_count == 0 || b_count == 0) penalty = costs.insertion_deletion;
  else penalty = costs.merge;
  double r = costs.length_ratio;
  double denom = std::sqrt(len_a + r * len_b);
  double diff = std::abs(len_a - r * len_b);
  return penalty + (denom > 0 ? diff / denom : 0.0);
}

Alignment align_lengths(std::span<const int> a, std::span<const int> b, const AlignmentCosts& costs) {
  static constexpr int kShapes[5][2] = {{1, 1}, {1, 0}, {0, 1}, {2, 1}, {1, 2}};
  const std::size_t n = a.size(), m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> cost((n + 1) * (m + 1), inf);
  std::vector<signed char> back((n + 1) * (m + 1), -1);
  auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  cost[at(0, 0)] = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    for (std::size_t j = 0; j <= m; ++j) {
      if (i == 0 && j == 0) continue;
      for (int s = 0; s < 5; ++s) {
        std::size_t da = static_cast<std::size_t>(kShapes[s][0]);
        std::size_t db = static_cast<std::size_t>(kShapes[s][1]);
        if (da > i || db > j) continue;
        double prev = cost[at(i - da, j - db)];
        if (prev == inf) continue;
        int la = 0, lb = 0;
        for (std::size_t k = i - da; k < i; ++k) la += a[k];
        for (std::size_t k = j - db; k < j; ++k) lb += b[k];
        double c = prev + link_cost(la, lb, kShapes[s][0], kShapes[s][1], costs);
        if (c < cost[at(i, j)]) {
          cost[at(i, j)] = c;
          back[at(i, j)] = static_cast<signed char>(s);
        }
      }
    }
  }
  Alignment result;
  result.cost = cost[at(n, m)];
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    int s = back[at(i, j)];
    int da = kShapes[s][0], db = kShapes[s][1];
    i -= static_cast<std::size_t>(da);
    j -= static_cast<std::size_t>(db);
    result.links.push_back({static_cast<int>(i), da, static_cast<int>(j), db});
  }
  std::reverse(result.links.begin(), result.links.end());
  return result;
}

namespace {

std::vector<int> sentence_lengths(std::span<const Sentence> sentences, const SubwordVocab* vocab) {
  std::vector<int> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences)
    out.push_back(static_cast<int>(vocab ? vocab->encode(s).size() : utf8_chars(s).size()));
  return out;
}

}  // namespace

Alignment align_sentences(std::span<const Sentence> a, std::span<const Sentence> b,
                          const SubwordVocab* vocab) {
  auto la = sentence_lengths(a, vocab);
  auto lb = sentence_lengths(b, vocab);
  return align_lengths(la, lb);
}

std::vector<Sentence> failsafe_merge(std::span<const Sentence> doc_out, std::span<const Sentence> tmpl,
                                     const SubwordVocab* vocab) {
  if (doc_out.size() == tmpl.size()) return {doc_out.begin(), doc_out.end()};
  std::vector<Sentence> result(tmpl.begin(), tmpl.end());
  if (doc_out.empty() || tmpl.empty()) return result;
  auto alignment = align_sentences(doc_out, tmpl, vocab);
  for (const auto& link : alignment.links)
    if (link.is_one_to_one())
      result[static_cast<std::size_t>(link.b_begin)] = doc_out[static_cast<std::size_t>(link.a_begin)];
  return result;
}

}  // namespace docnmt
