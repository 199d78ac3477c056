#include "docnmt/corpus.h"

#include <fstream>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "docnmt/error.h"

namespace docnmt {

namespace fs = std::filesystem;

std::string_view to_string(Origin origin) {
  switch (origin) {
    case Origin::original_src: return "original-src";
    case Origin::original_tgt: return "original-tgt";
    case Origin::synthetic: return "synthetic";
    case Origin::unknown: return "unknown";
  }
  return "unknown";
}

Origin parse_origin(std::string_view text) {
  if (text == "original-src") return Origin::original_src;
  if (text == "original-tgt") return Origin::original_tgt;
  if (text == "synthetic") return Origin::synthetic;
  if (text == "unknown") return Origin::unknown;
  throw Error("unknown origin tag '" + std::string(text) + "'");
}

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

std::string entity_form(std::string_view symbol) {
  // "<SEP>" -> "&lt;SEP&gt;"
  return "&lt;" + std::string(symbol.substr(1, symbol.size() - 2)) + "&gt;";
}

}  // namespace

std::string escape_reserved(std::string_view text) {
  std::string out(text);
  for (auto symbol : kReservedSymbols) replace_all(out, symbol, entity_form(symbol));
  return out;
}

std::string unescape_reserved(std::string_view text) {
  std::string out(text);
  for (auto symbol : kReservedSymbols) replace_all(out, entity_form(symbol), symbol);
  return out;
}

bool contains_reserved(std::string_view text) {
  for (auto symbol : kReservedSymbols)
    if (text.find(symbol) != std::string_view::npos) return true;
  return false;
}

Corpus Corpus::monolingual(std::vector<Document> docs) {
  Corpus c;
  c.kind = CorpusKind::monolingual;
  c.documents = std::move(docs);
  return c;
}

Corpus Corpus::parallel(std::vector<ParallelDocument> docs) {
  Corpus c;
  c.kind = CorpusKind::parallel;
  c.pairs = std::move(docs);
  return c;
}

std::size_t Corpus::size() const {
  return kind == CorpusKind::parallel ? pairs.size() : documents.size();
}

std::size_t Corpus::sentence_count() const {
  std::size_t n = 0;
  if (kind == CorpusKind::parallel)
    for (const auto& p : pairs) n += p.size();
  else
    for (const auto& d : documents) n += d.sentences.size();
  return n;
}

Origin Corpus::origin(std::size_t doc) const {
  return kind == CorpusKind::parallel ? pairs.at(doc).origin() : documents.at(doc).origin;
}

void Corpus::set_origin(std::size_t doc, Origin o) {
  if (kind == CorpusKind::parallel) {
    pairs.at(doc).src.origin = o;
    pairs.at(doc).tgt.origin = o;
  } else {
    documents.at(doc).origin = o;
  }
}

const std::string& Corpus::id(std::size_t doc) const {
  return kind == CorpusKind::parallel ? pairs.at(doc).src.id : documents.at(doc).id;
}

namespace {

void validate_document(const Document& d, long index) {
  if (d.sentences.empty()) throw MalformedCorpus("empty document", index);
  for (const auto& s : d.sentences) {
    if (s.empty()) throw MalformedCorpus("empty sentence", index);
    if (s.find('\n') != std::string::npos)
      throw MalformedCorpus("sentence contains a newline", index);
  }
}

}  // namespace

void validate(const Corpus& corpus) {
  std::unordered_set<std::string> ids;
  auto check_id = [&](const std::string& id, long index) {
    if (!id.empty() && !ids.insert(id).second)
      throw MalformedCorpus("duplicate document id '" + id + "'", index);
  };
  if (corpus.kind == CorpusKind::parallel) {
    if (!corpus.documents.empty())
      throw MalformedCorpus("monolingual member in parallel corpus", 0);
    for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
      const auto& p = corpus.pairs[i];
      validate_document(p.src, static_cast<long>(i));
      validate_document(p.tgt, static_cast<long>(i));
      if (p.src.sentences.size() != p.tgt.sentences.size())
        throw MalformedCorpus("parallel sentence-count mismatch", static_cast<long>(i));
      check_id(p.src.id, static_cast<long>(i));
    }
  } else {
    if (!corpus.pairs.empty())
      throw MalformedCorpus("parallel member in monolingual corpus", 0);
    for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
      validate_document(corpus.documents[i], static_cast<long>(i));
      check_id(corpus.documents[i].id, static_cast<long>(i));
    }
  }
}

std::vector<Document> parse_documents(std::string_view content, std::string_view filename) {
  std::vector<Document> docs;
  if (content.empty()) return docs;

  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < content.size()) {
    auto end = content.find('\n', start);
    if (end == std::string_view::npos) end = content.size();
    lines.push_back(content.substr(start, end - start));
    start = end + 1;
  }
  // A single trailing separator line is tolerated.
  if (lines.size() > 1 && lines.back().empty()) lines.pop_back();

  Document current;
  auto flush = [&]() {
    current.id = std::string(filename) + "#" + std::to_string(docs.size());
    docs.push_back(std::move(current));
    current = Document{};
  };
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) {
      if (current.sentences.empty()) {
        throw MalformedCorpus(i == 0 ? "blank line at file start"
                                     : "two consecutive blank lines",
                              static_cast<long>(docs.size()));
      }
      flush();
    } else {
      current.sentences.push_back(escape_reserved(lines[i]));
    }
  }
  if (!current.sentences.empty()) flush();
  return docs;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Corpus load_documents(const fs::path& path) {
  return Corpus::monolingual(parse_documents(read_file(path), path.filename().string()));
}

Corpus load_parallel(const fs::path& src_path, const fs::path& tgt_path) {
  auto src = parse_documents(read_file(src_path), src_path.filename().string());
  auto tgt = parse_documents(read_file(tgt_path), tgt_path.filename().string());
  std::size_t common = std::min(src.size(), tgt.size());
  for (std::size_t i = 0; i < common; ++i) {
    if (src[i].sentences.size() != tgt[i].sentences.size())
      throw MalformedCorpus("parallel sentence-count mismatch", static_cast<long>(i));
  }
  if (src.size() != tgt.size())
    throw MalformedCorpus("parallel document-count mismatch", static_cast<long>(common));
  std::vector<ParallelDocument> pairs;
  pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i)
    pairs.push_back({std::move(src[i]), std::move(tgt[i])});
  return Corpus::parallel(std::move(pairs));
}

Corpus load_documents(const fs::path& path, CorpusKind kind, const fs::path& tgt_path) {
  if (kind == CorpusKind::parallel) return load_parallel(path, tgt_path);
  return load_documents(path);
}

std::string format_documents(const std::vector<Document>& docs) {
  std::string out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i > 0) out += '\n';
    for (const auto& s : docs[i].sentences) {
      out += escape_reserved(s);
      out += '\n';
    }
  }
  return out;
}

void write_documents(const Corpus& corpus, const fs::path& path) {
  validate(corpus);
  if (corpus.kind == CorpusKind::parallel)
    throw Error("write_documents: parallel corpora are written with write_parallel");
  write_file(path, format_documents(corpus.documents));
}

void write_parallel(const Corpus& corpus, const fs::path& src_path, const fs::path& tgt_path) {
  validate(corpus);
  if (corpus.kind != CorpusKind::parallel)
    throw Error("write_parallel: corpus is monolingual");
  std::vector<Document> src, tgt;
  for (const auto& p : corpus.pairs) {
    src.push_back(p.src);
    tgt.push_back(p.tgt);
  }
  write_file(src_path, format_documents(src));
  write_file(tgt_path, format_documents(tgt));
}

Manifest read_manifest(const fs::path& path) {
  Manifest rows;
  std::istringstream in(read_file(path));
  std::string line;
  long n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw MalformedCorpus("manifest row without tab", n);
    rows.emplace_back(line.substr(0, tab), parse_origin(line.substr(tab + 1)));
    ++n;
  }
  return rows;
}

Manifest make_manifest(const Corpus& corpus) {
  Manifest rows;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    rows.emplace_back(corpus.id(i), corpus.origin(i));
  return rows;
}

void write_manifest(const Corpus& corpus, const fs::path& path) {
  std::string out;
  for (const auto& [id, origin] : make_manifest(corpus)) {
    out += id;
    out += '\t';
    out += to_string(origin);
    out += '\n';
  }
  write_file(path, out);
}

void apply_manifest(Corpus& corpus, const Manifest& manifest) {
  std::unordered_map<std::string, Origin> by_id(manifest.begin(), manifest.end());
  // One manifest serves both files of a parallel corpus, so a row for
  // "a.src#3" also covers "a.tgt#3" when no other file claims index 3.
  std::unordered_map<std::string, std::optional<Origin>> by_index;
  for (const auto& [id, origin] : manifest) {
    auto hash = id.rfind('#');
    if (hash == std::string::npos) continue;
    auto [it, fresh] = by_index.emplace(id.substr(hash + 1), origin);
    if (!fresh) it->second.reset();
  }
  auto lookup = [&](const std::string& id) -> std::optional<Origin> {
    if (auto it = by_id.find(id); it != by_id.end()) return it->second;
    return std::nullopt;
  };
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto origin = lookup(corpus.id(i));
    if (!origin && corpus.kind == CorpusKind::parallel) origin = lookup(corpus.pairs[i].tgt.id);
    if (!origin) {
      const std::string& id = corpus.id(i);
      auto hash = id.rfind('#');
      if (hash != std::string::npos && id.substr(hash + 1) == std::to_string(i))
        if (auto it = by_index.find(id.substr(hash + 1)); it != by_index.end()) origin = it->second;
    }
    if (!origin) throw MalformedCorpus("no manifest row for '" + corpus.id(i) + "'", static_cast<long>(i));
    corpus.set_origin(i, *origin);
  }
}

std::pair<Corpus, Corpus> split_by_origin(const Corpus& corpus) {
  Corpus src_side, tgt_side;
  src_side.kind = tgt_side.kind = corpus.kind;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Origin o = corpus.origin(i);
    if (o != Origin::original_src && o != Origin::original_tgt)
      throw UnknownOrigin("document '" + corpus.id(i) + "' has origin " +
                          std::string(to_string(o)));
    Corpus& dest = o == Origin::original_src ? src_side : tgt_side;
    if (corpus.kind == CorpusKind::parallel)
      dest.pairs.push_back(corpus.pairs[i]);
    else
      dest.documents.push_back(corpus.documents[i]);
  }
  return {std::move(src_side), std::move(tgt_side)};
}

std::vector<std::pair<Sentence, Sentence>> sentence_pairs(const Corpus& corpus) {
  std::vector<std::pair<Sentence, Sentence>> out;
  for (const auto& p : corpus.pairs)
    for (std::size_t k = 0; k < p.size(); ++k)
      out.emplace_back(p.src.sentences[k], p.tgt.sentences[k]);
  return out;
}

std::vector<Sentence> all_sentences(const Corpus& corpus) {
  std::vector<Sentence> out;
  for (const auto& d : corpus.documents)
    out.insert(out.end(), d.sentences.begin(), d.sentences.end());
  for (const auto& p : corpus.pairs) {
    out.insert(out.end(), p.src.sentences.begin(), p.src.sentences.end());
    out.insert(out.end(), p.tgt.sentences.begin(), p.tgt.sentences.end());
  }
  return out;
}

Corpus source_side(const Corpus& corpus) {
  if (corpus.kind != CorpusKind::parallel) return corpus;
  Corpus out = Corpus::monolingual();
  for (const auto& p : corpus.pairs) out.documents.push_back(p.src);
  return out;
}

Corpus target_side(const Corpus& corpus) {
  if (corpus.kind != CorpusKind::parallel) return corpus;
  Corpus out = Corpus::monolingual();
  for (const auto& p : corpus.pairs) out.documents.push_back(p.tgt);
  return out;
}

Corpus zip_parallel(const Corpus& src, const Corpus& tgt) {
  if (src.size() != tgt.size())
    throw MalformedCorpus("parallel document-count mismatch",
                          static_cast<long>(std::min(src.size(), tgt.size())));
  Corpus out = Corpus::parallel();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto& s = src.documents[i];
    const auto& t = tgt.documents[i];
    if (s.sentences.size() != t.sentences.size())
      throw MalformedCorpus("parallel sentence-count mismatch", static_cast<long>(i));
    out.pairs.push_back({s, t});
  }
  return out;
}

}  // namespace docnmt
