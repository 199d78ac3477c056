#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace docnmt {

// Original language of a document, as recorded in a dev-set manifest.
enum class Origin { original_src, original_tgt, synthetic, unknown };

std::string_view to_string(Origin origin);
Origin parse_origin(std::string_view text);

// Document mark-up symbols. Raw occurrences inside sentence text are escaped
// on ingestion so they can never be confused with real mark-up.
inline constexpr std::array<std::string_view, 5> kReservedSymbols = {
    "<BEG>", "<SEP>", "<END>", "<BRK>", "<CNT>"};

// Replaces each reserved symbol "<X>" with "&lt;X&gt;". Idempotent.
std::string escape_reserved(std::string_view text);
// Inverse of escape_reserved on escaped text.
std::string unescape_reserved(std::string_view text);
bool contains_reserved(std::string_view text);

using Sentence = std::string;

struct Document {
  std::string id;
  Origin origin = Origin::unknown;
  std::vector<Sentence> sentences;

  bool operator==(const Document&) const = default;
};

// Both sides carry the same number of sentences.
struct ParallelDocument {
  Document src;
  Document tgt;

  Origin origin() const { return src.origin; }
  std::size_t size() const { return src.sentences.size(); }
  bool operator==(const ParallelDocument&) const = default;
};

enum class CorpusKind { monolingual, parallel };

struct Corpus {
  CorpusKind kind = CorpusKind::monolingual;
  std::vector<Document> documents;         // monolingual members
  std::vector<ParallelDocument> pairs;     // parallel members

  static Corpus monolingual(std::vector<Document> docs = {});
  static Corpus parallel(std::vector<ParallelDocument> docs = {});

  std::size_t size() const;
  std::size_t sentence_count() const;
  bool empty() const { return size() == 0; }
  Origin origin(std::size_t doc) const;
  void set_origin(std::size_t doc, Origin origin);
  const std::string& id(std::size_t doc) const;

  bool operator==(const Corpus&) const = default;
};

// Throws MalformedCorpus when a member violates the corpus invariants
// (empty document, empty sentence, parallel count mismatch, duplicate id).
void validate(const Corpus& corpus);

// Parses one corpus file. Document ids are "<filename>#<index>".
std::vector<Document> parse_documents(std::string_view content,
                                      std::string_view filename);

Corpus load_documents(const std::filesystem::path& path);
Corpus load_parallel(const std::filesystem::path& src_path,
                     const std::filesystem::path& tgt_path);
// Loads a parallel corpus when `tgt_path` is given, otherwise monolingual.
Corpus load_documents(const std::filesystem::path& path, CorpusKind kind,
                      const std::filesystem::path& tgt_path = {});

std::string format_documents(const std::vector<Document>& docs);
void write_documents(const Corpus& corpus, const std::filesystem::path& path);
void write_parallel(const Corpus& corpus, const std::filesystem::path& src_path,
                    const std::filesystem::path& tgt_path);

// Sidecar manifest rows: (doc-id, origin), tab separated.
using Manifest = std::vector<std::pair<std::string, Origin>>;

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Corpus& corpus, const std::filesystem::path& path);
Manifest make_manifest(const Corpus& corpus);
// Sets origins from the manifest. Parallel documents match on either side's
// id. Every document must have a row.
void apply_manifest(Corpus& corpus, const Manifest& manifest);

// (src-origin documents, tgt-origin documents), order preserved.
std::pair<Corpus, Corpus> split_by_origin(const Corpus& corpus);

// Flattened views used by sentence-level stages.
std::vector<std::pair<Sentence, Sentence>> sentence_pairs(const Corpus& corpus);
std::vector<Sentence> all_sentences(const Corpus& corpus);

// Splits a corpus into one monolingual corpus per side.
Corpus source_side(const Corpus& corpus);
Corpus target_side(const Corpus& corpus);
// Pairs two monolingual corpora with identical structure.
Corpus zip_parallel(const Corpus& src, const Corpus& tgt);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace docnmt
