#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "docnmt/corpus.h"

namespace docnmt {

// mteval-v13a tokenization, case preserved.
std::vector<std::string> tokenize_13a(std::string_view text);

struct BleuReport {
  double score = 0.0;                          // 0..100
  std::array<double, 4> precisions{};          // smoothed, as fractions
  double brevity_penalty = 1.0;
  long hyp_len = 0;
  long ref_len = 0;
  std::array<long, 4> correct{};
  std::array<long, 4> totals{};
};

// Corpus BLEU-4, one reference per hypothesis, exponential smoothing of
// zero n-gram matches. Throws LengthMismatch, EmptyCorpus.
BleuReport bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs);

// Recomputes the score from the report's precisions and brevity penalty.
double recompute_score(const BleuReport& report);

struct OriginReport {
  std::optional<BleuReport> src_origin;  // absent when the split is empty
  std::optional<BleuReport> tgt_origin;
  BleuReport all;
};

// Hypothesis documents must mirror the reference documents one-to-one.
// Origins come from the reference corpus (target side when parallel).
// Throws LengthMismatch, UnknownOrigin.
OriginReport evaluate_by_origin(const Corpus& hyps, const Corpus& refs);

std::string bleu_signature(std::string_view lang_pair = {});

// Rows: split, score, p1..p4, bp, hyp_len, ref_len; then a signature line.
std::string format_report(const OriginReport& report, std::string_view lang_pair = {});

}  // namespace docnmt
