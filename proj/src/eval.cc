#include "docnmt/eval.h"

#include <cmath>
#include <map>
#include <regex>
#include <sstream>

#include "docnmt/error.h"

namespace docnmt {

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

using NgramCounts = std::map<std::vector<std::string_view>, long>;

NgramCounts count_ngrams(const std::vector<std::string>& tokens) {
  NgramCounts counts;
  for (std::size_t n = 1; n <= 4; ++n)
    for (std::size_t i = 0; i + n <= tokens.size(); ++i)
      ++counts[std::vector<std::string_view>(tokens.begin() + static_cast<long>(i),
                                             tokens.begin() + static_cast<long>(i + n))];
  return counts;
}

std::vector<std::string> corpus_lines(const Corpus& c, std::size_t doc) {
  return c.kind == CorpusKind::parallel ? c.pairs[doc].tgt.sentences : c.documents[doc].sentences;
}

}  // namespace

std::vector<std::string> tokenize_13a(std::string_view text) {
  static const std::regex symbols(R"(([\{-~\[-`\x20-&\(-\+:-@/]))");
  static const std::regex period_after(R"(([^0-9])([\.,]))");
  static const std::regex period_before(R"(([\.,])([^0-9]))");
  static const std::regex dash(R"(([0-9])(-))");

  std::string norm(text);
  replace_all(norm, "<skipped>", "");
  replace_all(norm, "-\n", "");
  replace_all(norm, "\n", " ");
  replace_all(norm, "&quot;", "\"");
  replace_all(norm, "&amp;", "&");
  replace_all(norm, "&lt;", "<");
  replace_all(norm, "&gt;", ">");
  norm = " " + norm + " ";
  norm = std::regex_replace(norm, symbols, " $1 ");
  norm = std::regex_replace(norm, period_after, "$1 $2 ");
  norm = std::regex_replace(norm, period_before, " $1 $2");
  norm = std::regex_replace(norm, dash, "$1 $2 ");

  std::vector<std::string> tokens;
  std::istringstream in(norm);
  std::string tok;
  while (in >> tok) tokens.push_back(tok);
  return tokens;
}

BleuReport bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size())
    throw LengthMismatch("bleu: " + std::to_string(hyps.size()) + " hypotheses for " +
                         std::to_string(refs.size()) + " references");
  if (hyps.empty()) throw EmptyCorpus("bleu: no segments");
  BleuReport r;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    auto h = tokenize_13a(hyps[i]);
    auto ref = tokenize_13a(refs[i]);
    r.hyp_len += static_cast<long>(h.size());
    r.ref_len += static_cast<long>(ref.size());
    auto hc = count_ngrams(h);
    auto rc = count_ngrams(ref);
    for (const auto& [gram, count] : hc) {
      auto n = gram.size() - 1;
      auto it = rc.find(gram);
      r.correct[n] += std::min(count, it == rc.end() ? 0L : it->second);
      r.totals[n] += count;
    }
  }
  double smooth = 1.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (r.totals[n] == 0) break;
    if (r.correct[n] == 0) {
      smooth *= 2;
      r.precisions[n] = 1.0 / (smooth * static_cast<double>(r.totals[n]));
    } else {
      r.precisions[n] = static_cast<double>(r.correct[n]) / static_cast<double>(r.totals[n]);
    }
  }
  r.brevity_penalty = 1.0;
  if (r.hyp_len < r.ref_len)
    r.brevity_penalty =
        r.hyp_len > 0 ? std::exp(1.0 - static_cast<double>(r.ref_len) / static_cast<double>(r.hyp_len)) : 0.0;
  r.score = recompute_score(r);
  return r;
}

double recompute_score(const BleuReport& r) {
  double log_sum = 0.0;
  for (double p : r.precisions) {
    if (p <= 0.0) return 0.0;
    log_sum += std::log(100.0 * p);
  }
  return r.brevity_penalty * std::exp(log_sum / 4.0);
}

OriginReport evaluate_by_origin(const Corpus& hyps, const Corpus& refs) {
  if (hyps.size() != refs.size())
    throw LengthMismatch("evaluate_by_origin: " + std::to_string(hyps.size()) + " hypothesis documents for " +
                         std::to_string(refs.size()) + " reference documents");
  std::vector<std::string> h_all, r_all, h_src, r_src, h_tgt, r_tgt;
  for (std::size_t d = 0; d < refs.size(); ++d) {
    auto h = corpus_lines(hyps, d);
    auto r = corpus_lines(refs, d);
    if (h.size() != r.size())
      throw LengthMismatch("evaluate_by_origin: document " + std::to_string(d) + " has " + std::to_string(h.size()) +
                           " hypothesis and " + std::to_string(r.size()) + " reference sentences");
    Origin o = refs.origin(d);
    if (o != Origin::original_src && o != Origin::original_tgt)
      throw UnknownOrigin("document '" + refs.id(d) + "' has origin " + std::string(to_string(o)));
    auto& hs = o == Origin::original_src ? h_src : h_tgt;
    auto& rs = o == Origin::original_src ? r_src : r_tgt;
    hs.insert(hs.end(), h.begin(), h.end());
    rs.insert(rs.end(), r.begin(), r.end());
    h_all.insert(h_all.end(), h.begin(), h.end());
    r_all.insert(r_all.end(), r.begin(), r.end());
  }
  OriginReport out;
  out.all = bleu(h_all, r_all);
  if (!h_src.empty()) out.src_origin = bleu(h_src, r_src);
  if (!h_tgt.empty()) out.tgt_origin = bleu(h_tgt, r_tgt);
  return out;
}

std::string bleu_signature(std::string_view lang_pair) {
  std::string sig = "BLEU+case.mixed";
  if (!lang_pair.empty()) sig += "+lang." + std::string(lang_pair);
  return sig + "+numrefs.1+smooth.exp+tok.13a+version.1.3.0";
}

std::string format_report(const OriginReport& report, std::string_view lang_pair) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(4);
  out << "split\tscore\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len\n";
  auto row = [&](const char* name, const std::optional<BleuReport>& r) {
    if (!r) return;
    out << name << '\t' << r->score;
    for (double p : r->precisions) out << '\t' << p;
    out << '\t' << r->brevity_penalty << '\t' << r->hyp_len << '\t' << r->ref_len << '\n';
  };
  row("original-src", report.src_origin);
  row("original-tgt", report.tgt_origin);
  row("all", report.all);
  out << "# " << bleu_signature(lang_pair) << '\n';
  return out.str();
}

}  // namespace docnmt
