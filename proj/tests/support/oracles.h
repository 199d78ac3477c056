#pragma once

// Slow, obviously-correct reimplementations used to check the library.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "docnmt/corpus.h"

namespace docnmt::testing {

struct OracleBleu {
  double score = 0.0;
  std::array<double, 4> precisions{};
  double bp = 0.0;
  std::array<long, 4> correct{};
  std::array<long, 4> totals{};
  long hyp_len = 0;
  long ref_len = 0;
};

// Corpus BLEU over whitespace-tokenized lines, counting n-grams by linear
// scans. Smoothing: the k-th zero-match order gets 1 / (2^k * total).
OracleBleu brute_force_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs);

// Sentences per chunk when packing greedily: a chunk of sentences i..j costs
// sum(len) + (j - i + 1) separators + 2 boundary symbols.
std::vector<int> greedy_pack_counts(const std::vector<int>& lengths, int limit);
// Same with both sides required to fit.
std::vector<int> joint_pack_counts(const std::vector<int>& a, const std::vector<int>& b, int limit);

struct OracleLink {
  int a = 0;  // sentences taken from each side
  int b = 0;
};

struct OracleAlignment {
  double cost = 0.0;
  std::vector<std::vector<OracleLink>> best_paths;  // every path reaching the minimum
};

// Enumerates every monotone path of {1-1, 1-0, 0-1, 2-1, 1-2} links.
OracleAlignment exhaustive_alignment(const std::vector<int>& a, const std::vector<int>& b);
double oracle_link_cost(int la, int lb, int na, int nb);

// Random corpora with awkward content: reserved symbols, entities, UTF-8.
std::string random_sentence(std::mt19937_64& rng);
Corpus random_monolingual(std::mt19937_64& rng, int docs, const std::string& name = "rand");
Corpus random_parallel(std::mt19937_64& rng, int docs, const std::string& name = "rand");

// Most frequent adjacent symbol pair over the words of `sentences`, each word
// split into a boundary marker followed by its characters; ties
// go to the lexicographically smallest pair.
std::pair<std::string, std::string> most_frequent_pair(const std::vector<std::string>& sentences);

}  // namespace docnmt::testing
