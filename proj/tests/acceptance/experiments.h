#pragma once

// Toy reproductions behind the acceptance report. Each experiment is
// deterministic in its seeds; metrics are compared bit for bit on reruns.

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace docnmt::acceptance {

struct Outcome {
  Outcome(int c, std::string t) : criterion(c), title(std::move(t)) {}

  int criterion = 0;
  std::string title;
  bool pass = false;
  std::string detail;
  std::map<std::string, double> metrics;
  double seconds = 0.0;
};

struct Context {
  std::filesystem::path workdir;
  std::vector<std::filesystem::path> test_binaries;  // the property-test executables
  std::ostream* log = nullptr;
};

// Drops data and models shared between criteria 2 and 6.
void reset_shared_state();

Outcome invariant_suite(const Context& ctx);

// Sentence- vs document-level pronoun agreement.
Outcome context_sensitivity(const Context& ctx);
// Clean-only fine-tuning after training on partly corrupted data.
Outcome fine_tuning(const Context& ctx);
// Reverse model, sampled back-translation, forward model, all through the CLI pipeline.
Outcome backtranslation_round_trip(const Context& ctx);
// Dual-encoder post-editing of a systematic first-pass error.
Outcome second_pass(const Context& ctx);
// Criterion 2's document model with masked-LM co-training. `baseline` is the
// document-level accuracy without it; computed when absent.
Outcome masked_lm(const Context& ctx, std::optional<double> baseline);

}  // namespace docnmt::acceptance
