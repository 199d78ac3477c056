#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "docnmt/corpus.h"
#include "docnmt/docmark.h"
#include "docnmt/transformer.h"

namespace docnmt {

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 3e-4;
  int warmup_updates = 400;  // inverse-sqrt schedule after linear warmup (adam only)
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  int optimizer_delay = 16;  // batches accumulated per update
  int batch_tokens = 4096;
  int max_updates = 1000;
  std::uint64_t seed = 1;
  std::string early_stop_metric = "bleu";
  int patience = 0;          // evaluations without improvement; 0 disables early stopping
  int eval_every = 100;      // updates between dev evaluations; 0 disables
  bool multitask_on_parallel_source = false;  // masked-LM fed from parallel source side

  // Throws InvalidConfig. `max_len` is the model's maximum sequence length.
  void validate(int max_len) const;
};

using Batch = std::vector<Example>;

// Produces training batches forever; deterministic given its seed.
class BatchStream {
 public:
  virtual ~BatchStream() = default;
  virtual Batch next() = 0;
};

// Shuffles a fixed example list each epoch and groups it into batches whose
// summed source+target length stays within `batch_tokens`.
class ShuffledBatches : public BatchStream {
 public:
  ShuffledBatches(std::vector<Example> examples, int batch_tokens, std::uint64_t seed);
  Batch next() override;
  int epoch() const { return epoch_; }

 private:
  void refill();

  std::vector<Example> examples_;
  int batch_tokens_;
  Rng rng_;
  std::vector<Batch> pending_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
};

// Replays a fixed list of batches in order, cycling.
class FixedBatches : public BatchStream {
 public:
  explicit FixedBatches(std::vector<Batch> batches) : batches_(std::move(batches)) {}
  Batch next() override;

 private:
  std::vector<Batch> batches_;
  std::size_t cursor_ = 0;
};

struct LossBreakdown {
  double ce = 0.0;   // per target token
  double mlm = 0.0;  // per masked token
  double total = 0.0;
  long ce_tokens = 0;
  long mlm_tokens = 0;
};

// Mean translation cross-entropy of a batch. With `with_grad`, gradient
// buffers receive d(ce)/d(param) (mean over target tokens).
template <class T>
LossBreakdown forward_loss(Transformer<T>& model, const Batch& batch, bool with_grad = false);

// Mean masked-LM cross-entropy over the masked positions of each sequence.
// Positions are drawn from `rng`.
template <class T>
LossBreakdown masked_lm_loss(Transformer<T>& model, const std::vector<TokenIds>& sequences, Rng& rng,
                             bool with_grad = false);

struct TrainLogEntry {
  long update = 0;
  LossBreakdown loss;
  std::optional<double> dev_metric;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::optional<double> best_metric;
  long best_update = 0;
  long updates = 0;
  bool stopped_early = false;
};

std::string format_train_log(const std::vector<TrainLogEntry>& log);

// Tracks the best evaluation and signals when `patience` consecutive
// evaluations failed to improve on it (higher is better).
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  // Returns true when training should stop.
  bool observe(double metric);
  bool improved_last() const { return improved_last_; }
  int best_evaluation() const { return best_index_; }  // 1-based
  std::optional<double> best() const {
    if (best_index_ == 0) return std::nullopt;
    return best_;
  }
  int evaluations() const { return count_; }

 private:
  int patience_;
  int count_ = 0;
  int stalled_ = 0;
  int best_index_ = 0;
  bool improved_last_ = false;
  double best_ = 0.0;
};

using DevEvaluator = std::function<double(const Model&)>;

// Adam or SGD with gradient accumulation over `optimizer_delay` batches.
class Trainer {
 public:
  Trainer(Model& model, TrainConfig config);

  // One optimizer update over the next `optimizer_delay` batches of each
  // stream. The masked-LM term is added with the model's mlm_weight.
  LossBreakdown update(BatchStream& parallel, BatchStream* mono);
  // Same, over explicitly supplied batches.
  LossBreakdown update(const std::vector<Batch>& parallel, const std::vector<std::vector<TokenIds>>& mono);

  long updates() const { return step_; }
  double current_learning_rate() const;

 private:
  void apply();

  Model& model_;
  TrainConfig config_;
  long step_ = 0;
  Rng mask_rng_;
  std::vector<Matrix<float>> m_, v_;
};

// Trains until max_updates or early stopping. Keeps the best dev checkpoint
// in `model` when a dev evaluator is given. Throws DivergedLoss on a
// non-finite loss, leaving `model` at its last finite state.
TrainResult train(Model& model, const TrainConfig& config, BatchStream& parallel, BatchStream* mono,
                  const DevEvaluator& dev = {});

// Continues training on new data with unchanged settings; the masked-LM head
// (when `config.multitask_on_parallel_source`) reads the parallel source side.
TrainResult fine_tune(Model& model, const TrainConfig& config, BatchStream& data, const DevEvaluator& dev);

// Masked-LM input of a batch: its source side.
std::vector<TokenIds> source_sequences(const Batch& batch);

enum class Level { sentence, document };
std::string_view to_string(Level level);
Level parse_level(std::string_view text);

// Sentence level: one example per sentence pair. Document level: one example
// per jointly marked chunk. `aux` (first-pass translations mirroring the
// source structure) becomes the second-encoder input.
std::vector<Example> build_examples(const Corpus& parallel, const SubwordVocab& vocab, Level level,
                                    int limit = kDefaultMaxDocTokens, const Corpus* aux = nullptr);
// Source-only examples for the masked-LM stream.
std::vector<Example> build_mono_examples(const Corpus& mono, const SubwordVocab& vocab, Level level,
                                         int limit = kDefaultMaxDocTokens);

}  // namespace docnmt
