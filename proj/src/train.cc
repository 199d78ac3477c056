#include "docnmt/train.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "docnmt/error.h"

namespace docnmt {

void TrainConfig::validate(int max_len) const {
  auto fail = [](const std::string& what) { throw InvalidConfig("train config: " + what); };
  if (optimizer_delay < 1) fail("optimizer_delay must be >= 1");
  if (batch_tokens < max_len) fail("batch_tokens must be >= max_len");
  if (max_updates < 0) fail("max_updates must be non-negative");
  if (learning_rate <= 0) fail("learning_rate must be positive");
  if (patience < 0 || eval_every < 0) fail("patience and eval_every must be non-negative");
}

// ---------------------------------------------------------------------------
// Batch streams

ShuffledBatches::ShuffledBatches(std::vector<Example> examples, int batch_tokens, std::uint64_t seed)
    : examples_(std::move(examples)), batch_tokens_(batch_tokens), rng_(seed) {
  if (examples_.empty()) throw EmptyCorpus("ShuffledBatches: no examples");
}

void ShuffledBatches::refill() {
  std::vector<std::size_t> order(examples_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Fisher-Yates with an explicit draw keeps the order independent of the
  // standard library's shuffle implementation.
  for (std::size_t i = order.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng_() % i);
    std::swap(order[i - 1], order[j]);
  }
  pending_.clear();
  Batch current;
  long tokens = 0;
  for (auto idx : order) {
    const auto& ex = examples_[idx];
    long n = static_cast<long>(ex.src.size() + ex.tgt.size() + ex.aux.size() + 1);
    if (!current.empty() && tokens + n > batch_tokens_) {
      pending_.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(ex);
    tokens += n;
  }
  if (!current.empty()) pending_.push_back(std::move(current));
  cursor_ = 0;
  ++epoch_;
}

Batch ShuffledBatches::next() {
  if (cursor_ >= pending_.size()) refill();
  return pending_[cursor_++];
}

Batch FixedBatches::next() {
  if (batches_.empty()) throw EmptyCorpus("FixedBatches: no batches");
  Batch b = batches_[cursor_];
  cursor_ = (cursor_ + 1) % batches_.size();
  return b;
}

std::vector<TokenIds> source_sequences(const Batch& batch) {
  std::vector<TokenIds> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) out.push_back(ex.src);
  return out;
}

std::string_view to_string(Level level) { return level == Level::sentence ? "sentence" : "document"; }

Level parse_level(std::string_view text) {
  if (text == "sentence") return Level::sentence;
  if (text == "document") return Level::document;
  throw InvalidConfig("unknown level '" + std::string(text) + "'");
}

namespace {

std::vector<TokenIds> encode_sentences(const std::vector<Sentence>& sentences, const SubwordVocab& vocab) {
  std::vector<TokenIds> out;
  for (const auto& s : sentences) out.push_back(vocab.encode(s));
  return out;
}

const Document& aux_document(const Corpus& aux, std::size_t d) {
  return aux.kind == CorpusKind::parallel ? aux.pairs[d].tgt : aux.documents[d];
}

}  // namespace

std::vector<Example> build_examples(const Corpus& parallel, const SubwordVocab& vocab, Level level, int limit,
                                    const Corpus* aux) {
  if (parallel.kind != CorpusKind::parallel) throw Error("build_examples: parallel corpus required");
  if (aux && aux->size() != parallel.size())
    throw LengthMismatch("build_examples: first-pass corpus has " + std::to_string(aux->size()) + " documents, expected " +
                         std::to_string(parallel.size()));
  std::vector<Example> out;
  for (std::size_t d = 0; d < parallel.pairs.size(); ++d) {
    const auto& pd = parallel.pairs[d];
    std::vector<std::vector<TokenIds>> sides = {encode_sentences(pd.src.sentences, vocab),
                                                encode_sentences(pd.tgt.sentences, vocab)};
    if (aux) {
      const auto& a = aux_document(*aux, d);
      if (a.sentences.size() != pd.size())
        throw LengthMismatch("build_examples: first-pass document " + std::to_string(d) + " has " +
                             std::to_string(a.sentences.size()) + " sentences, expected " + std::to_string(pd.size()));
      sides.push_back(encode_sentences(a.sentences, vocab));
    }
    if (level == Level::sentence) {
      for (std::size_t k = 0; k < pd.size(); ++k)
        out.push_back({sides[0][k], sides[1][k], aux ? sides[2][k] : TokenIds{}});
      continue;
    }
    for (auto& chunk : mark_up_joint(sides, limit).chunks)
      out.push_back({std::move(chunk[0].ids), std::move(chunk[1].ids), aux ? std::move(chunk[2].ids) : TokenIds{}});
  }
  return out;
}

std::vector<Example> build_mono_examples(const Corpus& mono, const SubwordVocab& vocab, Level level, int limit) {
  std::vector<Example> out;
  for (std::size_t d = 0; d < mono.size(); ++d) {
    const auto& doc = mono.kind == CorpusKind::parallel ? mono.pairs[d].src : mono.documents[d];
    auto ids = encode_sentences(doc.sentences, vocab);
    if (level == Level::sentence) {
      for (auto& s : ids) out.push_back({std::move(s), {}, {}});
      continue;
    }
    for (auto& seq : mark_up_ids(ids, limit).sequences) out.push_back({std::move(seq.ids), {}, {}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
LossBreakdown forward_loss(Transformer<T>& model, const Batch& batch, bool with_grad) {
  LossBreakdown out;
  for (const auto& ex : batch) out.ce_tokens += static_cast<long>(ex.tgt.size()) + 1;
  if (out.ce_tokens == 0) return out;
  const T scale = T(1) / static_cast<T>(out.ce_tokens);
  double nll = model.translation_nll(std::span<const Example>(batch), with_grad, scale);
  out.ce = nll / static_cast<double>(out.ce_tokens);
  out.total = out.ce;
  return out;
}

template <class T>
LossBreakdown masked_lm_loss(Transformer<T>& model, const std::vector<TokenIds>& sequences, Rng& rng,
                             bool with_grad) {
  LossBreakdown out;
  std::vector<std::vector<int>> positions;
  for (const auto& s : sequences) {
    positions.push_back(model.choose_mask_positions(static_cast<int>(s.size()), rng));
    out.mlm_tokens += static_cast<long>(positions.back().size());
  }
  if (out.mlm_tokens == 0) return out;
  const T scale = T(1) / static_cast<T>(out.mlm_tokens);
  double nll = 0.0;
  for (std::size_t i = 0; i < sequences.size(); ++i)
    nll += model.masked_lm_nll(sequences[i], positions[i], rng, with_grad, scale);
  out.mlm = nll / static_cast<double>(out.mlm_tokens);
  out.total = model.config().mlm_weight * out.mlm;
  return out;
}

template LossBreakdown forward_loss(Transformer<float>&, const Batch&, bool);
template LossBreakdown forward_loss(Transformer<double>&, const Batch&, bool);
template LossBreakdown masked_lm_loss(Transformer<float>&, const std::vector<TokenIds>&, Rng&, bool);
template LossBreakdown masked_lm_loss(Transformer<double>&, const std::vector<TokenIds>&, Rng&, bool);

std::string format_train_log(const std::vector<TrainLogEntry>& log) {
  std::ostringstream out;
  out.precision(6);
  out << "update\tce\tmlm\ttotal\tdev\n";
  for (const auto& e : log) {
    out << e.update << '\t' << e.loss.ce << '\t' << e.loss.mlm << '\t' << e.loss.total << '\t';
    if (e.dev_metric) out << *e.dev_metric;
    out << '\n';
  }
  return out.str();
}

bool EarlyStopping::observe(double metric) {
  ++count_;
  improved_last_ = best_index_ == 0 || metric > best_;
  if (improved_last_) {
    best_ = metric;
    best_index_ = count_;
    stalled_ = 0;
  } else {
    ++stalled_;
  }
  return patience_ > 0 && stalled_ >= patience_;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(Model& model, TrainConfig config)
    : model_(model), config_(std::move(config)), mask_rng_(config_.seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate(model_.config().max_len);
  auto& p = model_.params();
  for (int i = 0; i < p.size(); ++i) {
    m_.emplace_back(Matrix<float>::Zero(p.value(i).rows(), p.value(i).cols()));
    v_.emplace_back(Matrix<float>::Zero(p.value(i).rows(), p.value(i).cols()));
  }
}

double Trainer::current_learning_rate() const {
  if (config_.optimizer == OptimizerKind::sgd || config_.warmup_updates <= 0) return config_.learning_rate;
  double step = static_cast<double>(std::max<long>(step_, 1));
  double warm = static_cast<double>(config_.warmup_updates);
  return config_.learning_rate * std::min(step / warm, std::sqrt(warm / step));
}

LossBreakdown Trainer::update(BatchStream& parallel, BatchStream* mono) {
  std::vector<Batch> batches;
  std::vector<std::vector<TokenIds>> mono_batches;
  for (int i = 0; i < config_.optimizer_delay; ++i) {
    batches.push_back(parallel.next());
    if (mono) mono_batches.push_back(source_sequences(mono->next()));
  }
  return update(batches, mono_batches);
}

LossBreakdown Trainer::update(const std::vector<Batch>& parallel, const std::vector<std::vector<TokenIds>>& mono_in) {
  const std::vector<std::vector<TokenIds>>* mono = &mono_in;
  std::vector<std::vector<TokenIds>> from_source;
  if (mono_in.empty() && config_.multitask_on_parallel_source) {
    for (const auto& b : parallel) from_source.push_back(source_sequences(b));
    mono = &from_source;
  }

  model_.params().zero_grad();
  LossBreakdown loss;
  for (const auto& b : parallel)
    for (const auto& ex : b) loss.ce_tokens += static_cast<long>(ex.tgt.size()) + 1;

  std::vector<std::vector<std::vector<int>>> positions;
  for (const auto& b : *mono) {
    auto& per_batch = positions.emplace_back();
    for (const auto& s : b) {
      per_batch.push_back(model_.choose_mask_positions(static_cast<int>(s.size()), mask_rng_));
      loss.mlm_tokens += static_cast<long>(per_batch.back().size());
    }
  }

  if (loss.ce_tokens > 0) {
    const float scale = 1.0f / static_cast<float>(loss.ce_tokens);
    // Delayed batches are stacked into one pass, like a single large batch.
    Batch all;
    for (const auto& b : parallel) all.insert(all.end(), b.begin(), b.end());
    loss.ce = model_.translation_nll(std::span<const Example>(all), true, scale) / static_cast<double>(loss.ce_tokens);
  }
  if (loss.mlm_tokens > 0) {
    const double weight = model_.config().mlm_weight;
    const float scale = static_cast<float>(weight / static_cast<double>(loss.mlm_tokens));
    double mlm_nll = 0.0;
    for (std::size_t b = 0; b < mono->size(); ++b)
      for (std::size_t s = 0; s < (*mono)[b].size(); ++s)
        mlm_nll += model_.masked_lm_nll((*mono)[b][s], positions[b][s], mask_rng_, true, scale);
    loss.mlm = mlm_nll / static_cast<double>(loss.mlm_tokens);
  }
  loss.total = loss.ce + model_.config().mlm_weight * loss.mlm;

  bool finite = std::isfinite(loss.total);
  for (int i = 0; finite && i < model_.params().size(); ++i) finite = model_.params().grad(i).allFinite();
  if (!finite) throw DivergedLoss("non-finite training loss", step_ + 1);

  ++step_;
  apply();
  return loss;
}

void Trainer::apply() {
  auto& p = model_.params();
  const auto lr = static_cast<float>(current_learning_rate());
  if (config_.optimizer == OptimizerKind::sgd) {
    for (int i = 0; i < p.size(); ++i) p.value(i) -= lr * p.grad(i);
    return;
  }
  const auto b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
  const auto eps = static_cast<float>(config_.epsilon);
  const auto t = static_cast<double>(step_);
  const auto c1 = static_cast<float>(1.0 - std::pow(config_.beta1, t));
  const auto c2 = static_cast<float>(1.0 - std::pow(config_.beta2, t));
  for (int i = 0; i < p.size(); ++i) {
    auto& m = m_[static_cast<std::size_t>(i)];
    auto& v = v_[static_cast<std::size_t>(i)];
    const auto& g = p.grad(i);
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
    p.value(i).array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// Training loops

TrainResult train(Model& model, const TrainConfig& config, BatchStream& parallel, BatchStream* mono,
                  const DevEvaluator& dev) {
  Trainer trainer(model, config);
  TrainResult result;
  EarlyStopping stopper(config.patience);
  std::vector<Matrix<float>> best;
  auto snapshot = [&]() {
    best.clear();
    for (int i = 0; i < model.params().size(); ++i) best.push_back(model.params().value(i));
  };

  while (trainer.updates() < config.max_updates) {
    TrainLogEntry entry;
    entry.loss = trainer.update(parallel, mono);
    entry.update = trainer.updates();
    bool last = trainer.updates() == config.max_updates;
    bool evaluate = dev && config.eval_every > 0 && (entry.update % config.eval_every == 0 || last);
    bool stop = false;
    if (evaluate) {
      double metric = dev(model);
      entry.dev_metric = metric;
      stop = stopper.observe(metric);
      if (stopper.improved_last()) {
        snapshot();
        result.best_metric = metric;
        result.best_update = entry.update;
      }
    }
    result.log.push_back(entry);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  result.updates = trainer.updates();
  model.params().zero_grad();
  if (!best.empty()) {
    for (int i = 0; i < model.params().size(); ++i) model.params().value(i) = best[static_cast<std::size_t>(i)];
  }
  return result;
}

TrainResult fine_tune(Model& model, const TrainConfig& config, BatchStream& data, const DevEvaluator& dev) {
  return train(model, config, data, nullptr, dev);
}

}  // namespace docnmt
