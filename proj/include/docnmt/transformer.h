#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "docnmt/subword.h"

namespace docnmt {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Rng = std::mt19937_64;

// Multiplier applied to Glorot-uniform weights of residual block i (1-based).
enum class InitScaling {
  per_layer,  // 1/sqrt(i)
  per_depth,  // 1/sqrt(depth)
  none,
};

std::string_view to_string(InitScaling s);
InitScaling parse_init_scaling(std::string_view text);

struct TransformerConfig {
  int depth = 6;  // blocks per encoder and decoder stack
  int model_dim = 256;
  int ff_dim = 1024;
  int heads = 8;
  int max_len = 1024;
  int vocab_size = 0;
  bool dual_encoder = false;
  double mask_rate = 0.2;
  double mlm_weight = 1.0;
  bool bert_mask_split = false;  // 80/10/10 replacement instead of all-<MASK>
  bool tie_mlm_head = false;     // masked-LM head reuses the input embedding
  InitScaling init_scaling = InitScaling::per_layer;

  // Throws InvalidConfig.
  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

// One training or scoring example. `aux` is the first-pass translation fed
// to the second encoder of a dual-encoder model.
struct Example {
  TokenIds src;
  TokenIds tgt;
  TokenIds aux;
};

enum class ParamKind { residual_weight, bias, norm_gain, norm_bias, embedding, output };

struct ParamInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  int block = 0;  // 1-based residual block index, 0 outside blocks
  ParamKind kind = ParamKind::bias;
};

template <class T>
class ParameterSet {
 public:
  int add(std::string name, int rows, int cols, int block, ParamKind kind);

  int size() const { return static_cast<int>(info_.size()); }
  const ParamInfo& info(int i) const { return info_[static_cast<std::size_t>(i)]; }
  Matrix<T>& value(int i) { return values_[static_cast<std::size_t>(i)]; }
  const Matrix<T>& value(int i) const { return values_[static_cast<std::size_t>(i)]; }
  Matrix<T>& grad(int i) { return grads_[static_cast<std::size_t>(i)]; }
  const Matrix<T>& grad(int i) const { return grads_[static_cast<std::size_t>(i)]; }
  // -1 when absent.
  int find(std::string_view name) const;
  void zero_grad();
  long count() const;
  bool all_finite() const;

 private:
  std::vector<ParamInfo> info_;
  std::vector<Matrix<T>> values_;
  std::vector<Matrix<T>> grads_;
};

// Incremental decoder state of one hypothesis.
template <class T>
struct DecoderCache {
  std::vector<Matrix<T>> keys;    // per block, capacity rows x model_dim
  std::vector<Matrix<T>> values;
  int length = 0;
};

// Encoder outputs projected into per-block cross-attention keys and values.
template <class T>
struct EncodedInput {
  Matrix<T> src_states;
  Matrix<T> aux_states;
  std::vector<Matrix<T>> src_keys, src_values;
  std::vector<Matrix<T>> aux_keys, aux_values;
};

// Pre-norm transformer encoder-decoder with shared source/target embeddings,
// sinusoidal positions and no dropout.
template <class T>
class Transformer {
 public:
  explicit Transformer(TransformerConfig config);

  const TransformerConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  // Glorot-uniform initialization; residual block weights are scaled by the
  // configured multiplier. Deterministic in `seed`.
  void init(std::uint64_t seed);

  // Summed negative log-likelihood of tgt + <EOS>. With `with_grad`, adds
  // grad_scale * d(nll)/d(param) to every gradient buffer.
  double translation_nll(const Example& ex, bool with_grad = false, T grad_scale = T(1));
  double translation_nll(const Example& ex) const;
  // Same for a whole batch. The examples are stacked row-wise through every
  // layer and attention stays inside each example, so the result equals the
  // sum over examples up to rounding.
  double translation_nll(std::span<const Example> batch, bool with_grad, T grad_scale);

  // Summed masked-LM negative log-likelihood over `positions` of `ids`.
  // The encoder sees <MASK> (or the 80/10/10 replacement) at those positions.
  double masked_lm_nll(const TokenIds& ids, std::span<const int> positions, Rng& rng,
                       bool with_grad = false, T grad_scale = T(1));

  // Exactly ceil(mask_rate * n) distinct positions, sorted.
  std::vector<int> choose_mask_positions(int n, Rng& rng) const;

  // Teacher-forced output logits, one row per target position (tgt + <EOS>).
  Matrix<T> logits(const Example& ex) const;
  // Masked-LM head logits over the encoder states of `ids` (no masking applied).
  Matrix<T> mlm_logits(const TokenIds& ids) const;

  EncodedInput<T> encode(const TokenIds& src, const TokenIds* aux = nullptr) const;
  DecoderCache<T> start_cache() const;
  // Feeds `tokens[h]` to hypothesis h and writes next-token log-probabilities
  // into row h of `log_probs`.
  void decode_step(const EncodedInput<T>& input, std::vector<DecoderCache<T>>& caches,
                   std::span<const TokenId> tokens, Matrix<T>& log_probs) const;

  template <class U>
  Transformer<U> cast() const {
    Transformer<U> out(config_);
    for (int i = 0; i < params_.size(); ++i) out.params().value(i) = params_.value(i).template cast<U>();
    return out;
  }

  // Copies values of identically named, identically shaped parameters.
  int copy_matching(const Transformer<T>& other);

  void check_length(std::size_t n, const char* what) const;

 private:
  struct Layout;
  void build();

  TransformerConfig config_;
  ParameterSet<T> params_;
  std::shared_ptr<const Layout> layout_;
  Matrix<T> positions_;
};

using Model = Transformer<float>;

// Log-softmax of each row.
template <class T>
Matrix<T> log_softmax_rows(const Matrix<T>& logits);

// Cross-entropy summed over `positions` of a logits matrix (one row per
// position); rows outside `positions` are ignored.
template <class T>
double masked_cross_entropy(const Matrix<T>& logits, std::span<const TokenId> targets,
                            std::span<const int> positions);

// Glorot-uniform bound sqrt(6 / (fan_in + fan_out)).
double glorot_bound(int fan_in, int fan_out);
double block_multiplier(InitScaling scaling, int block, int depth);

}  // namespace docnmt
