#include "docnmt/transformer.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "docnmt/error.h"

namespace docnmt {

std::string_view to_string(InitScaling s) {
  switch (s) {
    case InitScaling::per_layer: return "per-layer";
    case InitScaling::per_depth: return "per-depth";
    case InitScaling::none: return "none";
  }
  return "none";
}

InitScaling parse_init_scaling(std::string_view text) {
  if (text == "per-layer") return InitScaling::per_layer;
  if (text == "per-depth") return InitScaling::per_depth;
  if (text == "none") return InitScaling::none;
  throw InvalidConfig("unknown init scaling '" + std::string(text) + "'");
}

void TransformerConfig::validate() const {
  auto fail = [](const std::string& what) { throw InvalidConfig("transformer config: " + what); };
  if (depth < 1) fail("depth must be >= 1");
  if (model_dim < 1 || heads < 1) fail("model_dim and heads must be positive");
  if (model_dim % heads != 0) fail("model_dim must be divisible by heads");
  if (ff_dim < 1) fail("ff_dim must be positive");
  if (max_len < 8) fail("max_len must be >= 8");
  if (vocab_size <= special::kCount) fail("vocab_size must exceed the special symbols");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) fail("mask_rate must lie in (0, 1)");
  if (mlm_weight < 0.0) fail("mlm_weight must be non-negative");
}

double glorot_bound(int fan_in, int fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); }

double block_multiplier(InitScaling scaling, int block, int depth) {
  switch (scaling) {
    case InitScaling::per_layer: return block > 0 ? 1.0 / std::sqrt(static_cast<double>(block)) : 1.0;
    case InitScaling::per_depth: return block > 0 ? 1.0 / std::sqrt(static_cast<double>(depth)) : 1.0;
    case InitScaling::none: return 1.0;
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// ParameterSet

template <class T>
int ParameterSet<T>::add(std::string name, int rows, int cols, int block, ParamKind kind) {
  info_.push_back({std::move(name), rows, cols, block, kind});
  values_.emplace_back(Matrix<T>::Zero(rows, cols));
  grads_.emplace_back(Matrix<T>::Zero(rows, cols));
  return static_cast<int>(info_.size()) - 1;
}

template <class T>
int ParameterSet<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < info_.size(); ++i)
    if (info_[i].name == name) return static_cast<int>(i);
  return -1;
}

template <class T>
void ParameterSet<T>::zero_grad() {
  for (auto& g : grads_) g.setZero();
}

template <class T>
long ParameterSet<T>::count() const {
  long n = 0;
  for (const auto& v : values_) n += static_cast<long>(v.size());
  return n;
}

template <class T>
bool ParameterSet<T>::all_finite() const {
  for (const auto& v : values_)
    if (!v.allFinite()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Layout

namespace {

struct LinearIds {
  int w = -1, b = -1;
};
struct NormIds {
  int g = -1, b = -1;
};
struct AttnIds {
  LinearIds q, k, v, o;
};
struct FfIds {
  LinearIds in, out;
};
struct EncBlock {
  NormIds ln_attn;
  AttnIds attn;
  NormIds ln_ff;
  FfIds ff;
};
struct DecBlock {
  NormIds ln_self;
  AttnIds self;
  NormIds ln_src;
  AttnIds src;
  NormIds ln_aux;
  AttnIds aux;
  NormIds ln_ff;
  FfIds ff;
};

}  // namespace

template <class T>
struct Transformer<T>::Layout {
  int embedding = -1;
  std::vector<EncBlock> encoder, encoder_aux;
  NormIds enc_final, enc_aux_final;
  std::vector<DecBlock> decoder;
  NormIds dec_final;
  LinearIds output;
  LinearIds mlm;
};

namespace {

template <class T>
LinearIds add_linear(ParameterSet<T>& p, const std::string& name, int in, int out, int block, ParamKind kind) {
  return {p.add(name + ".w", in, out, block, kind), p.add(name + ".b", 1, out, block, ParamKind::bias)};
}

template <class T>
NormIds add_norm(ParameterSet<T>& p, const std::string& name, int dim, int block) {
  return {p.add(name + ".gain", 1, dim, block, ParamKind::norm_gain),
          p.add(name + ".bias", 1, dim, block, ParamKind::norm_bias)};
}

template <class T>
AttnIds add_attention(ParameterSet<T>& p, const std::string& name, int dim, int block) {
  auto kind = ParamKind::residual_weight;
  return {add_linear(p, name + ".q", dim, dim, block, kind), add_linear(p, name + ".k", dim, dim, block, kind),
          add_linear(p, name + ".v", dim, dim, block, kind), add_linear(p, name + ".o", dim, dim, block, kind)};
}

template <class T>
FfIds add_ff(ParameterSet<T>& p, const std::string& name, int dim, int ff, int block) {
  auto kind = ParamKind::residual_weight;
  return {add_linear(p, name + ".in", dim, ff, block, kind), add_linear(p, name + ".out", ff, dim, block, kind)};
}

template <class T>
std::vector<EncBlock> add_encoder(ParameterSet<T>& p, const std::string& prefix, const TransformerConfig& c) {
  std::vector<EncBlock> blocks;
  for (int i = 1; i <= c.depth; ++i) {
    std::string n = prefix + "." + std::to_string(i);
    EncBlock b;
    b.ln_attn = add_norm(p, n + ".ln_attn", c.model_dim, i);
    b.attn = add_attention(p, n + ".attn", c.model_dim, i);
    b.ln_ff = add_norm(p, n + ".ln_ff", c.model_dim, i);
    b.ff = add_ff(p, n + ".ff", c.model_dim, c.ff_dim, i);
    blocks.push_back(b);
  }
  return blocks;
}

// ---------------------------------------------------------------------------
// Building blocks. Each backward adds parameter gradients and returns the
// gradient with respect to its input.

template <class T>
using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
Matrix<T> linear_fwd(const ParameterSet<T>& p, LinearIds id, const Matrix<T>& x) {
  Matrix<T> y(x.rows(), p.value(id.w).cols());
  y.noalias() = x * p.value(id.w);
  y.rowwise() += p.value(id.b).row(0);
  return y;
}

template <class T>
Matrix<T> linear_bwd(ParameterSet<T>& p, LinearIds id, const Matrix<T>& x, const Matrix<T>& dy) {
  p.grad(id.w).noalias() += x.transpose() * dy;
  p.grad(id.b) += dy.colwise().sum();
  Matrix<T> dx(dy.rows(), x.cols());
  dx.noalias() = dy * p.value(id.w).transpose();
  return dx;
}

template <class T>
struct NormCache {
  Matrix<T> xhat;
  Col<T> inv_std;
};

constexpr double kNormEps = 1e-6;

template <class T>
Matrix<T> norm_fwd(const ParameterSet<T>& p, NormIds id, const Matrix<T>& x, NormCache<T>* cache) {
  const auto d = static_cast<T>(x.cols());
  Col<T> mean = x.rowwise().sum() / d;
  Matrix<T> xc = x.colwise() - mean;
  Col<T> var = xc.array().square().rowwise().sum() / d;
  Col<T> inv = (var.array() + T(kNormEps)).rsqrt();
  Matrix<T> xhat = xc.array().colwise() * inv.array();
  Matrix<T> y = xhat.array().rowwise() * p.value(id.g).row(0).array();
  y.rowwise() += p.value(id.b).row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

template <class T>
Matrix<T> norm_bwd(ParameterSet<T>& p, NormIds id, const NormCache<T>& cache, const Matrix<T>& dy) {
  const auto d = static_cast<T>(dy.cols());
  p.grad(id.g) += (dy.array() * cache.xhat.array()).matrix().colwise().sum();
  p.grad(id.b) += dy.colwise().sum();
  Matrix<T> dxhat = dy.array().rowwise() * p.value(id.g).row(0).array();
  Col<T> mean_d = dxhat.rowwise().sum() / d;
  Col<T> mean_dx = (dxhat.array() * cache.xhat.array()).rowwise().sum() / d;
  Matrix<T> dx = dxhat.colwise() - mean_d;
  dx -= (cache.xhat.array().colwise() * mean_dx.array()).matrix();
  dx = dx.array().colwise() * cache.inv_std.array();
  return dx;
}

template <class T>
void softmax_rows_inplace(Matrix<T>& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    T m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp();
    s.row(r) /= s.row(r).sum();
  }
}

// Row ranges of sequences stacked in one matrix. Query sequence i attends
// only to key sequence i.
struct Segments {
  std::vector<Eigen::Index> start, len;

  void push(Eigen::Index n) {
    start.push_back(start.empty() ? 0 : start.back() + len.back());
    len.push_back(n);
  }
  std::size_t size() const { return start.size(); }
  Eigen::Index rows() const { return start.empty() ? 0 : start.back() + len.back(); }
};

Segments whole(Eigen::Index n) {
  Segments s;
  s.push(n);
  return s;
}

template <class T>
struct AttnCache {
  Matrix<T> xq, xkv, q, k, v, o;
  std::vector<Matrix<T>> probs;  // segment-major, then head
  Segments qs, ks;
  bool empty = false;
};

// Query rows whose key segment is empty receive no attention output at all.
template <class T>
void zero_unattended(Matrix<T>& m, const Segments& qs, const Segments& ks) {
  for (std::size_t s = 0; s < qs.size(); ++s)
    if (ks.len[s] == 0) m.middleRows(qs.start[s], qs.len[s]).setZero();
}

template <class T>
Matrix<T> attention_fwd(const ParameterSet<T>& p, AttnIds id, int heads, const Matrix<T>& xq, const Segments& qs,
                        const Matrix<T>& xkv, const Segments& ks, bool causal, AttnCache<T>* cache) {
  const Eigen::Index lq = xq.rows(), d = xq.cols();
  if (xkv.rows() == 0) {
    if (cache) cache->empty = true;
    return Matrix<T>::Zero(lq, d);
  }
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> q = linear_fwd(p, id.q, xq);
  Matrix<T> k = linear_fwd(p, id.k, xkv);
  Matrix<T> v = linear_fwd(p, id.v, xkv);
  Matrix<T> o = Matrix<T>::Zero(lq, d);
  if (cache) cache->probs.assign(qs.size() * static_cast<std::size_t>(heads), Matrix<T>());
  for (std::size_t seg = 0; seg < qs.size(); ++seg) {
    const Eigen::Index q0 = qs.start[seg], nq = qs.len[seg], k0 = ks.start[seg], nk = ks.len[seg];
    if (nk == 0 || nq == 0) continue;
    for (int h = 0; h < heads; ++h) {
      Matrix<T> s(nq, nk);
      s.noalias() = q.block(q0, h * dh, nq, dh) * k.block(k0, h * dh, nk, dh).transpose();
      s *= scale;
      if (causal) {
        for (Eigen::Index i = 0; i < nq; ++i)
          for (Eigen::Index j = i + 1; j < nk; ++j) s(i, j) = -std::numeric_limits<T>::infinity();
      }
      softmax_rows_inplace(s);
      o.block(q0, h * dh, nq, dh).noalias() = s * v.block(k0, h * dh, nk, dh);
      if (cache) cache->probs[seg * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = std::move(s);
    }
  }
  Matrix<T> out = linear_fwd(p, id.o, o);
  zero_unattended(out, qs, ks);
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->qs = qs;
    cache->ks = ks;
    cache->empty = false;
  }
  return out;
}

// Returns (d xq, d xkv).
template <class T>
std::pair<Matrix<T>, Matrix<T>> attention_bwd(ParameterSet<T>& p, AttnIds id, int heads, const AttnCache<T>& c,
                                              const Matrix<T>& dout) {
  if (c.empty) return {Matrix<T>::Zero(dout.rows(), dout.cols()), Matrix<T>()};
  const Eigen::Index d = c.q.cols(), dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> dy = dout;
  zero_unattended(dy, c.qs, c.ks);
  Matrix<T> d_o = linear_bwd(p, id.o, c.o, dy);
  Matrix<T> dq = Matrix<T>::Zero(c.q.rows(), d), dk = Matrix<T>::Zero(c.k.rows(), d),
            dv = Matrix<T>::Zero(c.v.rows(), d);
  for (std::size_t seg = 0; seg < c.qs.size(); ++seg) {
    const Eigen::Index q0 = c.qs.start[seg], nq = c.qs.len[seg], k0 = c.ks.start[seg], nk = c.ks.len[seg];
    if (nk == 0 || nq == 0) continue;
    for (int h = 0; h < heads; ++h) {
      const Matrix<T>& prob = c.probs[seg * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
      Matrix<T> d_oh = d_o.block(q0, h * dh, nq, dh);
      Matrix<T> dp(nq, nk);
      dp.noalias() = d_oh * c.v.block(k0, h * dh, nk, dh).transpose();
      dv.block(k0, h * dh, nk, dh).noalias() = prob.transpose() * d_oh;
      Col<T> row_dot = (dp.array() * prob.array()).rowwise().sum();
      Matrix<T> ds = (prob.array() * (dp.colwise() - row_dot).array()) * scale;
      dq.block(q0, h * dh, nq, dh).noalias() = ds * c.k.block(k0, h * dh, nk, dh);
      dk.block(k0, h * dh, nk, dh).noalias() = ds.transpose() * c.q.block(q0, h * dh, nq, dh);
    }
  }
  Matrix<T> dxq = linear_bwd(p, id.q, c.xq, dq);
  Matrix<T> dxkv = linear_bwd(p, id.k, c.xkv, dk);
  dxkv += linear_bwd(p, id.v, c.xkv, dv);
  return {std::move(dxq), std::move(dxkv)};
}

template <class T>
struct FfCache {
  Matrix<T> x, pre, hidden;
};

template <class T>
Matrix<T> ff_fwd(const ParameterSet<T>& p, FfIds id, const Matrix<T>& x, FfCache<T>* cache) {
  Matrix<T> pre = linear_fwd(p, id.in, x);
  Matrix<T> hidden = pre.cwiseMax(T(0));
  Matrix<T> y = linear_fwd(p, id.out, hidden);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return y;
}

template <class T>
Matrix<T> ff_bwd(ParameterSet<T>& p, FfIds id, const FfCache<T>& c, const Matrix<T>& dy) {
  Matrix<T> dh = linear_bwd(p, id.out, c.hidden, dy);
  dh = (c.pre.array() > T(0)).select(dh, T(0));
  return linear_bwd(p, id.in, c.x, dh);
}

template <class T>
struct EncBlockCache {
  NormCache<T> n_attn, n_ff;
  AttnCache<T> attn;
  FfCache<T> ff;
};

template <class T>
struct EncoderCache {
  std::vector<EncBlockCache<T>> blocks;
  NormCache<T> final_norm;
};

template <class T>
struct DecBlockCache {
  NormCache<T> n_self, n_src, n_aux, n_ff;
  AttnCache<T> self, src, aux;
  FfCache<T> ff;
};

template <class T>
struct DecoderCacheTrain {
  std::vector<DecBlockCache<T>> blocks;
  NormCache<T> final_norm;
  Matrix<T> states;
};

}  // namespace

// ---------------------------------------------------------------------------
// Transformer

template <class T>
Transformer<T>::Transformer(TransformerConfig config) : config_(std::move(config)) {
  config_.validate();
  build();
}

template <class T>
void Transformer<T>::build() {
  auto layout = std::make_shared<Layout>();
  const auto& c = config_;
  auto& p = params_;
  layout->embedding = p.add("embedding", c.vocab_size, c.model_dim, 0, ParamKind::embedding);
  layout->encoder = add_encoder(p, "encoder", c);
  layout->enc_final = add_norm(p, "encoder.final", c.model_dim, 0);
  if (c.dual_encoder) {
    layout->encoder_aux = add_encoder(p, "encoder_aux", c);
    layout->enc_aux_final = add_norm(p, "encoder_aux.final", c.model_dim, 0);
  }
  for (int i = 1; i <= c.depth; ++i) {
    std::string n = "decoder." + std::to_string(i);
    DecBlock b;
    b.ln_self = add_norm(p, n + ".ln_self", c.model_dim, i);
    b.self = add_attention(p, n + ".self", c.model_dim, i);
    b.ln_src = add_norm(p, n + ".ln_src", c.model_dim, i);
    b.src = add_attention(p, n + ".src", c.model_dim, i);
    if (c.dual_encoder) {
      b.ln_aux = add_norm(p, n + ".ln_aux", c.model_dim, i);
      b.aux = add_attention(p, n + ".aux", c.model_dim, i);
    }
    b.ln_ff = add_norm(p, n + ".ln_ff", c.model_dim, i);
    b.ff = add_ff(p, n + ".ff", c.model_dim, c.ff_dim, i);
    layout->decoder.push_back(b);
  }
  layout->dec_final = add_norm(p, "decoder.final", c.model_dim, 0);
  layout->output = add_linear(p, "output", c.model_dim, c.vocab_size, 0, ParamKind::output);
  if (c.tie_mlm_head) {
    layout->mlm.b = p.add("mlm.b", 1, c.vocab_size, 0, ParamKind::bias);
  } else {
    layout->mlm = add_linear(p, "mlm", c.model_dim, c.vocab_size, 0, ParamKind::output);
  }
  layout_ = std::move(layout);

  positions_.resize(c.max_len, c.model_dim);
  for (int pos = 0; pos < c.max_len; ++pos) {
    for (int i = 0; i < c.model_dim; i += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(i) / c.model_dim);
      positions_(pos, i) = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < c.model_dim) positions_(pos, i + 1) = static_cast<T>(std::cos(pos * freq));
    }
  }
  for (int i = 0; i < p.size(); ++i)
    if (p.info(i).kind == ParamKind::norm_gain) p.value(i).setOnes();
}

template <class T>
void Transformer<T>::init(std::uint64_t seed) {
  Rng rng(seed);
  for (int i = 0; i < params_.size(); ++i) {
    const auto& info = params_.info(i);
    Matrix<T>& v = params_.value(i);
    double bound = 0.0;
    switch (info.kind) {
      case ParamKind::residual_weight:
        bound = glorot_bound(info.rows, info.cols) * block_multiplier(config_.init_scaling, info.block, config_.depth);
        break;
      case ParamKind::embedding:
      case ParamKind::output:
        bound = glorot_bound(info.rows, info.cols);
        break;
      case ParamKind::norm_gain:
        v.setOnes();
        continue;
      case ParamKind::bias:
      case ParamKind::norm_bias:
        v.setZero();
        continue;
    }
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c) v(r, c) = static_cast<T>(dist(rng));
  }
  params_.zero_grad();
}

template <class T>
void Transformer<T>::check_length(std::size_t n, const char* what) const {
  if (n > static_cast<std::size_t>(config_.max_len))
    throw SequenceTooLong(std::string(what) + " length " + std::to_string(n) + " exceeds max_len " +
                          std::to_string(config_.max_len));
}

namespace {

template <class T>
Matrix<T> embed(const ParameterSet<T>& p, int embedding, const Matrix<T>& positions, std::span<const TokenId> ids,
                int offset = 0) {
  const Matrix<T>& e = p.value(embedding);
  const T scale = std::sqrt(static_cast<T>(e.cols()));
  Matrix<T> x(static_cast<Eigen::Index>(ids.size()), e.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto id = ids[i];
    if (id < 0 || id >= e.rows()) throw IdOutOfRange("token id " + std::to_string(id) + " outside embedding");
    x.row(static_cast<Eigen::Index>(i)) = e.row(id) * scale + positions.row(offset + static_cast<Eigen::Index>(i));
  }
  return x;
}

template <class T>
void embed_bwd(ParameterSet<T>& p, int embedding, std::span<const TokenId> ids, const Matrix<T>& dx) {
  Matrix<T>& g = p.grad(embedding);
  const T scale = std::sqrt(static_cast<T>(g.cols()));
  for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += dx.row(static_cast<Eigen::Index>(i)) * scale;
}

// Embeds each sequence from position 0 and stacks the results.
template <class T>
Matrix<T> embed_all(const ParameterSet<T>& p, int embedding, const Matrix<T>& positions,
                    const std::vector<std::span<const TokenId>>& seqs, Segments& segs) {
  for (auto seq : seqs) segs.push(static_cast<Eigen::Index>(seq.size()));
  Matrix<T> x(segs.rows(), p.value(embedding).cols());
  for (std::size_t i = 0; i < seqs.size(); ++i)
    if (segs.len[i] > 0) x.middleRows(segs.start[i], segs.len[i]) = embed(p, embedding, positions, seqs[i]);
  return x;
}

template <class T>
void embed_all_bwd(ParameterSet<T>& p, int embedding, const std::vector<std::span<const TokenId>>& seqs,
                   const Segments& segs, const Matrix<T>& dx) {
  for (std::size_t i = 0; i < seqs.size(); ++i)
    if (segs.len[i] > 0) embed_bwd(p, embedding, seqs[i], Matrix<T>(dx.middleRows(segs.start[i], segs.len[i])));
}

template <class T>
Matrix<T> encoder_fwd(const ParameterSet<T>& p, const std::vector<EncBlock>& blocks, NormIds final_norm, int heads,
                      Matrix<T> x, const Segments& segs, EncoderCache<T>* cache) {
  if (cache) cache->blocks.resize(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    auto* bc = cache ? &cache->blocks[l] : nullptr;
    Matrix<T> h = norm_fwd(p, b.ln_attn, x, bc ? &bc->n_attn : nullptr);
    x += attention_fwd(p, b.attn, heads, h, segs, h, segs, false, bc ? &bc->attn : nullptr);
    h = norm_fwd(p, b.ln_ff, x, bc ? &bc->n_ff : nullptr);
    x += ff_fwd(p, b.ff, h, bc ? &bc->ff : nullptr);
  }
  return norm_fwd(p, final_norm, x, cache ? &cache->final_norm : nullptr);
}

template <class T>
Matrix<T> encoder_bwd(ParameterSet<T>& p, const std::vector<EncBlock>& blocks, NormIds final_norm, int heads,
                      const EncoderCache<T>& cache, const Matrix<T>& dout) {
  Matrix<T> dx = norm_bwd(p, final_norm, cache.final_norm, dout);
  for (std::size_t l = blocks.size(); l-- > 0;) {
    const auto& b = blocks[l];
    const auto& bc = cache.blocks[l];
    Matrix<T> dh = ff_bwd(p, b.ff, bc.ff, dx);
    dx += norm_bwd(p, b.ln_ff, bc.n_ff, dh);
    auto [dq, dkv] = attention_bwd(p, b.attn, heads, bc.attn, dx);
    dq += dkv;
    dx += norm_bwd(p, b.ln_attn, bc.n_attn, dq);
  }
  return dx;
}

// Sum of -log softmax(logits)[target] over rows; writes (softmax - onehot) * scale into dlogits.
template <class T>
double softmax_xent(const Matrix<T>& logits, std::span<const TokenId> targets, Matrix<T>* dlogits, T scale) {
  double nll = 0.0;
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    T m = logits.row(r).maxCoeff();
    Eigen::Array<T, 1, Eigen::Dynamic> shifted = logits.row(r).array() - m;
    T lse = std::log(shifted.exp().sum());
    auto t = targets[static_cast<std::size_t>(r)];
    nll -= static_cast<double>(shifted(t) - lse);
    if (dlogits) {
      dlogits->row(r) = (shifted - lse).exp() * scale;
      (*dlogits)(r, t) -= scale;
    }
  }
  return nll;
}

}  // namespace

template <class T>
double Transformer<T>::translation_nll(const Example& ex, bool with_grad, T grad_scale) {
  return translation_nll(std::span<const Example>(&ex, 1), with_grad, grad_scale);
}

template <class T>
double Transformer<T>::translation_nll(std::span<const Example> batch, bool with_grad, T grad_scale) {
  const auto& L = *layout_;
  const int heads = config_.heads;
  const bool dual = config_.dual_encoder;
  if (batch.empty()) return 0.0;

  std::vector<TokenIds> dec_in;
  TokenIds targets;
  std::vector<std::span<const TokenId>> src_seqs, aux_seqs, dec_seqs;
  for (const auto& ex : batch) {
    check_length(ex.src.size(), "source");
    check_length(ex.tgt.size() + 1, "target");
    check_length(ex.aux.size(), "first-pass");
    if (ex.src.empty()) throw EmptySentence("translation_nll: empty source");
    auto& in = dec_in.emplace_back(TokenIds{special::kEos});
    in.insert(in.end(), ex.tgt.begin(), ex.tgt.end());
    targets.insert(targets.end(), ex.tgt.begin(), ex.tgt.end());
    targets.push_back(special::kEos);
    src_seqs.emplace_back(ex.src);
    aux_seqs.emplace_back(ex.aux);
  }
  for (const auto& in : dec_in) dec_seqs.emplace_back(in);

  Segments src_seg, aux_seg, dec_seg;
  EncoderCache<T> enc_cache, aux_cache;
  Matrix<T> enc = encoder_fwd(params_, L.encoder, L.enc_final, heads,
                              embed_all(params_, L.embedding, positions_, src_seqs, src_seg), src_seg,
                              with_grad ? &enc_cache : nullptr);
  Matrix<T> aux;
  if (dual) {
    aux = embed_all(params_, L.embedding, positions_, aux_seqs, aux_seg);
    if (aux.rows() > 0)
      aux = encoder_fwd(params_, L.encoder_aux, L.enc_aux_final, heads, std::move(aux), aux_seg,
                        with_grad ? &aux_cache : nullptr);
  }

  DecoderCacheTrain<T> dc;
  dc.blocks.resize(L.decoder.size());
  Matrix<T> x = embed_all(params_, L.embedding, positions_, dec_seqs, dec_seg);
  for (std::size_t l = 0; l < L.decoder.size(); ++l) {
    const auto& b = L.decoder[l];
    auto* bc = with_grad ? &dc.blocks[l] : nullptr;
    Matrix<T> h = norm_fwd(params_, b.ln_self, x, bc ? &bc->n_self : nullptr);
    x += attention_fwd(params_, b.self, heads, h, dec_seg, h, dec_seg, true, bc ? &bc->self : nullptr);
    h = norm_fwd(params_, b.ln_src, x, bc ? &bc->n_src : nullptr);
    x += attention_fwd(params_, b.src, heads, h, dec_seg, enc, src_seg, false, bc ? &bc->src : nullptr);
    if (dual) {
      h = norm_fwd(params_, b.ln_aux, x, bc ? &bc->n_aux : nullptr);
      x += attention_fwd(params_, b.aux, heads, h, dec_seg, aux, aux_seg, false, bc ? &bc->aux : nullptr);
    }
    h = norm_fwd(params_, b.ln_ff, x, bc ? &bc->n_ff : nullptr);
    x += ff_fwd(params_, b.ff, h, bc ? &bc->ff : nullptr);
  }
  Matrix<T> states = norm_fwd(params_, L.dec_final, x, with_grad ? &dc.final_norm : nullptr);
  Matrix<T> logits = linear_fwd(params_, L.output, states);
  Matrix<T> dlogits;
  double nll = softmax_xent(logits, targets, with_grad ? &dlogits : nullptr, grad_scale);
  if (!with_grad) return nll;

  Matrix<T> dx = norm_bwd(params_, L.dec_final, dc.final_norm, linear_bwd(params_, L.output, states, dlogits));
  Matrix<T> denc = Matrix<T>::Zero(enc.rows(), enc.cols());
  Matrix<T> daux = Matrix<T>::Zero(aux.rows(), config_.model_dim);
  for (std::size_t l = L.decoder.size(); l-- > 0;) {
    const auto& b = L.decoder[l];
    const auto& bc = dc.blocks[l];
    Matrix<T> dh = ff_bwd(params_, b.ff, bc.ff, dx);
    dx += norm_bwd(params_, b.ln_ff, bc.n_ff, dh);
    if (dual && !bc.aux.empty) {
      auto [dq, dkv] = attention_bwd(params_, b.aux, heads, bc.aux, dx);
      daux += dkv;
      dx += norm_bwd(params_, b.ln_aux, bc.n_aux, dq);
    }
    {
      auto [dq, dkv] = attention_bwd(params_, b.src, heads, bc.src, dx);
      denc += dkv;
      dx += norm_bwd(params_, b.ln_src, bc.n_src, dq);
    }
    auto [dq, dkv] = attention_bwd(params_, b.self, heads, bc.self, dx);
    dq += dkv;
    dx += norm_bwd(params_, b.ln_self, bc.n_self, dq);
  }
  embed_all_bwd(params_, L.embedding, dec_seqs, dec_seg, dx);
  Matrix<T> dsrc = encoder_bwd(params_, L.encoder, L.enc_final, heads, enc_cache, denc);
  embed_all_bwd(params_, L.embedding, src_seqs, src_seg, dsrc);
  if (dual && aux.rows() > 0) {
    Matrix<T> dfp = encoder_bwd(params_, L.encoder_aux, L.enc_aux_final, heads, aux_cache, daux);
    embed_all_bwd(params_, L.embedding, aux_seqs, aux_seg, dfp);
  }
  return nll;
}

template <class T>
double Transformer<T>::translation_nll(const Example& ex) const {
  return const_cast<Transformer<T>*>(this)->translation_nll(ex, false, T(1));
}

template <class T>
Matrix<T> Transformer<T>::logits(const Example& ex) const {
  const auto& L = *layout_;
  const int heads = config_.heads;
  check_length(ex.src.size(), "source");
  check_length(ex.tgt.size() + 1, "target");
  const Segments src_seg = whole(static_cast<Eigen::Index>(ex.src.size()));
  const Segments aux_seg = whole(static_cast<Eigen::Index>(ex.aux.size()));
  const Segments dec_seg = whole(static_cast<Eigen::Index>(ex.tgt.size() + 1));
  Matrix<T> enc = encoder_fwd<T>(params_, L.encoder, L.enc_final, heads,
                                 embed(params_, L.embedding, positions_, ex.src), src_seg, nullptr);
  Matrix<T> aux(0, config_.model_dim);
  if (config_.dual_encoder && !ex.aux.empty())
    aux = encoder_fwd<T>(params_, L.encoder_aux, L.enc_aux_final, heads,
                         embed(params_, L.embedding, positions_, ex.aux), aux_seg, nullptr);
  TokenIds dec_in{special::kEos};
  dec_in.insert(dec_in.end(), ex.tgt.begin(), ex.tgt.end());
  Matrix<T> x = embed(params_, L.embedding, positions_, dec_in);
  for (const auto& b : L.decoder) {
    Matrix<T> h = norm_fwd<T>(params_, b.ln_self, x, nullptr);
    x += attention_fwd<T>(params_, b.self, heads, h, dec_seg, h, dec_seg, true, nullptr);
    h = norm_fwd<T>(params_, b.ln_src, x, nullptr);
    x += attention_fwd<T>(params_, b.src, heads, h, dec_seg, enc, src_seg, false, nullptr);
    if (config_.dual_encoder) {
      h = norm_fwd<T>(params_, b.ln_aux, x, nullptr);
      x += attention_fwd<T>(params_, b.aux, heads, h, dec_seg, aux, aux_seg, false, nullptr);
    }
    h = norm_fwd<T>(params_, b.ln_ff, x, nullptr);
    x += ff_fwd<T>(params_, b.ff, h, nullptr);
  }
  return linear_fwd(params_, L.output, norm_fwd<T>(params_, L.dec_final, x, nullptr));
}

template <class T>
std::vector<int> Transformer<T>::choose_mask_positions(int n, Rng& rng) const {
  if (n <= 0) return {};
  int k = static_cast<int>(std::ceil(config_.mask_rate * n - 1e-9));
  k = std::clamp(k, 1, n);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

template <class T>
Matrix<T> mlm_head_fwd(const ParameterSet<T>& p, int embedding, LinearIds head, bool tied, const Matrix<T>& h) {
  if (!tied) return linear_fwd(p, head, h);
  Matrix<T> y(h.rows(), p.value(embedding).rows());
  y.noalias() = h * p.value(embedding).transpose();
  y.rowwise() += p.value(head.b).row(0);
  return y;
}

}  // namespace

template <class T>
Matrix<T> Transformer<T>::mlm_logits(const TokenIds& ids) const {
  const auto& L = *layout_;
  check_length(ids.size(), "masked-LM input");
  Matrix<T> enc = encoder_fwd<T>(params_, L.encoder, L.enc_final, config_.heads,
                                 embed(params_, L.embedding, positions_, ids),
                                 whole(static_cast<Eigen::Index>(ids.size())), nullptr);
  return mlm_head_fwd(params_, L.embedding, L.mlm, config_.tie_mlm_head, enc);
}

template <class T>
double Transformer<T>::masked_lm_nll(const TokenIds& ids, std::span<const int> positions, Rng& rng, bool with_grad,
                                     T grad_scale) {
  const auto& L = *layout_;
  check_length(ids.size(), "masked-LM input");
  if (positions.empty()) return 0.0;
  TokenIds input = ids;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<TokenId> any_token(special::kCount, config_.vocab_size - 1);
  for (int pos : positions) {
    auto& slot = input[static_cast<std::size_t>(pos)];
    if (!config_.bert_mask_split) {
      slot = special::kMask;
      continue;
    }
    double r = coin(rng);
    if (r < 0.8) slot = special::kMask;
    else if (r < 0.9) slot = any_token(rng);
  }
  EncoderCache<T> cache;
  Matrix<T> enc = encoder_fwd(params_, L.encoder, L.enc_final, config_.heads,
                              embed(params_, L.embedding, positions_, input),
                              whole(static_cast<Eigen::Index>(input.size())), with_grad ? &cache : nullptr);
  Matrix<T> picked(static_cast<Eigen::Index>(positions.size()), enc.cols());
  TokenIds targets;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    picked.row(static_cast<Eigen::Index>(i)) = enc.row(positions[i]);
    targets.push_back(ids[static_cast<std::size_t>(positions[i])]);
  }
  Matrix<T> logits = mlm_head_fwd(params_, L.embedding, L.mlm, config_.tie_mlm_head, picked);
  Matrix<T> dlogits;
  double nll = softmax_xent(logits, targets, with_grad ? &dlogits : nullptr, grad_scale);
  if (!with_grad) return nll;

  Matrix<T> dpicked;
  if (config_.tie_mlm_head) {
    params_.grad(L.embedding).noalias() += dlogits.transpose() * picked;
    params_.grad(L.mlm.b) += dlogits.colwise().sum();
    dpicked = dlogits * params_.value(L.embedding);
  } else {
    dpicked = linear_bwd(params_, L.mlm, picked, dlogits);
  }
  Matrix<T> denc = Matrix<T>::Zero(enc.rows(), enc.cols());
  for (std::size_t i = 0; i < positions.size(); ++i)
    denc.row(positions[i]) += dpicked.row(static_cast<Eigen::Index>(i));
  Matrix<T> dx = encoder_bwd(params_, L.encoder, L.enc_final, config_.heads, cache, denc);
  embed_bwd(params_, L.embedding, input, dx);
  return nll;
}

// ---------------------------------------------------------------------------
// Incremental decoding

template <class T>
EncodedInput<T> Transformer<T>::encode(const TokenIds& src, const TokenIds* aux) const {
  const auto& L = *layout_;
  check_length(src.size(), "source");
  EncodedInput<T> out;
  out.src_states = encoder_fwd<T>(params_, L.encoder, L.enc_final, config_.heads,
                                  embed(params_, L.embedding, positions_, src),
                                  whole(static_cast<Eigen::Index>(src.size())), nullptr);
  out.aux_states.resize(0, config_.model_dim);
  if (config_.dual_encoder && aux && !aux->empty()) {
    check_length(aux->size(), "first-pass");
    out.aux_states = encoder_fwd<T>(params_, L.encoder_aux, L.enc_aux_final, config_.heads,
                                    embed(params_, L.embedding, positions_, *aux),
                                    whole(static_cast<Eigen::Index>(aux->size())), nullptr);
  }
  for (const auto& b : L.decoder) {
    out.src_keys.push_back(linear_fwd(params_, b.src.k, out.src_states));
    out.src_values.push_back(linear_fwd(params_, b.src.v, out.src_states));
    if (config_.dual_encoder && out.aux_states.rows() > 0) {
      out.aux_keys.push_back(linear_fwd(params_, b.aux.k, out.aux_states));
      out.aux_values.push_back(linear_fwd(params_, b.aux.v, out.aux_states));
    }
  }
  return out;
}

template <class T>
DecoderCache<T> Transformer<T>::start_cache() const {
  DecoderCache<T> c;
  const Eigen::Index capacity = std::min(16, config_.max_len);
  c.keys.assign(layout_->decoder.size(), Matrix<T>(capacity, config_.model_dim));
  c.values.assign(layout_->decoder.size(), Matrix<T>(capacity, config_.model_dim));
  return c;
}

namespace {

// Single-query attention of row `q` over the first `n` rows of keys/values.
template <class T>
void attend_row(const Eigen::Ref<const Eigen::Matrix<T, 1, Eigen::Dynamic>>& q, const Matrix<T>& keys,
                const Matrix<T>& values, Eigen::Index n, int heads, Eigen::Ref<Eigen::Matrix<T, 1, Eigen::Dynamic>> out) {
  const Eigen::Index d = q.cols(), dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int h = 0; h < heads; ++h) {
    Eigen::Matrix<T, 1, Eigen::Dynamic> s =
        (q.middleCols(h * dh, dh) * keys.topRows(n).middleCols(h * dh, dh).transpose()) * scale;
    T m = s.maxCoeff();
    s = (s.array() - m).exp();
    s /= s.sum();
    out.middleCols(h * dh, dh).noalias() = s * values.topRows(n).middleCols(h * dh, dh);
  }
}

template <class T>
Matrix<T> cross_attend(const ParameterSet<T>& p, AttnIds id, int heads, const Matrix<T>& h, const Matrix<T>& keys,
                       const Matrix<T>& values) {
  Matrix<T> q = linear_fwd(p, id.q, h);
  Matrix<T> o(h.rows(), h.cols());
  for (Eigen::Index r = 0; r < h.rows(); ++r) attend_row<T>(q.row(r), keys, values, keys.rows(), heads, o.row(r));
  return linear_fwd(p, id.o, o);
}

}  // namespace

template <class T>
void Transformer<T>::decode_step(const EncodedInput<T>& input, std::vector<DecoderCache<T>>& caches,
                                 std::span<const TokenId> tokens, Matrix<T>& log_probs) const {
  const auto& L = *layout_;
  const auto hyps = static_cast<Eigen::Index>(tokens.size());
  if (caches.size() != tokens.size()) throw Error("decode_step: one cache per hypothesis required");
  const Matrix<T>& e = params_.value(L.embedding);
  const T scale = std::sqrt(static_cast<T>(config_.model_dim));
  Matrix<T> x(hyps, config_.model_dim);
  for (Eigen::Index h = 0; h < hyps; ++h) {
    const auto& c = caches[static_cast<std::size_t>(h)];
    check_length(static_cast<std::size_t>(c.length) + 1, "decoder");
    x.row(h) = e.row(tokens[static_cast<std::size_t>(h)]) * scale + positions_.row(c.length);
  }
  const bool use_aux = config_.dual_encoder && input.aux_states.rows() > 0;
  for (std::size_t l = 0; l < L.decoder.size(); ++l) {
    const auto& b = L.decoder[l];
    Matrix<T> hn = norm_fwd<T>(params_, b.ln_self, x, nullptr);
    Matrix<T> q = linear_fwd(params_, b.self.q, hn);
    Matrix<T> k = linear_fwd(params_, b.self.k, hn);
    Matrix<T> v = linear_fwd(params_, b.self.v, hn);
    Matrix<T> o(hyps, config_.model_dim);
    for (Eigen::Index h = 0; h < hyps; ++h) {
      auto& c = caches[static_cast<std::size_t>(h)];
      auto& kc = c.keys[l];
      auto& vc = c.values[l];
      if (c.length >= kc.rows()) {
        kc.conservativeResize(kc.rows() * 2, Eigen::NoChange);
        vc.conservativeResize(vc.rows() * 2, Eigen::NoChange);
      }
      kc.row(c.length) = k.row(h);
      vc.row(c.length) = v.row(h);
      attend_row<T>(q.row(h), kc, vc, c.length + 1, config_.heads, o.row(h));
    }
    x += linear_fwd(params_, b.self.o, o);
    hn = norm_fwd<T>(params_, b.ln_src, x, nullptr);
    x += cross_attend(params_, b.src, config_.heads, hn, input.src_keys[l], input.src_values[l]);
    if (use_aux) {
      hn = norm_fwd<T>(params_, b.ln_aux, x, nullptr);
      x += cross_attend(params_, b.aux, config_.heads, hn, input.aux_keys[l], input.aux_values[l]);
    }
    hn = norm_fwd<T>(params_, b.ln_ff, x, nullptr);
    x += ff_fwd<T>(params_, b.ff, hn, nullptr);
  }
  for (auto& c : caches) ++c.length;
  log_probs = log_softmax_rows<T>(linear_fwd(params_, L.output, norm_fwd<T>(params_, L.dec_final, x, nullptr)));
}

template <class T>
int Transformer<T>::copy_matching(const Transformer<T>& other) {
  int copied = 0;
  for (int i = 0; i < params_.size(); ++i) {
    int j = other.params().find(params_.info(i).name);
    if (j < 0) continue;
    if (other.params().value(j).rows() != params_.value(i).rows() ||
        other.params().value(j).cols() != params_.value(i).cols())
      continue;
    params_.value(i) = other.params().value(j);
    ++copied;
  }
  return copied;
}

template <class T>
Matrix<T> log_softmax_rows(const Matrix<T>& logits) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    T m = logits.row(r).maxCoeff();
    Eigen::Array<T, 1, Eigen::Dynamic> shifted = logits.row(r).array() - m;
    T lse = std::log(shifted.exp().sum());
    out.row(r) = shifted - lse;
  }
  return out;
}

template <class T>
double masked_cross_entropy(const Matrix<T>& logits, std::span<const TokenId> targets,
                            std::span<const int> positions) {
  Matrix<T> rows(static_cast<Eigen::Index>(positions.size()), logits.cols());
  TokenIds picked;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = logits.row(positions[i]);
    picked.push_back(targets[static_cast<std::size_t>(positions[i])]);
  }
  return softmax_xent<T>(rows, picked, nullptr, T(1));
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Transformer<float>;
template class Transformer<double>;
template Matrix<float> log_softmax_rows(const Matrix<float>&);
template Matrix<double> log_softmax_rows(const Matrix<double>&);
template double masked_cross_entropy(const Matrix<float>&, std::span<const TokenId>, std::span<const int>);
template double masked_cross_entropy(const Matrix<double>&, std::span<const TokenId>, std::span<const int>);

}  // namespace docnmt
