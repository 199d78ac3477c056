#include "docnmt/transformer.h"

#include <cmath>

#include <gtest/gtest.h>

#include "docnmt/error.h"

namespace docnmt {
namespace {

TransformerConfig tiny_config() {
  TransformerConfig c;
  c.depth = 2;
  c.model_dim = 8;
  c.ff_dim = 12;
  c.heads = 2;
  c.max_len = 32;
  c.vocab_size = 20;
  return c;
}

Example sample_example() { return {{9, 10, 11, 12, 13}, {14, 15, 16}, {}}; }

// Central differences on every parameter entry (subsampled for large tensors).
template <class Loss>
void expect_gradients_match(Transformer<double>& model, Loss loss) {
  model.params().zero_grad();
  loss(true);
  auto& p = model.params();
  const double h = 1e-5;
  for (int i = 0; i < p.size(); ++i) {
    auto& v = p.value(i);
    const Eigen::Index n = v.size();
    const Eigen::Index stride = std::max<Eigen::Index>(1, n / 12);
    for (Eigen::Index k = 0; k < n; k += stride) {
      double* x = v.data() + k;
      const double saved = *x;
      *x = saved + h;
      double up = loss(false);
      *x = saved - h;
      double down = loss(false);
      *x = saved;
      double numeric = (up - down) / (2 * h);
      double analytic = p.grad(i).data()[k];
      double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      EXPECT_LT(std::abs(numeric - analytic) / denom, 1e-3)
          << p.info(i).name << "[" << k << "] numeric " << numeric << " analytic " << analytic;
    }
  }
}

TEST(Transformer, TranslationGradientMatchesFiniteDifferences) {
  Transformer<double> model(tiny_config());
  model.init(3);
  Example ex = sample_example();
  expect_gradients_match(model, [&](bool grad) { return model.translation_nll(ex, grad, 1.0); });
}

TEST(Transformer, DualEncoderGradientMatchesFiniteDifferences) {
  auto c = tiny_config();
  c.dual_encoder = true;
  Transformer<double> model(c);
  model.init(4);
  Example ex = sample_example();
  ex.aux = {15, 14, 17, 18};
  expect_gradients_match(model, [&](bool grad) { return model.translation_nll(ex, grad, 1.0); });
}

TEST(Transformer, MaskedLmGradientMatchesFiniteDifferences) {
  for (bool tied : {false, true}) {
    auto c = tiny_config();
    c.tie_mlm_head = tied;
    c.bert_mask_split = true;
    Transformer<double> model(c);
    model.init(5);
    TokenIds ids = {9, 10, 11, 12, 13, 14, 15, 16};
    std::vector<int> positions = {1, 4, 6};
    expect_gradients_match(model, [&](bool grad) {
      Rng rng(11);
      return model.masked_lm_nll(ids, positions, rng, grad, 1.0);
    });
  }
}

std::vector<Example> mixed_batch() {
  return {{{9, 10, 11, 12, 13}, {14, 15, 16}, {15, 14, 17, 18}},
          {{12}, {}, {}},
          {{13, 9, 9, 17, 18, 10, 11}, {16, 16, 19, 9, 14}, {19}}};
}

TEST(Transformer, StackedBatchEqualsSumOfExamples) {
  for (bool dual : {false, true}) {
    auto c = tiny_config();
    c.dual_encoder = dual;
    Transformer<double> model(c);
    model.init(12);
    auto batch = mixed_batch();
    auto& p = model.params();

    p.zero_grad();
    double separate = 0.0;
    for (const auto& ex : batch) separate += model.translation_nll(ex, true, 0.5);
    std::vector<Matrix<double>> expected;
    for (int i = 0; i < p.size(); ++i) expected.push_back(p.grad(i));

    p.zero_grad();
    double stacked = model.translation_nll(std::span<const Example>(batch), true, 0.5);
    EXPECT_NEAR(stacked, separate, 1e-10);
    for (int i = 0; i < p.size(); ++i)
      EXPECT_LT((p.grad(i) - expected[static_cast<std::size_t>(i)]).cwiseAbs().maxCoeff(), 1e-12) << p.info(i).name;
  }
}

TEST(Transformer, StackedBatchGradientMatchesFiniteDifferences) {
  auto c = tiny_config();
  c.dual_encoder = true;
  Transformer<double> model(c);
  model.init(13);
  auto batch = mixed_batch();
  expect_gradients_match(model,
                         [&](bool grad) { return model.translation_nll(std::span<const Example>(batch), grad, 1.0); });
}

TEST(Transformer, GradScaleIsLinear) {
  Transformer<double> model(tiny_config());
  model.init(6);
  Example ex = sample_example();
  model.translation_nll(ex, true, 1.0);
  Matrix<double> g1 = model.params().grad(0);
  model.params().zero_grad();
  model.translation_nll(ex, true, 0.25);
  EXPECT_LT((model.params().grad(0) * 4.0 - g1).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Transformer, IncrementalDecodingMatchesTeacherForcing) {
  auto c = tiny_config();
  c.dual_encoder = true;
  Transformer<double> model(c);
  model.init(7);
  Example ex = sample_example();
  ex.aux = {17, 18};
  Matrix<double> full = log_softmax_rows(model.logits(ex));
  auto input = model.encode(ex.src, &ex.aux);
  std::vector<DecoderCache<double>> caches = {model.start_cache()};
  TokenIds fed = {special::kEos};
  fed.insert(fed.end(), ex.tgt.begin(), ex.tgt.end());
  Matrix<double> step;
  for (std::size_t t = 0; t < fed.size(); ++t) {
    model.decode_step(input, caches, std::span<const TokenId>(&fed[t], 1), step);
    EXPECT_LT((step.row(0) - full.row(static_cast<Eigen::Index>(t))).cwiseAbs().maxCoeff(), 1e-10) << t;
  }
}

TEST(Transformer, DualEncoderWithEmptyAuxMatchesSingleEncoder) {
  Transformer<double> single(tiny_config());
  single.init(8);
  auto c = tiny_config();
  c.dual_encoder = true;
  Transformer<double> dual(c);
  dual.init(9);
  dual.copy_matching(single);
  Example ex = sample_example();
  EXPECT_NEAR(single.translation_nll(ex), dual.translation_nll(ex), 1e-10);
}

TEST(Transformer, InitStdFollowsScaling) {
  auto c = tiny_config();
  c.depth = 4;
  c.model_dim = 64;
  c.ff_dim = 256;
  c.heads = 4;
  for (auto scaling : {InitScaling::per_layer, InitScaling::per_depth, InitScaling::none}) {
    c.init_scaling = scaling;
    Transformer<double> model(c);
    model.init(10);
    const auto& p = model.params();
    for (int i = 0; i < p.size(); ++i) {
      const auto& info = p.info(i);
      if (info.kind != ParamKind::residual_weight) continue;
      double expected = std::sqrt(6.0 / (info.rows + info.cols)) / std::sqrt(3.0);
      if (scaling == InitScaling::per_layer) expected /= std::sqrt(static_cast<double>(info.block));
      if (scaling == InitScaling::per_depth) expected /= std::sqrt(static_cast<double>(c.depth));
      const auto& v = p.value(i);
      double mean = v.mean();
      double var = (v.array() - mean).square().sum() / static_cast<double>(v.size());
      EXPECT_NEAR(std::sqrt(var) / expected, 1.0, 0.05) << info.name;
    }
  }
}

TEST(Transformer, MaskPositionsCount) {
  auto c = tiny_config();
  Transformer<float> model(c);
  Rng rng(1);
  EXPECT_EQ(model.choose_mask_positions(10, rng).size(), 2u);
  EXPECT_EQ(model.choose_mask_positions(11, rng).size(), 3u);
  EXPECT_EQ(model.choose_mask_positions(1, rng).size(), 1u);
  auto pos = model.choose_mask_positions(30, rng);
  EXPECT_TRUE(std::is_sorted(pos.begin(), pos.end()));
  EXPECT_EQ(std::adjacent_find(pos.begin(), pos.end()), pos.end());
}

TEST(Transformer, RejectsOverlongInput) {
  Transformer<float> model(tiny_config());
  model.init(1);
  Example ex{TokenIds(33, 9), {10}, {}};
  EXPECT_THROW(model.translation_nll(ex), SequenceTooLong);
}

TEST(Transformer, InitIsDeterministic) {
  Transformer<float> a(tiny_config()), b(tiny_config());
  a.init(42);
  b.init(42);
  for (int i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params().value(i), b.params().value(i));
}

}  // namespace
}  // namespace docnmt
