// Finite-difference checks of every differentiable op, built against the
// double-precision library so the 1e-5 relative bound is meaningful.

#include <functional>

#include <gtest/gtest.h>

#include "itsr/fusion.hpp"
#include "itsr/heads.hpp"
#include "itsr/ops.hpp"
#include "oracles.hpp"

using namespace itsr;

static_assert(sizeof(Real) == 8, "gradient tests need the double build");

namespace {

constexpr double kTolerance = 1e-5;
constexpr double kStep = 1e-6;

Tensor leaf(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad();
  return t;
}

// sum(out * W) with a fixed random W.
Tensor probe(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> w(out.numel());
  for (auto& x : w) x = rng.uniform(-1, 1);
  return sum(mul(out, Tensor(out.shape(), std::move(w))));
}

// Worst norm-wise relative error over the inputs.
double check(const std::vector<Tensor>& inputs, const std::function<Tensor()>& loss) {
  for (auto t : inputs) t.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss());
  }
  NoGradScope off;
  double worst = 0;
  for (auto t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0), numeric(t.numel());
    for (std::size_t i = 0; i < t.grad().size(); ++i) analytic[i] = t.grad()[i];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const Real keep = t[i];
      t[i] = keep + kStep;
      const double up = loss().item();
      t[i] = keep - kStep;
      const double down = loss().item();
      t[i] = keep;
      numeric[i] = (up - down) / (2 * kStep);
    }
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
  }
  return worst;
}

class OpGradient : public ::testing::TestWithParam<std::uint64_t> {
 protected:
  Rng rng{GetParam()};
  std::uint64_t seed() const { return GetParam() * 7919 + 1; }
};

}  // namespace

TEST_P(OpGradient, Matmul) {
  Tensor a = leaf({3, 4}, rng), b = leaf({4, 5}, rng);
  EXPECT_LE(check({a, b}, [&] { return probe(matmul(a, b), seed()); }), kTolerance);
}

TEST_P(OpGradient, Transpose) {
  Tensor a = leaf({3, 4}, rng);
  EXPECT_LE(check({a}, [&] { return probe(transpose(a), seed()); }), kTolerance);
}

TEST_P(OpGradient, AddSubMul) {
  Tensor a = leaf({2, 3}, rng), b = leaf({2, 3}, rng);
  EXPECT_LE(check({a, b}, [&] { return probe(mul(add(a, b), sub(a, b)), seed()); }), kTolerance);
}

TEST_P(OpGradient, AddBiasScaleMulScalar) {
  Tensor x = leaf({3, 4}, rng), b = leaf({4}, rng), s = leaf({1}, rng);
  EXPECT_LE(check({x, b, s},
                  [&] { return probe(mul_scalar(scale(add_bias(x, b), -1.5), s), seed()); }),
            kTolerance);
}

TEST_P(OpGradient, ExpTanh) {
  Tensor x = leaf({2, 5}, rng);
  EXPECT_LE(check({x}, [&] { return probe(tanh(exp(x)), seed()); }), kTolerance);
}

TEST_P(OpGradient, ReluAwayFromTheKink) {
  Tensor x = leaf({4, 4}, rng);
  for (auto& v : x.data()) v += v >= 0 ? 0.05 : -0.05;
  EXPECT_LE(check({x}, [&] { return probe(relu(x), seed()); }), kTolerance);
}

TEST_P(OpGradient, Dropout) {
  Tensor x = leaf({5, 4}, rng);
  EXPECT_LE(check({x},
                  [&] {
                    Rng mask(seed());
                    return probe(dropout(x, 0.4, mask, Mode::Train), seed());
                  }),
            kTolerance);
}

TEST_P(OpGradient, SumMean) {
  Tensor x = leaf({3, 3}, rng);
  EXPECT_LE(check({x}, [&] { return add(sum(mul(x, x)), mean(exp(x))); }), kTolerance);
}

TEST_P(OpGradient, SoftmaxRows) {
  Tensor x = leaf({3, 6}, rng, -3, 3);
  EXPECT_LE(check({x}, [&] { return probe(softmax_rows(x), seed()); }), kTolerance);
}

TEST_P(OpGradient, LayerNorm) {
  Tensor x = leaf({4, 5}, rng, -2, 2), g = leaf({5}, rng), b = leaf({5}, rng);
  EXPECT_LE(check({x, g, b}, [&] { return probe(layer_norm(x, g, b), seed()); }), kTolerance);
}

TEST_P(OpGradient, BatchNormTrain) {
  Tensor x = leaf({8, 3}, rng, -2, 2);
  BatchNorm bn(3);
  bn.gamma = leaf({3}, rng, 0.5, 1.5);
  bn.beta = leaf({3}, rng);
  EXPECT_LE(check({x, bn.gamma, bn.beta},
                  [&] { return probe(batch_norm(x, bn, Mode::Train), seed()); }),
            kTolerance);
}

TEST_P(OpGradient, Conv1dTokens) {
  Tensor x = leaf({3 * 4, 2}, rng), k = leaf({3, 2, 3}, rng);
  EXPECT_LE(check({x, k}, [&] { return probe(conv1d_tokens(x, k, 1, 4), seed()); }), kTolerance);
}

TEST_P(OpGradient, ConcatStackReshape) {
  Tensor a = leaf({2, 3}, rng), b = leaf({2, 2}, rng), r = leaf({5}, rng);
  EXPECT_LE(check({a, b, r},
                  [&] {
                    const std::vector<Tensor> rows{r, scale(r, 2)};
                    return add(probe(reshape(concat_cols(a, b), {5, 2}), seed()),
                               probe(stack_rows(rows), seed() + 1));
                  }),
            kTolerance);
}

TEST_P(OpGradient, PoolingSegmentsGather) {
  Tensor x = leaf({6, 3}, rng);
  const std::vector<std::size_t> offsets{0, 2, 3, 6}, idx{5, 1, 1, 0};
  EXPECT_LE(check({x},
                  [&] {
                    return add(add(probe(mean_pool_tokens(x, 3), seed()),
                                   probe(segment_mean(x, offsets), seed() + 1)),
                               probe(gather_rows(x, idx), seed() + 2));
                  }),
            kTolerance);
}

TEST_P(OpGradient, L2NormalizeRows) {
  Tensor x = leaf({4, 5}, rng);
  EXPECT_LE(check({x}, [&] { return probe(l2_normalize_rows(x), seed()); }), kTolerance);
}

TEST_P(OpGradient, DiagonalCrossEntropy) {
  Tensor s = leaf({5, 5}, rng, -3, 3);
  EXPECT_LE(check({s}, [&] { return diagonal_cross_entropy(s); }), kTolerance);
}

TEST_P(OpGradient, CrossAttention) {
  Tensor q = leaf({3, 4}, rng), k = leaf({5, 4}, rng), v = leaf({5, 4}, rng);
  EXPECT_LE(check({q, k, v}, [&] { return probe(cross_attention(q, k, v), seed()); }),
            kTolerance);
}

TEST_P(OpGradient, BlockCrossAttention) {
  Tensor q = leaf({2 * 3, 6}, rng), k = leaf({2 * 4, 6}, rng), v = leaf({2 * 4, 6}, rng);
  EXPECT_LE(check({q, k, v},
                  [&] { return probe(block_cross_attention(q, k, v, 3, 3, 4), seed()); }),
            kTolerance);
}

TEST_P(OpGradient, ContrastiveLossIncludingKappa) {
  Tensor fx = leaf({4, 6}, rng), fy = leaf({4, 6}, rng), kappa = leaf({1}, rng, -1, 2);
  EXPECT_LE(check({fx, fy, kappa}, [&] { return contrastive_loss(fx, fy, kappa).total; }),
            kTolerance);
}

TEST_P(OpGradient, TffFuseEndToEnd) {
  FusionConfig cfg;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.stages = 2;
  Rng init(seed());
  TffParams params(cfg, init);
  ParamCollector collected;
  params.collect("fusion", collected);
  std::vector<Tensor> inputs;
  for (const auto& p : collected.params) inputs.push_back(p.tensor);
  Tensor p1 = leaf({3 * 4, 8}, rng), p2 = leaf({3 * 4, 8}, rng);
  inputs.push_back(p1);
  inputs.push_back(p2);
  EXPECT_LE(check(inputs,
                  [&] {
                    Rng drop(seed());
                    return probe(tff_fuse(p1, p2, params, 4, drop, Mode::Train), seed());
                  }),
            kTolerance);
}

INSTANTIATE_TEST_SUITE_P(RandomInstances, OpGradient, ::testing::Values(1, 2, 3, 4, 5));
