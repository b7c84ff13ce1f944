#include <gtest/gtest.h>

#include "dman/attention.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dman;
using dman::testing::from_rows;
using dman::testing::random_matrix;
using dman::testing::weighted_sum;

namespace {

AttentionParams random_params(Rng& rng, Index d) {
  return {random_matrix(rng, d, d), random_matrix(rng, d, d), random_matrix(rng, d, d)};
}

}  // namespace

TEST(CausalMask, Shapes) {
  const BoolMatrix one = causal_mask(1, 0);
  ASSERT_EQ(one.rows(), 1);
  ASSERT_EQ(one.cols(), 1);
  EXPECT_TRUE(one(0, 0));

  const BoolMatrix tri = causal_mask(2, 0);
  EXPECT_TRUE(tri(0, 0));
  EXPECT_FALSE(tri(0, 1));
  EXPECT_TRUE(tri(1, 0));
  EXPECT_TRUE(tri(1, 1));

  const BoolMatrix ctx = causal_mask(2, 2);
  ASSERT_EQ(ctx.cols(), 4);
  for (Index t = 0; t < 2; ++t) {
    EXPECT_TRUE(ctx(t, 0));
    EXPECT_TRUE(ctx(t, 1));
  }
  EXPECT_TRUE(ctx(0, 2));
  EXPECT_FALSE(ctx(0, 3));
  EXPECT_TRUE(ctx(1, 2));
  EXPECT_TRUE(ctx(1, 3));
  EXPECT_THROW(causal_mask(0, 0), ValidationError);
}

TEST(RecurrentAttention, SingleKeyReturnsValueRow) {
  Rng rng(1);
  const AttentionParams p = random_params(rng, 3);
  Tape t;
  const Matrix x = random_matrix(rng, 1, 3);
  const Matrix out = recurrent_attention_layer(t.constant(x), Matrix(), bind(t, p)).value();
  const Matrix expected = x * p.value.transpose();
  EXPECT_LT((out - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(RecurrentAttention, ZeroQueryAveragesVisibleValues) {
  Rng rng(2);
  AttentionParams p = random_params(rng, 3);
  p.query.setZero();
  Tape t;
  const Matrix x = random_matrix(rng, 3, 3);
  const Matrix ctx = random_matrix(rng, 3, 3);
  const Matrix out = recurrent_attention_layer(t.constant(x), ctx, bind(t, p)).value();
  const Matrix vctx = ctx * p.value.transpose();
  const Matrix vx = x * p.value.transpose();
  for (Index r = 0; r < 3; ++r) {
    RowVector mean = vctx.colwise().sum();
    for (Index j = 0; j <= r; ++j) mean += vx.row(j);
    mean /= static_cast<double>(3 + r + 1);
    EXPECT_LT((out.row(r) - mean).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(RecurrentAttention, MatchesBruteForceWithContext) {
  Rng rng(3);
  for (bool scaled : {true, false}) {
    const AttentionParams p = random_params(rng, 2);
    const Matrix x = random_matrix(rng, 2, 2);
    const Matrix ctx = random_matrix(rng, 2, 2);
    Tape t;
    const Matrix got =
        recurrent_attention_layer(t.constant(x), ctx, bind(t, p), {scaled, nullptr}).value();
    oracle::Rows kv = oracle::to_rows(ctx);
    for (const auto& r : oracle::to_rows(x)) kv.push_back(r);
    const auto ref = oracle::attention(oracle::to_rows(x), kv, oracle::to_rows(p.query),
                                       oracle::to_rows(p.key), oracle::to_rows(p.value), scaled,
                                       [](std::size_t t, std::size_t j) { return j < 2 || j - 2 <= t; });
    EXPECT_LE(oracle::max_abs_diff(got, ref), 1e-10);
  }
}

TEST(RecurrentAttention, ContextShapeRejected) {
  Rng rng(4);
  const AttentionParams p = random_params(rng, 2);
  Tape t;
  EXPECT_THROW(recurrent_attention_layer(t.constant(Matrix::Zero(2, 2)), Matrix::Zero(3, 2),
                                         bind(t, p)),
               DimensionError);
}

TEST(RecurrentAttention, CountsScores) {
  Rng rng(5);
  const AttentionParams p = random_params(rng, 2);
  Tape t;
  std::size_t count = 0;
  recurrent_attention_layer(t.constant(Matrix::Zero(3, 2)), Matrix::Zero(3, 2), bind(t, p),
                            {true, &count});
  EXPECT_EQ(count, 3u * 6u);
}

TEST(LongTermAttention, SingleSlot) {
  Rng rng(6);
  const AttentionParams p = random_params(rng, 3);
  const Matrix mem = random_matrix(rng, 1, 3);
  Tape t;
  const Matrix out =
      long_term_attention_layer(t.constant(random_matrix(rng, 4, 3)), t.constant(mem), bind(t, p))
          .value();
  const RowVector v = mem * p.value.transpose();
  for (Index r = 0; r < 4; ++r) EXPECT_LT((out.row(r) - v).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(LongTermAttention, IdenticalSlotsIgnoreQuery) {
  Rng rng(7);
  const AttentionParams p = random_params(rng, 3);
  const RowVector slot = random_matrix(rng, 1, 3);
  Matrix mem(4, 3);
  for (Index r = 0; r < 4; ++r) mem.row(r) = slot;
  Tape t;
  const Matrix out =
      long_term_attention_layer(t.constant(random_matrix(rng, 3, 3)), t.constant(mem), bind(t, p))
          .value();
  for (Index r = 1; r < 3; ++r) EXPECT_LT((out.row(r) - out.row(0)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(LongTermAttention, MatchesBruteForce) {
  Rng rng(8);
  const AttentionParams p = random_params(rng, 2);
  const Matrix q = random_matrix(rng, 1, 2);
  const Matrix mem = random_matrix(rng, 2, 2);
  Tape t;
  const Matrix got = long_term_attention_layer(t.constant(q), t.constant(mem), bind(t, p)).value();
  const auto ref = oracle::attention(oracle::to_rows(q), oracle::to_rows(mem),
                                     oracle::to_rows(p.query), oracle::to_rows(p.key),
                                     oracle::to_rows(p.value), true,
                                     [](std::size_t, std::size_t) { return true; });
  EXPECT_LE(oracle::max_abs_diff(got, ref), 1e-10);
}

TEST(LongTermAttention, EmptyMemoryRejected) {
  Rng rng(9);
  const AttentionParams p = random_params(rng, 2);
  Tape t;
  EXPECT_THROW(long_term_attention_layer(t.constant(Matrix::Zero(2, 2)),
                                         t.constant(Matrix::Zero(0, 2)), bind(t, p)),
               EmptyMemoryError);
}

TEST(AttentionInvariants, CausalityUnderPerturbation) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const Index T = 2 + trial % 4;
    const AttentionParams p = random_params(rng, 3);
    const Matrix x = random_matrix(rng, T, 3);
    const Matrix ctx = trial % 2 == 0 ? Matrix() : random_matrix(rng, T, 3);
    const Index pert = rng.uniform_int(1, T - 1);
    Matrix y = x;
    y.row(pert) += random_matrix(rng, 1, 3);
    Tape t;
    const Matrix a = recurrent_attention_layer(t.constant(x), ctx, bind(t, p)).value();
    const Matrix b = recurrent_attention_layer(t.constant(y), ctx, bind(t, p)).value();
    for (Index r = 0; r < pert; ++r) EXPECT_EQ(a.row(r), b.row(r)) << "row " << r;
    EXPECT_NE(a.row(pert), b.row(pert));
  }
}

TEST(AttentionInvariants, ContextReceivesNoGradient) {
  Rng rng(11);
  const AttentionParams p = random_params(rng, 3);
  Matrix ctx = random_matrix(rng, 2, 3);
  const Matrix input = random_matrix(rng, 2, 3);
  Tape t;
  Var x = t.parameter(input);
  Var out = recurrent_attention_layer(x, ctx, bind(t, p));
  t.backward(weighted_sum(out, random_matrix(rng, 2, 3)));
  EXPECT_EQ(t.find_parameter(&ctx), nullptr);
  EXPECT_GT(t.gradient(x).cwiseAbs().maxCoeff(), 0.0);

}

TEST(AttentionInvariants, OutputsAreConvexCombinations) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const AttentionParams p = random_params(rng, 3);
    const Matrix x = random_matrix(rng, 3, 3, 3.0);
    const Matrix ctx = random_matrix(rng, 3, 3, 3.0);
    Tape t;
    const Matrix out = recurrent_attention_layer(t.constant(x), ctx, bind(t, p)).value();
    Matrix kv(6, 3);
    kv << ctx, x;
    const Matrix v = kv * p.value.transpose();
    for (Index r = 0; r < 3; ++r) {
      for (Index c = 0; c < 3; ++c) {
        EXPECT_GE(out(r, c), v.col(c).minCoeff() - 1e-12);
        EXPECT_LE(out(r, c), v.col(c).maxCoeff() + 1e-12);
      }
    }
  }
}

TEST(AttentionGradients, RecurrentProjections) {
  Rng rng(13);
  AttentionParams p = random_params(rng, 3);
  const Matrix x = random_matrix(rng, 3, 3);
  const Matrix ctx = random_matrix(rng, 3, 3);
  const Matrix w = random_matrix(rng, 3, 3);
  std::vector<ParamRef> refs = {{"query", &p.query}, {"key", &p.key}, {"value", &p.value}};
  auto f = [&](Tape& t) {
    return weighted_sum(recurrent_attention_layer(t.constant(x), ctx, bind(t, p)), w);
  };
  EXPECT_LE(grad_check(f, refs, 1e-5).max_rel_error(), 1e-6);
}

TEST(AttentionGradients, LongTermProjectionsAndInputs) {
  Rng rng(14);
  AttentionParams p = random_params(rng, 3);
  Matrix q = random_matrix(rng, 3, 3);
  Matrix mem = random_matrix(rng, 2, 3);
  const Matrix w = random_matrix(rng, 3, 3);
  std::vector<ParamRef> refs = {
      {"query", &p.query}, {"key", &p.key}, {"value", &p.value}, {"input", &q}, {"memory", &mem}};
  auto f = [&](Tape& t) {
    return weighted_sum(long_term_attention_layer(t.parameter(q), t.parameter(mem), bind(t, p)), w);
  };
  EXPECT_LE(grad_check(f, refs, 1e-5).max_rel_error(), 1e-6);
}
