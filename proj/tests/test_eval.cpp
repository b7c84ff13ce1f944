#include <gtest/gtest.h>

#include <cmath>

#include "dman/eval.hpp"
#include "fixtures.hpp"

using namespace dman;

namespace {

const Index kTen[] = {10};

// Uniformly random histories: the held-out item is independent of the past.
BehaviorLog uniform_log(Index users, Index len, ItemId vocab, std::uint64_t seed) {
  Rng rng(seed);
  BehaviorLog log;
  for (UserId u = 1; u <= users; ++u) {
    for (Index t = 0; t < len; ++t) log.records.push_back({u, rng.uniform_int(1, vocab), t});
  }
  return log;
}

}  // namespace

TEST(Metrics, RankOneScoresFull) {
  const Index ranks[] = {1};
  const auto m = metrics_from_ranks(ranks, kTen);
  EXPECT_DOUBLE_EQ(m.hit_rate[0], 1.0);
  EXPECT_DOUBLE_EQ(m.ndcg[0], 1.0);
}

TEST(Metrics, RankThreeDiscountsByLogFour) {
  const Index ranks[] = {3};
  EXPECT_DOUBLE_EQ(metrics_from_ranks(ranks, kTen).ndcg[0], 0.5);
}

TEST(Metrics, RankElevenMissesTopTen) {
  const Index ranks[] = {11};
  const auto m = metrics_from_ranks(ranks, kTen);
  EXPECT_DOUBLE_EQ(m.hit_rate[0], 0.0);
  EXPECT_DOUBLE_EQ(m.ndcg[0], 0.0);
}

TEST(Metrics, MonotoneInKAndNdcgBelowHitRate) {
  Rng rng(3);
  std::vector<Index> ranks;
  for (int i = 0; i < 500; ++i) ranks.push_back(rng.uniform_int(1, 60));
  const Index ks[] = {1, 5, 10, 20, 50, 100};
  const auto m = metrics_from_ranks(ranks, ks);
  for (std::size_t i = 0; i < m.ks.size(); ++i) {
    EXPECT_LE(m.ndcg[i], m.hit_rate[i] + 1e-15);
    EXPECT_EQ(m.recall[i], m.hit_rate[i]);
    if (i > 0) {
      EXPECT_GE(m.hit_rate[i], m.hit_rate[i - 1]);
    }
  }
  EXPECT_EQ(m.users, 500);
  EXPECT_DOUBLE_EQ(m.hit_rate.back(), 1.0);
}

TEST(Metrics, EmptyTestSetIsAnError) {
  EXPECT_THROW(metrics_from_ranks(std::span<const Index>{}, kTen), ValidationError);
  const Matrix table = Matrix::Identity(4, 4);
  Embedder e = [](const SegmentedHistory&) { return RowVector(RowVector::Zero(4)); };
  EXPECT_THROW(rank_eval(e, table, std::span<const SegmentedHistory>{}, kTen, 2),
               ValidationError);
}

TEST(Ranking, TiesBreakByItemId) {
  Vector scores = Vector::Zero(6);
  scores(2) = 1.0;
  scores(4) = 1.0;
  scores(5) = 2.0;
  const ItemId cands[] = {1, 2, 3, 4, 5};
  EXPECT_EQ(rank_of(scores, 5, cands), 1);
  EXPECT_EQ(rank_of(scores, 2, cands), 2);
  EXPECT_EQ(rank_of(scores, 4, cands), 3);
  EXPECT_EQ(rank_of(scores, 1, cands), 4);
  EXPECT_EQ(rank_of(scores, 3, cands), 5);
}

TEST(Ranking, CandidatesExcludeHistoryButKeepTarget) {
  const std::vector<ItemId> history = {2, 3, 3, 7};
  const auto all = candidate_items(8, history, 3, CandidateMode::all_items, nullptr, 0);
  EXPECT_EQ(all, (std::vector<ItemId>{1, 3, 4, 5, 6, 8}));
  Rng rng(1);
  const auto s = candidate_items(50, history, 3, CandidateMode::sampled, &rng, 20);
  ASSERT_EQ(s.size(), 21u);
  EXPECT_EQ(s.back(), 3);
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    EXPECT_EQ(std::find(history.begin(), history.end(), s[i]), history.end());
  }
  EXPECT_THROW(candidate_items(50, history, 3, CandidateMode::sampled, nullptr, 20),
               ValidationError);
}

TEST(RankEval, AnchorOracleIsPerfectThroughThePipeline) {
  const SyntheticTask task({300, 6, 20, 1000, 1.0, 5});
  const auto users = segment(task.generate(), 20, true);
  const ItemId vocab = 1000;
  const Matrix table = Matrix::Identity(vocab + 1, vocab + 1);
  // Reads the anchor out of the oldest segment and points at its mapped item.
  Embedder oracle = [&](const SegmentedHistory& h) {
    RowVector u = RowVector::Zero(vocab + 1);
    for (ItemId i : h.segments.front()) {
      if (i != kPaddingItem && i != kTriggerItem && !task.is_markov(i)) {
        u(SyntheticTask::mapped_item(i)) = 1.0;
      }
    }
    return u;
  };
  const Index ks[] = {1, 10};
  const auto m = rank_eval(oracle, table, users, ks, 20);
  EXPECT_EQ(m.users, 300);
  EXPECT_DOUBLE_EQ(m.hit_rate[0], 1.0);
  EXPECT_DOUBLE_EQ(m.ndcg[0], 1.0);
}

TEST(RankEval, UntrainedModelScoresAtChance) {
  ModelConfig cfg = dman::testing::tiny_config();
  cfg.vocab_size = 400;
  cfg.window = 5;
  Rng rng(cfg.seed);
  const ModelParams params = ModelParams::init(cfg, rng);
  const auto users = segment(uniform_log(600, 22, cfg.vocab_size, 9), cfg.window, true);
  // Expected hit rate of a target independent of the scores: 10 / |candidates|.
  double expected = 0.0;
  for (const auto& h : users) {
    const auto th = test_history(h, cfg.window);
    const auto c = candidate_items(cfg.vocab_size, th.items(), *h.test, CandidateMode::all_items,
                                   nullptr, 0);
    expected += std::min(1.0, 10.0 / static_cast<double>(c.size()));
  }
  expected /= static_cast<double>(users.size());
  const auto m = rank_eval(params, cfg, users, kTen);
  const double sd = std::sqrt(expected * (1.0 - expected) / static_cast<double>(users.size()));
  EXPECT_NEAR(m.hit_rate[0], expected, 4.0 * sd);
}

TEST(RankEval, SampledModeIsDeterministicPerSeed) {
  ModelConfig cfg = dman::testing::tiny_config();
  cfg.vocab_size = 200;
  Rng rng(cfg.seed);
  const ModelParams params = ModelParams::init(cfg, rng);
  const auto users = segment(uniform_log(50, 13, cfg.vocab_size, 2), cfg.window, true);
  const Index ks[] = {1, 10};
  const auto a = rank_eval(params, cfg, users, ks, CandidateMode::sampled, 8);
  const auto b = rank_eval(params, cfg, users, ks, CandidateMode::sampled, 8);
  EXPECT_EQ(a.hit_rate, b.hit_rate);
  EXPECT_EQ(a.ndcg, b.ndcg);
}

TEST(Bench, ScoreCountsFollowTheFormulas) {
  ModelConfig cfg = dman::testing::tiny_config();
  cfg.vocab_size = 50;
  Rng rng(cfg.seed);
  const ModelParams params = ModelParams::init(cfg, rng);
  const Variant variants[] = {Variant::dman, Variant::full_scan};
  const Index ns[] = {2, 5};
  const auto reps = efficiency_bench(params, cfg, variants, ns, {16, 5, 1});
  ASSERT_EQ(reps.size(), 4u);
  const std::uint64_t L = 2, T = 4, m = 2;
  for (const auto& r : reps) {
    const std::uint64_t N = static_cast<std::uint64_t>(r.segments);
    const std::uint64_t formula =
        r.variant == Variant::dman ? L * T * (2 * T + m) : L * (N * T) * (N * T);
    EXPECT_EQ(r.scores_per_user, formula);
    EXPECT_EQ(r.scores_computed, 16 * formula);
    EXPECT_EQ(r.repetitions, 5);
    EXPECT_GT(r.seconds_per_1024, 0.0);
  }
  EXPECT_EQ(reps[0].scores_per_user, reps[1].scores_per_user);
}

TEST(Bench, FullScanCountGrowsQuadratically) {
  ModelConfig cfg;
  cfg.embed_dim = 32;
  cfg.memory_slots = 8;
  cfg.layers = 2;
  EXPECT_EQ(full_scan_score_count(cfg, 64), 256 * full_scan_score_count(cfg, 4));
  EXPECT_EQ(dman_score_count(cfg), 2u * 20u * (40u + 8u));
}

TEST(Bench, LongHistoriesAreCheaperWithMemory) {
  ModelConfig cfg = dman::testing::tiny_config();
  cfg.vocab_size = 50;
  Rng rng(cfg.seed);
  const ModelParams params = ModelParams::init(cfg, rng);
  const BenchOptions opt{32, 5, 2};
  const auto d = bench_variant(params, cfg, Variant::dman, 32, opt);
  const auto f = bench_variant(params, cfg, Variant::full_scan, 32, opt);
  EXPECT_LT(3.0 * d.seconds_per_1024, f.seconds_per_1024);
}

TEST(Bench, RejectsEmptyRequests) {
  ModelConfig cfg = dman::testing::tiny_config();
  Rng rng(cfg.seed);
  const ModelParams params = ModelParams::init(cfg, rng);
  EXPECT_THROW(bench_variant(params, cfg, Variant::dman, 0, {}), ValidationError);
  EXPECT_THROW(bench_variant(params, cfg, Variant::dman, 2, {0, 5, 0}), ValidationError);
}
