#pragma once

// Leave-last-out ranking metrics and the inference-cost benchmark.

#include <algorithm>
#include <limits>
#include <chrono>
#include <cmath>
#include <functional>
#include <span>
#include <unordered_set>
#include <vector>

#include "dman/data.hpp"
#include "dman/model.hpp"

namespace dman {

enum class CandidateMode { all_items, sampled };

struct RankingMetrics {
  std::vector<Index> ks;
  std::vector<double> hit_rate;
  std::vector<double> ndcg;
  std::vector<double> recall;  // equals hit_rate with one held-out item per user
  Index users = 0;
};

// Aggregates 1-based target ranks.
inline RankingMetrics metrics_from_ranks(std::span<const Index> ranks, std::span<const Index> ks) {
  if (ranks.empty()) throw ValidationError("rank_eval: empty test set");
  RankingMetrics m;
  m.ks.assign(ks.begin(), ks.end());
  m.users = static_cast<Index>(ranks.size());
  for (Index k : ks) {
    double hits = 0.0;
    double gain = 0.0;
    for (Index r : ranks) {
      if (r <= k) {
        hits += 1.0;
        gain += 1.0 / std::log2(static_cast<double>(r) + 1.0);
      }
    }
    m.hit_rate.push_back(hits / static_cast<double>(ranks.size()));
    m.ndcg.push_back(gain / static_cast<double>(ranks.size()));
  }
  m.recall = m.hit_rate;
  return m;
}

// 1-based rank of target among candidates under scores; equal scores are
// ordered by ascending item id.
inline Index rank_of(const Vector& scores, ItemId target, std::span<const ItemId> candidates) {
  const double st = scores(target);
  Index rank = 1;
  for (ItemId c : candidates) {
    if (c == target) continue;
    const double sc = scores(c);
    if (sc > st || (sc == st && c < target)) ++rank;
  }
  return rank;
}

// Candidates for one user: every item not interacted with (all_items), or
// `sampled_count` such items drawn uniformly (sampled); the target is always added.
inline std::vector<ItemId> candidate_items(ItemId vocab, const std::vector<ItemId>& history,
                                           ItemId target, CandidateMode mode, Rng* rng,
                                           Index sampled_count) {
  std::vector<ItemId> seen(history);
  seen.push_back(target);
  if (mode == CandidateMode::sampled) {
    if (rng == nullptr) throw ValidationError("rank_eval: sampled mode needs an rng");
    auto out = sample_negatives(*rng, vocab, seen, sampled_count);
    out.push_back(target);
    return out;
  }
  std::unordered_set<ItemId> skip(history.begin(), history.end());
  std::vector<ItemId> out;
  out.reserve(static_cast<std::size_t>(vocab));
  for (ItemId i = 1; i <= vocab; ++i) {
    if (i == target || !skip.contains(i)) out.push_back(i);
  }
  return out;
}

// User embedding for the next item after the given test-time history.
using Embedder = std::function<RowVector(const SegmentedHistory&)>;

inline RankingMetrics rank_eval(const Embedder& embed, const Matrix& item_table,
                                std::span<const SegmentedHistory> users, std::span<const Index> ks,
                                Index window, CandidateMode mode = CandidateMode::all_items,
                                std::uint64_t seed = 0, Index sampled_count = 100) {
  Rng rng(seed, 7);
  std::vector<Index> ranks;
  const ItemId vocab = item_table.rows() - 1;
  for (const auto& h : users) {
    if (!h.test) continue;
    const SegmentedHistory hist = test_history(h, window);
    const RowVector u = embed(hist);
    const Vector scores = item_table * u.transpose();
    const auto cands = candidate_items(vocab, hist.items(), *h.test, mode, &rng, sampled_count);
    ranks.push_back(rank_of(scores, *h.test, cands));
  }
  return metrics_from_ranks(ranks, ks);
}

// Model embedding: replay all but the last segment, then infer on the last.
inline Embedder model_embedder(const ModelParams& params, const ModelConfig& cfg) {
  return [&params, cfg](const SegmentedHistory& h) -> RowVector {
    if (cfg.variant == Variant::full_scan) return infer_full_scan(params, cfg, h.items()).embedding;
    UserState st = UserState::fresh(params);
    std::span<const std::vector<ItemId>> segs(h.segments);
    if (segs.empty()) throw ColdStartError("rank_eval: user has no history");
    replay(st, params, cfg, segs.first(segs.size() - 1));
    return infer_user(st, params, cfg, segs.back()).embedding;
  };
}

inline RankingMetrics rank_eval(const ModelParams& params, const ModelConfig& cfg,
                                std::span<const SegmentedHistory> users, std::span<const Index> ks,
                                CandidateMode mode = CandidateMode::all_items,
                                std::uint64_t seed = 0) {
  return rank_eval(model_embedder(params, cfg), params.embedding, users, ks, cfg.window, mode,
                   seed);
}

struct BenchReport {
  Variant variant = Variant::dman;
  Index segments = 0;
  Index users = 0;
  int repetitions = 0;
  double seconds_per_1024 = 0.0;          // fastest repetition, scaled to 1024 users
  std::uint64_t scores_per_user = 0;      // analytic attention-score count
  std::uint64_t scores_computed = 0;      // counted during one pass over all users
};

struct BenchOptions {
  Index users = 1024;
  int repetitions = 5;
  std::uint64_t seed = 0;
};

namespace detail {

// One prepared (variant, history length) workload. Memory and cached state
// are built here and are not timed; full_scan reads the whole history on
// every call.
class BenchWorkload {
 public:
  BenchWorkload(const ModelParams& params, ModelConfig cfg, Variant variant, Index segments,
                const BenchOptions& opt)
      : params_(&params) {
    if (segments < 1 || opt.users < 1 || opt.repetitions < 1) {
      throw ValidationError("efficiency_bench: segments, users and repetitions must be >= 1");
    }
    cfg.variant = variant;
    cfg_ = cfg;
    Rng rng(opt.seed, 11 + static_cast<std::uint64_t>(segments));
    const Index T = cfg.window;
    histories_.resize(static_cast<std::size_t>(opt.users));
    for (auto& h : histories_) {
      h.resize(static_cast<std::size_t>(segments * T));
      for (auto& item : h) item = rng.uniform_int(1, cfg.vocab_size);
    }
    if (variant != Variant::full_scan) {
      for (const auto& h : histories_) {
        const SegmentedHistory sh = segment_items(0, h, T);
        UserState st = UserState::fresh(params);
        std::span<const std::vector<ItemId>> segs(sh.segments);
        replay(st, params, cfg, segs.first(segs.size() - 1));
        states_.push_back(std::move(st));
        finals_.push_back(sh.segments.back());
      }
    }
    rep_.variant = variant;
    rep_.segments = segments;
    rep_.users = opt.users;
    rep_.repetitions = opt.repetitions;
    rep_.seconds_per_1024 = std::numeric_limits<double>::infinity();
    rep_.scores_per_user =
        variant == Variant::full_scan ? full_scan_score_count(cfg, segments)
        : variant == Variant::xl      ? static_cast<std::uint64_t>(cfg.layers * T * 2 * T)
                                      : dman_score_count(cfg);
  }

  // One pass over every user; returns the attention scores computed.
  std::uint64_t pass() {
    std::uint64_t scores = 0;
    for (std::size_t u = 0; u < histories_.size(); ++u) {
      const Inference inf = cfg_.variant == Variant::full_scan
                                ? infer_full_scan(*params_, cfg_, histories_[u])
                                : infer_user(states_[u], *params_, cfg_, finals_[u]);
      scores += inf.scores;
      sink_ += inf.embedding(0);
    }
    return scores;
  }

  // Timed pass; keeps the fastest, since scheduler and allocator noise only
  // ever add time.
  void timed_pass() {
    const auto t0 = std::chrono::steady_clock::now();
    rep_.scores_computed = pass();
    const auto t1 = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(t1 - t0).count() * 1024.0 /
                     static_cast<double>(rep_.users);
    rep_.seconds_per_1024 = std::min(rep_.seconds_per_1024, s);
  }

  const BenchReport& report() const {
    if (!std::isfinite(sink_)) throw RuntimeFailure("efficiency_bench: non-finite embeddings");
    return rep_;
  }

 private:
  const ModelParams* params_;
  ModelConfig cfg_;
  std::vector<std::vector<ItemId>> histories_;
  std::vector<UserState> states_;
  std::vector<std::vector<ItemId>> finals_;
  BenchReport rep_;
  double sink_ = 0.0;
};

}  // namespace detail

// Times the inference forward pass over a batch of users with histories of
// `segments` windows, after one untimed warm-up pass.
inline BenchReport bench_variant(const ModelParams& params, const ModelConfig& cfg,
                                 Variant variant, Index segments, const BenchOptions& opt) {
  detail::BenchWorkload w(params, cfg, variant, segments, opt);
  w.pass();
  for (int r = 0; r < opt.repetitions; ++r) w.timed_pass();
  return w.report();
}

// Every (variant, segments) pair. Repetitions are interleaved across the
// workloads so slow periods on a shared machine hit all of them alike.
inline std::vector<BenchReport> efficiency_bench(const ModelParams& params, const ModelConfig& cfg,
                                                 std::span<const Variant> variants,
                                                 std::span<const Index> segment_counts,
                                                 const BenchOptions& opt = {}) {
  std::vector<detail::BenchWorkload> work;
  for (Variant v : variants) {
    for (Index n : segment_counts) work.emplace_back(params, cfg, v, n, opt);
  }
  for (auto& w : work) w.pass();
  for (int r = 0; r < opt.repetitions; ++r) {
    for (auto& w : work) w.timed_pass();
  }
  std::vector<BenchReport> out;
  for (const auto& w : work) out.push_back(w.report());
  return out;
}

}  // namespace dman
