#pragma once

// Shared scenarios used by unit tests and the acceptance binary.

#include <algorithm>
#include <vector>

#include "dman/grad_check.hpp"
#include "dman/model.hpp"
#include "dman/train.hpp"

namespace dman::testing {

inline ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.window = 4;
  cfg.memory_slots = 2;
  cfg.layers = 2;
  cfg.neg_samples = 3;
  cfg.vocab_size = 12;
  cfg.seed = 4;
  return cfg;
}

// Combined next-item and reconstruction objective for two users at different
// stages: one has a cached segment but no fused memory (so the learned
// initial memory is read), the other has fused memory. Quantities the
// training step treats as constants (cached context, memory contents, the
// reconstruction query and its frozen projections) are snapshotted at the
// unperturbed point, so central differences see the same objective the tape
// differentiates. Per-user losses are averaged over the batch as in the
// training step; the objective is returned as its individual terms (one per
// position and per reconstruction level) and summed by the checker.
class FullLossCheck {
 public:
  explicit FullLossCheck(const ModelConfig& cfg, double weight_scale = 1.0,
                         double memory_scale = 1.0)
      : cfg_(cfg) {
    Rng rng(cfg.seed, 1);
    params_ = ModelParams::init(cfg, rng);
    params_.visit([&](const std::string&, Matrix& m, ParamGroup) { m *= weight_scale; });
    for (auto& m : params_.initial_memory) m *= memory_scale;
    Rng data(cfg.seed, 9);
    const Index T = cfg.window;
    for (int u = 0; u < 2; ++u) {
      const int segments = u == 0 ? 1 : 2;
      std::vector<std::vector<ItemId>> history;
      for (int s = 0; s <= segments; ++s) {
        std::vector<ItemId> seg;
        for (Index t = 0; t < T; ++t) seg.push_back(data.uniform_int(1, cfg.vocab_size));
        history.push_back(seg);
      }
      User user;
      user.state = UserState::fresh(params_);
      replay(user.state, params_, cfg, std::span(history).first(static_cast<std::size_t>(segments)));
      user.segment = history.back();
      for (Index t = 0; t < T; ++t) {
        user.candidates.push_back(data.uniform_int(1, cfg.vocab_size));
        for (Index k = 0; k < cfg.neg_samples; ++k)
          user.candidates.push_back(data.uniform_int(1, cfg.vocab_size));
      }
      users_.push_back(std::move(user));
    }
    snapshot();
  }

  Var objective(Tape& tape) {
    const BoundModel bound = BoundModel::bind(tape, params_);
    const double inv = 1.0 / static_cast<double>(users_.size());
    std::vector<Var> terms;
    for (std::size_t u = 0; u < users_.size(); ++u) {
      const User& user = users_[u];
      SegmentForward f =
          forward_segment(tape, bound, cfg_, user.state, user.segment, user.state.last_segment + 1);
      const Index group = 1 + cfg_.neg_samples;
      Var cand = gather_rows(bound.embedding, user.candidates);
      terms.push_back(softmax_xent_terms(grouped_row_scores(f.user, cand, group),
                                         Vector::Constant(cfg_.window, inv)));
      const MemoryState& mem = memories_[u];
      for (Index l = 0; l < cfg_.layers; ++l) {
        const auto k = static_cast<std::size_t>(l);
        Var fresh = abstract_memory(tape, mem.levels[k], user.state.cache.hidden[k],
                                    params_.routing[k], cfg_.routing_iters);
        terms.push_back(scale(reconstruction_loss(queries_[u][k], mem.levels[k],
                                                  user.state.cache.hidden[k], fresh, frozen_[k],
                                                  {cfg_.attention_scale, nullptr}),
                              inv));
      }
    }
    return row_concat(terms);
  }

  std::vector<ParamRef> refs() {
    std::vector<ParamRef> out;
    params_.visit([&](const std::string& name, Matrix& m, ParamGroup) { out.push_back({name, &m}); });
    return out;
  }

  GradCheckReport run(double eps = 1e-5) {
    const auto r = refs();
    return grad_check([this](Tape& t) { return objective(t); }, r, eps);
  }

  ModelParams& params() { return params_; }

 private:
  struct User {
    UserState state;
    std::vector<ItemId> segment;
    std::vector<ItemId> candidates;
  };

  void snapshot() {
    frozen_.clear();
    for (const auto& layer : params_.layers) frozen_.push_back(layer.recurrent);
    queries_.clear();
    memories_.clear();
    for (const User& user : users_) {
      MemoryState mem = user.state.memory;
      if (mem.fused == 0) mem.levels = params_.initial_memory;
      memories_.push_back(std::move(mem));
      Tape tape(false);
      const BoundModel bound = BoundModel::bind(tape, params_);
      SegmentForward f =
          forward_segment(tape, bound, cfg_, user.state, user.segment, user.state.last_segment + 1);
      std::vector<Matrix> q;
      for (const Var& h : f.short_hidden) q.push_back(h.value());
      queries_.push_back(std::move(q));
    }
  }

  ModelConfig cfg_;
  ModelParams params_;
  std::vector<User> users_;
  std::vector<AttentionParams> frozen_;
  std::vector<std::vector<Matrix>> queries_;
  std::vector<MemoryState> memories_;
};

// Random single-segment histories: `users` users, `segments` windows each.
inline std::vector<TrainSequence> random_sequences(const ModelConfig& cfg, Index users,
                                                   Index segments, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrainSequence> out;
  for (Index u = 0; u < users; ++u) {
    std::vector<ItemId> items;
    for (Index i = 0; i < segments * cfg.window; ++i) {
      items.push_back(rng.uniform_int(1, cfg.vocab_size));
    }
    out.push_back(TrainSequence::from(segment_items(u + 1, items, cfg.window)));
  }
  return out;
}

struct ToyResult {
  double first = 0.0;
  double best = 0.0;
};

// Overfits a 20-user batch of one short window for `steps` full-batch steps
// and reports the first and the lowest main loss reached.
inline ToyResult memorization_toy(std::uint64_t seed, int steps = 50) {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.window = 5;
  cfg.memory_slots = 2;
  cfg.layers = 1;
  cfg.vocab_size = 40;
  cfg.lr = 0.05;
  cfg.seed = seed;
  Trainer tr = Trainer::create(cfg);
  const auto data = random_sequences(cfg, 20, 1, seed + 100);
  std::vector<const TrainSequence*> batch;
  for (const auto& d : data) batch.push_back(&d);
  ToyResult r;
  for (int step = 0; step < steps; ++step) {
    std::vector<UserState> states(data.size(), UserState::fresh(tr.params()));
    const double loss = tr.train_step(batch, states, 0).main;
    if (step == 0) r.first = r.best = loss;
    r.best = std::min(r.best, loss);
  }
  return r;
}

}  // namespace dman::testing
