#pragma once

// Alternating optimisation: the next-item objective updates every parameter
// except the routing weights, then the reconstruction objective updates the
// routing weights alone while the memory is fused.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

#include "dman/data.hpp"
#include "dman/memory.hpp"
#include "dman/model.hpp"

namespace dman {

class Adam {
 public:
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t steps = 0;
  std::vector<Matrix> first;
  std::vector<Matrix> second;

  Adam() = default;
  explicit Adam(double learning_rate) : lr(learning_rate) {}

  void step(std::span<Matrix* const> params, std::span<const Matrix> grads) {
    if (params.size() != grads.size()) throw ValidationError("Adam: params/grads mismatch");
    if (first.empty()) {
      for (const Matrix* p : params) {
        first.push_back(Matrix::Zero(p->rows(), p->cols()));
        second.push_back(Matrix::Zero(p->rows(), p->cols()));
      }
    }
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (std::size_t k = 0; k < params.size(); ++k) {
      first[k] = beta1 * first[k] + (1.0 - beta1) * grads[k];
      second[k] = beta2 * second[k] + (1.0 - beta2) * grads[k].cwiseProduct(grads[k]);
      params[k]->array() -=
          lr * (first[k].array() / c1) / ((second[k].array() / c2).sqrt() + eps);
    }
  }
};

// One user's training segments with the next-item target of every position.
// Targets cross segment boundaries; padding positions and the final item have
// target 0 and are skipped.
struct TrainSequence {
  UserId user = 0;
  std::vector<std::vector<ItemId>> segments;
  std::vector<std::vector<ItemId>> targets;

  static TrainSequence from(const SegmentedHistory& h) {
    TrainSequence s;
    s.user = h.user;
    s.segments = h.segments;
    std::vector<ItemId> flat;
    for (const auto& seg : h.segments) flat.insert(flat.end(), seg.begin(), seg.end());
    const std::size_t T = h.segments.empty() ? 0 : h.segments[0].size();
    for (std::size_t k = 0; k < h.segments.size(); ++k) {
      std::vector<ItemId> tg(T, kPaddingItem);
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t i = k * T + t;
        if (flat[i] != kPaddingItem && i + 1 < flat.size()) tg[t] = flat[i + 1];
      }
      s.targets.push_back(std::move(tg));
    }
    return s;
  }
};

struct StepLosses {
  double main = 0.0;  // mean over users of the summed per-position loss
  double aux = 0.0;   // mean over users of the reconstruction loss
  Index users = 0;
};

struct LossRecord {
  int epoch = 0;
  Index segment = 0;
  double main = 0.0;
  double aux = 0.0;
};

class Trainer {
 public:
  Trainer(ModelConfig cfg, ModelParams params)
      : cfg_(std::move(cfg)),
        params_(std::move(params)),
        main_opt_(cfg_.lr),
        routing_opt_(cfg_.lr),
        sample_rng_(cfg_.seed, 2),
        shuffle_rng_(cfg_.seed, 3) {
    cfg_.validate();
    if (cfg_.variant == Variant::full_scan) {
      throw ValidationError("full_scan is an inference-only baseline and cannot be trained");
    }
  }

  static Trainer create(const ModelConfig& cfg) {
    Rng rng(cfg.seed, 1);
    return Trainer(cfg, ModelParams::init(cfg, rng));
  }

  const ModelConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  Adam& main_optimizer() { return main_opt_; }
  Adam& routing_optimizer() { return routing_opt_; }
  const Adam& main_optimizer() const { return main_opt_; }
  const Adam& routing_optimizer() const { return routing_opt_; }

  // Candidate ids for every position of a segment: target first, then negatives.
  std::vector<ItemId> draw_candidates(std::span<const ItemId> targets, Vector& weights) {
    const Index group = 1 + cfg_.neg_samples;
    std::vector<ItemId> ids;
    ids.reserve(targets.size() * static_cast<std::size_t>(group));
    weights = Vector::Zero(static_cast<Index>(targets.size()));
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const ItemId target = targets[t];
      if (target == kPaddingItem) {
        ids.insert(ids.end(), static_cast<std::size_t>(group), kPaddingItem);
        continue;
      }
      weights(static_cast<Index>(t)) = 1.0;
      ids.push_back(target);
      const ItemId excl[] = {target};
      const auto neg = sample_negatives(sample_rng_, cfg_.vocab_size, excl, cfg_.neg_samples);
      ids.insert(ids.end(), neg.begin(), neg.end());
    }
    return ids;
  }

  // Next-item loss of one user at one segment on a fresh tape.
  struct UserForward {
    Var loss;
    SegmentForward forward;
  };
  UserForward user_loss(Tape& tape, const BoundModel& bound, const UserState& state,
                        const TrainSequence& seq, Index n) {
    const auto& seg = seq.segments[static_cast<std::size_t>(n)];
    SegmentForward f = forward_segment(tape, bound, cfg_, state, seg, n);
    Vector weights;
    const auto cands = draw_candidates(seq.targets[static_cast<std::size_t>(n)], weights);
    Var loss = sampled_softmax_loss(f.user, bound.embedding, cands, weights);
    return {loss, std::move(f)};
  }

  // Hidden states of every user's forward pass, kept for phases B and C.
  using BatchHidden = std::vector<std::vector<Matrix>>;

  // Phase A: next-item loss; Adam step on every parameter except routing.
  double main_phase(std::span<const TrainSequence* const> batch, std::span<const UserState> states,
                    Index n, BatchHidden& hidden) {
    check_batch(batch.size(), states.size());
    const double inv = 1.0 / static_cast<double>(batch.size());
    const std::vector<Matrix*> params = params_.group(ParamGroup::main);
    std::vector<Matrix> grads = zeros_like(params);
    hidden.assign(batch.size(), {});
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Tape tape;
      const BoundModel bound = BoundModel::bind(tape, params_);
      UserForward uf = user_loss(tape, bound, states[b], *batch[b], n);
      const double loss = uf.loss.scalar();
      if (!std::isfinite(loss)) fail("main", loss, grads, n);
      total += loss * inv;
      tape.backward(uf.loss, inv);
      collect(tape, params, grads);
      for (const Var& h : uf.forward.short_hidden) hidden[b].push_back(h.value());
    }
    grads[0].row(0).setZero();  // padding embedding
    check_finite(grads, "main", total, n);
    main_opt_.step(params, grads);
    params_.embedding.row(0).setZero();
    return total;
  }

  // Phase B: fuse each user's cached segment into memory. For variants with
  // trainable routing, the reconstruction loss against this segment's hidden
  // states drives an Adam step on the routing weights alone. With commit off
  // the states are left untouched (the step is still taken).
  double memory_phase(std::span<UserState> states, const BatchHidden& hidden, Index n,
                      bool commit = true) {
    if (!cfg_.uses_memory()) return 0.0;
    check_batch(hidden.size(), states.size());
    const double inv = 1.0 / static_cast<double>(states.size());
    const std::vector<Matrix*> params = params_.group(ParamGroup::routing);
    std::vector<Matrix> grads = zeros_like(params);
    double total = 0.0;
    bool any = false;
    for (std::size_t b = 0; b < states.size(); ++b) {
      const UserState& st = states[b];
      if (st.cache.empty()) continue;
      MemoryState old = st.memory;
      if (old.fused == 0) old.levels = params_.initial_memory;
      MemoryState next;
      if (!cfg_.trains_routing()) {
        next = update_memory(old, st.cache, params_.routing, cfg_.routing_iters,
                             cfg_.memory_update());
      } else {
        Tape tape;
        Var aux = tape.constant(Matrix::Zero(1, 1));
        for (std::size_t l = 0; l < static_cast<std::size_t>(cfg_.layers); ++l) {
          const Matrix& prev = st.cache.hidden[l];
          Var fresh = abstract_memory(tape, old.levels[l], prev, params_.routing[l],
                                      cfg_.routing_iters);
          aux = add(aux, reconstruction_loss(hidden[b][l], old.levels[l], prev, fresh,
                                             params_.layers[l].recurrent,
                                             {cfg_.attention_scale, nullptr}));
          next.levels.push_back(fresh.value());
        }
        next.fused = old.fused + 1;
        if (!std::isfinite(aux.scalar())) fail("aux", aux.scalar(), grads, n);
        total += aux.scalar() * inv;
        tape.backward(aux, inv);
        collect(tape, params, grads);
        any = true;
      }
      if (commit) states[b].memory = std::move(next);
    }
    if (any) {
      check_finite(grads, "aux", total, n);
      routing_opt_.step(params, grads);
    }
    return total;
  }

  // Phase C: cache this segment's hidden states.
  static void cache_phase(std::span<UserState> states, BatchHidden& hidden, Index n) {
    for (std::size_t b = 0; b < states.size(); ++b) {
      states[b].cache.hidden = std::move(hidden[b]);
      states[b].cache.segment_index = n;
      states[b].last_segment = n;
    }
  }

  // Phases A, B and C for every user in the batch at segment n.
  StepLosses train_step(std::span<const TrainSequence* const> batch, std::span<UserState> states,
                        Index n) {
    check_batch(batch.size(), states.size());
    StepLosses out;
    out.users = static_cast<Index>(batch.size());
    if (batch.empty()) return out;
    BatchHidden hidden;
    out.main = main_phase(batch, states, n, hidden);
    out.aux = memory_phase(states, hidden, n);
    cache_phase(states, hidden, n);
    return out;
  }

  // One pass over every user: shuffled into batches, each batch trained
  // segment by segment from fresh memory.
  std::vector<LossRecord> train_epoch(std::span<const TrainSequence> data, int epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng_.engine());
    Index max_segments = 0;
    for (const auto& s : data) max_segments = std::max<Index>(max_segments, s.segments.size());
    std::vector<double> main_sum(static_cast<std::size_t>(max_segments), 0.0);
    std::vector<double> aux_sum(static_cast<std::size_t>(max_segments), 0.0);
    std::vector<Index> weight(static_cast<std::size_t>(max_segments), 0);
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<UserState> states;
      std::vector<const TrainSequence*> members;
      for (std::size_t i = start; i < end; ++i) {
        members.push_back(&data[order[i]]);
        states.push_back(UserState::fresh(params_));
      }
      for (Index n = 0; n < max_segments; ++n) {
        // Users whose history is shorter drop out once exhausted.
        std::vector<const TrainSequence*> active;
        std::vector<UserState> active_states;
        std::vector<std::size_t> slots;
        for (std::size_t k = 0; k < members.size(); ++k) {
          if (static_cast<Index>(members[k]->segments.size()) > n) {
            active.push_back(members[k]);
            active_states.push_back(std::move(states[k]));
            slots.push_back(k);
          }
        }
        if (active.empty()) break;
        const StepLosses l = train_step(active, active_states, n);
        for (std::size_t k = 0; k < slots.size(); ++k) states[slots[k]] = std::move(active_states[k]);
        main_sum[static_cast<std::size_t>(n)] += l.main * static_cast<double>(l.users);
        aux_sum[static_cast<std::size_t>(n)] += l.aux * static_cast<double>(l.users);
        weight[static_cast<std::size_t>(n)] += l.users;
      }
    }
    std::vector<LossRecord> log;
    for (Index n = 0; n < max_segments; ++n) {
      const auto k = static_cast<std::size_t>(n);
      if (weight[k] == 0) continue;
      const double w = static_cast<double>(weight[k]);
      log.push_back({epoch, n, main_sum[k] / w, aux_sum[k] / w});
    }
    return log;
  }

  std::vector<LossRecord> fit(std::span<const TrainSequence> data) {
    std::vector<LossRecord> log;
    for (int e = 0; e < cfg_.epochs; ++e) {
      auto ep = train_epoch(data, e);
      log.insert(log.end(), ep.begin(), ep.end());
    }
    return log;
  }

 private:
  static void check_batch(std::size_t a, std::size_t b) {
    if (a != b) throw ValidationError("train_step: batch/state mismatch");
  }

  static std::vector<Matrix> zeros_like(const std::vector<Matrix*>& ps) {
    std::vector<Matrix> out;
    out.reserve(ps.size());
    for (const Matrix* p : ps) out.push_back(Matrix::Zero(p->rows(), p->cols()));
    return out;
  }

  static void collect(const Tape& tape, const std::vector<Matrix*>& ps, std::vector<Matrix>& grads) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (const Var* v = tape.find_parameter(ps[k])) tape.add_gradient_to(*v, grads[k]);
    }
  }

  static double norm_of(const std::vector<Matrix>& grads) {
    double s = 0.0;
    for (const auto& g : grads) s += g.squaredNorm();
    return std::sqrt(s);
  }

  [[noreturn]] static void fail(const char* which, double loss, const std::vector<Matrix>& grads,
                                Index n) {
    std::ostringstream os;
    os << "non-finite " << which << " loss at segment " << n << ": loss=" << loss
       << " accumulated grad norm=" << norm_of(grads);
    throw RuntimeFailure(os.str());
  }

  static void check_finite(const std::vector<Matrix>& grads, const char* which, double loss,
                           Index n) {
    for (const auto& g : grads) {
      if (!g.allFinite()) fail(which, loss, grads, n);
    }
  }

  ModelConfig cfg_;
  ModelParams params_;
  Adam main_opt_;
  Adam routing_opt_;
  Rng sample_rng_;
  Rng shuffle_rng_;
};

}  // namespace dman
