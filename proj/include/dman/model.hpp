#pragma once

// Model assembly: parameters, the per-segment forward pass (short-term
// recurrent stack, long-term memory readout, gate) and the sampled-softmax
// objective.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dman/attention.hpp"
#include "dman/autodiff.hpp"
#include "dman/memory.hpp"
#include "dman/rng.hpp"

namespace dman {

enum class Variant { dman, xl, fifo, nran, full_scan };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::dman: return "dman";
    case Variant::xl: return "xl";
    case Variant::fifo: return "fifo";
    case Variant::nran: return "nran";
    case Variant::full_scan: return "full_scan";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "dman") return Variant::dman;
  if (s == "xl") return Variant::xl;
  if (s == "fifo") return Variant::fifo;
  if (s == "nran") return Variant::nran;
  if (s == "full_scan") return Variant::full_scan;
  throw ValidationError("unknown variant '" + s + "' (expected dman, xl, fifo, nran, full_scan)");
}

struct ModelConfig {
  Index embed_dim = 128;
  Index window = 20;
  Index memory_slots = 8;
  Index layers = 2;
  Index neg_samples = 5;
  int routing_iters = 3;
  bool attention_scale = true;
  Variant variant = Variant::dman;
  double lr = 0.001;
  Index batch_size = 128;
  int epochs = 8;
  std::uint64_t seed = 0;
  // Largest item id; the embedding table has vocab_size + 1 rows.
  Index vocab_size = 0;

  void validate() const {
    auto positive = [](Index v, const char* name) {
      if (v < 1) throw ValidationError(std::string(name) + " must be >= 1");
    };
    positive(embed_dim, "embed_dim");
    positive(window, "window_t");
    positive(memory_slots, "memory_slots");
    positive(layers, "layers");
    positive(neg_samples, "neg_samples");
    positive(batch_size, "batch_size");
    positive(vocab_size, "vocab_size");
    if (routing_iters < 1) throw ValidationError("routing_iters must be >= 1");
    if (epochs < 0) throw ValidationError("epochs must be >= 0");
    if (!(lr > 0) || !std::isfinite(lr)) throw ValidationError("lr must be positive");
  }

  bool uses_memory() const { return variant != Variant::xl && variant != Variant::full_scan; }
  bool uses_context() const { return variant != Variant::nran; }
  bool trains_routing() const { return variant == Variant::dman || variant == Variant::nran; }
  MemoryUpdate memory_update() const {
    return variant == Variant::fifo ? MemoryUpdate::fifo : MemoryUpdate::routing;
  }
};

enum class ParamGroup { main, routing };

struct ModelParams {
  Matrix embedding;  // (vocab + 1) x D, row 0 is padding and stays zero
  Matrix position;   // T x D
  std::vector<AttentionLayerParams> layers;
  Matrix gate_short;
  Matrix gate_long;
  std::vector<RoutingParams> routing;   // per memory level
  std::vector<Matrix> initial_memory;  // per memory level, m x D

  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    const Index D = cfg.embed_dim;
    const double s = 1.0 / std::sqrt(static_cast<double>(D));
    ModelParams p;
    p.embedding = rng.normal_matrix(cfg.vocab_size + 1, D, s);
    p.embedding.row(0).setZero();
    p.position = rng.normal_matrix(cfg.window, D, s);
    auto triple = [&] {
      return AttentionParams{rng.normal_matrix(D, D, s), rng.normal_matrix(D, D, s),
                             rng.normal_matrix(D, D, s)};
    };
    for (Index l = 0; l < cfg.layers; ++l) {
      AttentionLayerParams layer;
      layer.recurrent = triple();
      layer.long_term = triple();
      p.layers.push_back(std::move(layer));
    }
    p.gate_short = rng.normal_matrix(D, D, s);
    p.gate_long = rng.normal_matrix(D, D, s);
    for (Index l = 0; l < cfg.layers; ++l) {
      RoutingParams w;
      for (Index j = 0; j < cfg.memory_slots; ++j) w.push_back(rng.normal_matrix(D, D, s));
      p.routing.push_back(std::move(w));
      p.initial_memory.push_back(rng.normal_matrix(cfg.memory_slots, D, s));
    }
    return p;
  }

  // Calls f(name, matrix, group) for every trainable matrix in a fixed order.
  template <class Self, class F>
  static void visit_impl(Self& self, F&& f) {
    f(std::string("embedding"), self.embedding, ParamGroup::main);
    f(std::string("position"), self.position, ParamGroup::main);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      auto& L = self.layers[l];
      f(pre + "recurrent.query", L.recurrent.query, ParamGroup::main);
      f(pre + "recurrent.key", L.recurrent.key, ParamGroup::main);
      f(pre + "recurrent.value", L.recurrent.value, ParamGroup::main);
      f(pre + "long_term.query", L.long_term.query, ParamGroup::main);
      f(pre + "long_term.key", L.long_term.key, ParamGroup::main);
      f(pre + "long_term.value", L.long_term.value, ParamGroup::main);
    }
    f(std::string("gate.short"), self.gate_short, ParamGroup::main);
    f(std::string("gate.long"), self.gate_long, ParamGroup::main);
    for (std::size_t l = 0; l < self.initial_memory.size(); ++l) {
      f("memory" + std::to_string(l) + ".initial", self.initial_memory[l], ParamGroup::main);
    }
    for (std::size_t l = 0; l < self.routing.size(); ++l) {
      for (std::size_t j = 0; j < self.routing[l].size(); ++j) {
        f("routing" + std::to_string(l) + ".capsule" + std::to_string(j), self.routing[l][j],
          ParamGroup::routing);
      }
    }
  }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, std::forward<F>(f));
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, std::forward<F>(f));
  }

  std::vector<Matrix*> group(ParamGroup g) {
    std::vector<Matrix*> out;
    visit([&](const std::string&, Matrix& m, ParamGroup pg) {
      if (pg == g) out.push_back(&m);
    });
    return out;
  }

  bool all_finite() const {
    bool ok = true;
    visit([&](const std::string&, const Matrix& m, ParamGroup) { ok = ok && m.allFinite(); });
    return ok;
  }
};

struct UserState {
  MemoryState memory;
  CachedState cache;
  std::int64_t last_segment = -1;

  static UserState fresh(const ModelParams& params) {
    return UserState{MemoryState::initial(params.initial_memory), CachedState{}, -1};
  }
};

// Parameters bound as leaves of one tape.
struct BoundModel {
  Var embedding;
  Var position;
  std::vector<BoundAttention> recurrent;
  std::vector<BoundAttention> long_term;
  Var gate_short;
  Var gate_long;
  std::vector<Var> initial_memory;

  static BoundModel bind(Tape& tape, const ModelParams& p) {
    BoundModel b;
    b.embedding = tape.parameter(p.embedding, /*sparse_rows=*/true);
    b.position = tape.parameter(p.position);
    for (const auto& layer : p.layers) {
      b.recurrent.push_back(dman::bind(tape, layer.recurrent));
      b.long_term.push_back(dman::bind(tape, layer.long_term));
    }
    b.gate_short = tape.parameter(p.gate_short);
    b.gate_long = tape.parameter(p.gate_long);
    for (const auto& m : p.initial_memory) b.initial_memory.push_back(tape.parameter(m));
    return b;
  }
};

// G = sigmoid(short W_short + long W_long); out = G * short + (1 - G) * long.
inline Var gate_fuse(Var short_h, Var long_h, Var w_short, Var w_long) {
  require_same_shape(short_h.value(), long_h.value(), "gate_fuse");
  Var gate = sigmoid(add(matmul(short_h, w_short), matmul(long_h, w_long)));
  return add(long_h, hadamard(gate, sub(short_h, long_h)));
}

struct SegmentForward {
  Var user;                       // T x D fused user embeddings
  std::vector<Var> short_hidden;  // L + 1 entries; [0] is the embedded input
  Var long_hidden;                // invalid for variants without memory
  std::size_t scores = 0;
};

// Forward pass of segment `segment_index` for a user whose state has processed
// every earlier segment.
inline SegmentForward forward_segment(Tape& tape, const BoundModel& bound,
                                      const ModelConfig& cfg, const UserState& user,
                                      std::span<const ItemId> segment,
                                      std::int64_t segment_index) {
  if (static_cast<Index>(segment.size()) != cfg.window) {
    throw DimensionError("forward_segment: segment has " + std::to_string(segment.size()) +
                         " items, window is " + std::to_string(cfg.window));
  }
  if (segment_index != user.last_segment + 1) {
    throw SequencingError("forward_segment: segment " + std::to_string(segment_index) +
                          " requested after segment " + std::to_string(user.last_segment));
  }
  if (!user.cache.empty() && user.cache.segment_index != segment_index - 1) {
    throw SequencingError("forward_segment: cached state belongs to segment " +
                          std::to_string(user.cache.segment_index));
  }
  SegmentForward out;
  AttentionOptions opt{cfg.attention_scale, &out.scores};
  const Var x = add(gather_rows(bound.embedding, segment), bound.position);
  out.short_hidden.push_back(x);
  const bool with_context = cfg.uses_context() && !user.cache.empty();
  static const Matrix kNoContext;
  Var h = x;
  for (Index l = 0; l < cfg.layers; ++l) {
    const Matrix& ctx = with_context ? user.cache.hidden[l] : kNoContext;
    h = recurrent_attention_layer(h, ctx, bound.recurrent[l], opt);
    out.short_hidden.push_back(h);
  }
  if (!cfg.uses_memory()) {
    out.user = h;
    return out;
  }
  Var q = x;
  for (Index l = 0; l < cfg.layers; ++l) {
    Var mem = user.memory.fused == 0 ? bound.initial_memory[l]
                                     : tape.constant(user.memory.levels[l]);
    q = long_term_attention_layer(q, mem, bound.long_term[l], opt);
  }
  out.long_hidden = q;
  out.user = gate_fuse(h, q, bound.gate_short, bound.gate_long);
  return out;
}

// Sampled softmax over candidate groups. user_rows is P x D and
// candidates holds P groups of (1 + negatives) item ids, positive first.
// Rows with weight 0 (padding targets) contribute nothing.
inline Var sampled_softmax_loss(Var user_rows, Var embedding, std::span<const ItemId> candidates,
                                const Vector& weights) {
  const Index rows = user_rows.rows();
  if (rows == 0 || static_cast<Index>(candidates.size()) % rows != 0) {
    throw DimensionError("sampled_softmax_loss: " + std::to_string(candidates.size()) +
                         " candidates for " + std::to_string(rows) + " rows");
  }
  const Index group = static_cast<Index>(candidates.size()) / rows;
  Var cand = gather_rows(embedding, candidates);
  return softmax_xent_rows(grouped_row_scores(user_rows, cand, group), weights);
}

// Single-position form: -log(exp(s+) / (exp(s+) + sum exp(s-))).
inline Var sampled_softmax_loss(Var user_emb, Var embedding, ItemId target,
                                std::span<const ItemId> negatives) {
  if (target == kPaddingItem) return user_emb.tape().constant(Matrix::Zero(1, 1));
  std::vector<ItemId> ids;
  ids.push_back(target);
  ids.insert(ids.end(), negatives.begin(), negatives.end());
  return sampled_softmax_loss(user_emb, embedding, ids, Vector::Ones(1));
}

// Embedded input for a whole history scanned as one sequence; positions repeat
// every window. Inference-only.
inline SegmentForward forward_full_scan(Tape& tape, const BoundModel& bound,
                                        const ModelConfig& cfg, std::span<const ItemId> history) {
  const Index n = static_cast<Index>(history.size());
  if (n == 0) throw ValidationError("forward_full_scan: empty history");
  SegmentForward out;
  AttentionOptions opt{cfg.attention_scale, &out.scores};
  Matrix pos(n, cfg.embed_dim);
  const Matrix& P = bound.position.value();
  for (Index i = 0; i < n; ++i) pos.row(i) = P.row(i % cfg.window);
  Var x = add(gather_rows(bound.embedding, history), tape.constant(std::move(pos)));
  out.short_hidden.push_back(x);
  static const Matrix kNoContext;
  Var h = x;
  for (Index l = 0; l < cfg.layers; ++l) {
    h = recurrent_attention_layer(h, kNoContext, bound.recurrent[l], opt);
    out.short_hidden.push_back(h);
  }
  out.user = h;
  return out;
}

// Advances a user state past a processed segment: memory fuses the previously
// cached hidden state, then the cache takes the new one.
inline void advance_state(UserState& user, const ModelParams& params, const ModelConfig& cfg,
                          std::vector<Matrix> hidden, std::int64_t segment_index) {
  if (cfg.uses_memory() && !user.cache.empty()) {
    if (user.memory.fused == 0) user.memory.levels = params.initial_memory;
    user.memory = update_memory(user.memory, user.cache, params.routing, cfg.routing_iters,
                                cfg.memory_update());
  }
  user.cache.hidden = std::move(hidden);
  user.cache.segment_index = segment_index;
  user.last_segment = segment_index;
}

class ColdStartError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Replays segments through the model without gradients, leaving the state
// ready for the next segment.
inline void replay(UserState& user, const ModelParams& params, const ModelConfig& cfg,
                   std::span<const std::vector<ItemId>> segments) {
  for (const auto& seg : segments) {
    Tape tape(false);
    const BoundModel bound = BoundModel::bind(tape, params);
    const std::int64_t n = user.last_segment + 1;
    SegmentForward f = forward_segment(tape, bound, cfg, user, seg, n);
    std::vector<Matrix> hidden;
    for (const Var& v : f.short_hidden) hidden.push_back(v.value());
    advance_state(user, params, cfg, std::move(hidden), n);
  }
}

struct Inference {
  RowVector embedding;
  std::size_t scores = 0;
};

// User embedding for the next item after `segment`, read at the final
// non-padding position.
inline Inference infer_user(const UserState& user, const ModelParams& params,
                            const ModelConfig& cfg, std::span<const ItemId> segment) {
  Index last = -1;
  for (Index t = 0; t < static_cast<Index>(segment.size()); ++t) {
    if (segment[t] != kPaddingItem) last = t;
  }
  if (last < 0) throw ColdStartError("infer_user: user has no observed interactions");
  Tape tape(false);
  const BoundModel bound = BoundModel::bind(tape, params);
  SegmentForward f = forward_segment(tape, bound, cfg, user, segment, user.last_segment + 1);
  return {f.user.value().row(last), f.scores};
}

inline Inference infer_full_scan(const ModelParams& params, const ModelConfig& cfg,
                                 std::span<const ItemId> history) {
  Tape tape(false);
  const BoundModel bound = BoundModel::bind(tape, params);
  SegmentForward f = forward_full_scan(tape, bound, cfg, history);
  return {f.user.value().bottomRows(1), f.scores};
}

// Attention scores per user for one inference call.
inline std::uint64_t dman_score_count(const ModelConfig& cfg) {
  const auto L = static_cast<std::uint64_t>(cfg.layers);
  const auto T = static_cast<std::uint64_t>(cfg.window);
  const auto m = static_cast<std::uint64_t>(cfg.memory_slots);
  return L * T * (2 * T + m);
}

inline std::uint64_t full_scan_score_count(const ModelConfig& cfg, Index segments) {
  const auto L = static_cast<std::uint64_t>(cfg.layers);
  const auto len = static_cast<std::uint64_t>(segments * cfg.window);
  return L * len * len;
}

}  // namespace dman
