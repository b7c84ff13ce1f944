#pragma once

// Per-user external memory: FIFO baseline, dynamic-routing abstraction and the
// attention-based reconstruction objective that trains the routing weights.

#include <span>
#include <vector>

#include "dman/attention.hpp"
#include "dman/autodiff.hpp"

namespace dman {

// One matrix of m rows per level, plus how many segments have been fused in.
struct MemoryState {
  std::vector<Matrix> levels;
  std::size_t fused = 0;

  static MemoryState initial(const std::vector<Matrix>& initial_levels) {
    return MemoryState{initial_levels, 0};
  }
};

// W_j for each interest capsule j of one level, shared by all primary capsules.
using RoutingParams = std::vector<Matrix>;

enum class MemoryUpdate { routing, fifo };

// Queue update: the newest `filled` rows of memory are live (oldest first);
// incoming rows are appended and the oldest rows evicted. Short results are
// left-padded with zero rows.
inline Matrix fifo_update(const Matrix& memory, const Matrix& incoming, Index filled) {
  const Index m = memory.rows();
  if (m < 1) throw EmptyMemoryError("fifo_update: memory has no slots");
  if (incoming.rows() > 0 && incoming.cols() != memory.cols()) {
    throw DimensionError("fifo_update: incoming " + shape_str(incoming) + " for memory " +
                         shape_str(memory));
  }
  filled = std::clamp<Index>(filled, 0, m);
  Matrix combined(filled + incoming.rows(), memory.cols());
  combined.topRows(filled) = memory.bottomRows(filled);
  combined.bottomRows(incoming.rows()) = incoming;
  Matrix out = Matrix::Zero(m, memory.cols());
  const Index keep = std::min(m, combined.rows());
  out.bottomRows(keep) = combined.bottomRows(keep);
  return out;
}

inline Matrix fifo_update(const Matrix& memory, const Matrix& incoming) {
  return fifo_update(memory, incoming, memory.rows());
}

inline RowVector squash(const RowVector& s) {
  const double n2 = s.squaredNorm();
  return (n2 / (1.0 + n2) / (std::sqrt(n2) + kSquashEpsilon)) * s;
}

// Coupling coefficients of every routing iteration, for inspection.
struct RoutingTrace {
  std::vector<Matrix> couplings;
};

// Routes P primary capsules (rows of primary) into weights.size() interest
// capsules. Logits start at zero; couplings are a softmax over interest
// capsules; the agreement update is skipped after the last iteration since it
// cannot affect the output.
inline Var dynamic_routing(Var primary, std::span<const Var> weights, int iters,
                           RoutingTrace* trace = nullptr) {
  if (iters < 1) throw ValidationError("dynamic_routing: iterations must be >= 1");
  if (weights.empty()) throw EmptyMemoryError("dynamic_routing: no interest capsules");
  Tape& tape = primary.tape();
  const Index P = primary.rows();
  const Index m = static_cast<Index>(weights.size());
  std::vector<Var> blocks;
  blocks.reserve(weights.size());
  for (const Var& w : weights) blocks.push_back(matmul_nt(primary, w));
  Var predictions = row_concat(blocks);
  Var logits = tape.constant(Matrix::Zero(P, m));
  Var capsules;
  for (int it = 0; it < iters; ++it) {
    Var alpha = softmax_rows(logits);
    if (trace != nullptr) trace->couplings.push_back(alpha.value());
    capsules = squash_rows(capsule_sum(alpha, predictions));
    if (it + 1 < iters) logits = add(logits, capsule_agreement(capsules, predictions));
  }
  return capsules;
}

inline std::vector<Var> bind_routing(Tape& tape, const RoutingParams& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const Matrix& w : params) out.push_back(tape.parameter(w));
  return out;
}

// f_abs for one level: routes [old memory; previous hidden] into a fresh m-slot memory.
inline Var abstract_memory(Tape& tape, const Matrix& old_memory, const Matrix& prev_hidden,
                           const RoutingParams& params, int iters, RoutingTrace* trace = nullptr) {
  if (old_memory.cols() != prev_hidden.cols()) {
    throw DimensionError("abstract_memory: memory " + shape_str(old_memory) + " vs hidden " +
                         shape_str(prev_hidden));
  }
  Matrix primary(old_memory.rows() + prev_hidden.rows(), old_memory.cols());
  primary.topRows(old_memory.rows()) = old_memory;
  primary.bottomRows(prev_hidden.rows()) = prev_hidden;
  const std::vector<Var> w = bind_routing(tape, params);
  return dynamic_routing(tape.constant(std::move(primary)), w, iters, trace);
}

// Squared Frobenius distance between the frozen recurrent-attention readout of
// query over [old memory; previous hidden] and over the new memory. Only
// new_memory can carry gradient.
inline Var reconstruction_loss(const Matrix& query, const Matrix& old_memory,
                               const Matrix& prev_hidden, Var new_memory,
                               const AttentionParams& frozen, const AttentionOptions& opt = {}) {
  Tape& tape = new_memory.tape();
  const BoundAttention p = bind_frozen(tape, frozen);
  Matrix reference_keys(old_memory.rows() + prev_hidden.rows(), old_memory.cols());
  reference_keys.topRows(old_memory.rows()) = old_memory;
  reference_keys.bottomRows(prev_hidden.rows()) = prev_hidden;
  Var q = tape.constant(query);
  Var target = long_term_attention_layer(q, tape.constant(std::move(reference_keys)), p, opt);
  Var approx = long_term_attention_layer(q, new_memory, p, opt);
  return frobenius_sq(sub(approx, target));
}

// Value-only memory fusion for every level (no gradient is recorded).
inline MemoryState update_memory(const MemoryState& state, const CachedState& prev,
                                 const std::vector<RoutingParams>& params, int iters,
                                 MemoryUpdate kind = MemoryUpdate::routing) {
  if (prev.empty()) {
    throw SequencingError("update_memory: no previous segment has been processed");
  }
  if (prev.hidden.size() < state.levels.size()) {
    throw DimensionError("update_memory: cache has fewer levels than memory");
  }
  MemoryState next;
  next.levels.reserve(state.levels.size());
  for (std::size_t l = 0; l < state.levels.size(); ++l) {
    if (kind == MemoryUpdate::fifo) {
      next.levels.push_back(fifo_update(state.levels[l], prev.hidden[l]));
    } else {
      Tape tape(false);
      next.levels.push_back(
          abstract_memory(tape, state.levels[l], prev.hidden[l], params.at(l), iters).value());
    }
  }
  next.fused = state.fused + 1;
  return next;
}

}  // namespace dman
