#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "dman/autodiff.hpp"

namespace dman {

// Projection triple applied in row form: Q = H W_Q^T, K = C W_K^T, V = C W_V^T.
struct AttentionParams {
  Matrix query;
  Matrix key;
  Matrix value;
};

// One stacked layer owns both pathways: the segment-recurrent projections and
// the memory-reading projections.
struct AttentionLayerParams {
  AttentionParams recurrent;
  AttentionParams long_term;
};

// Previous segment's hidden states, tape-detached. hidden[0] is the embedded
// input of that segment and hidden[l] the output of recurrent layer l.
struct CachedState {
  std::vector<Matrix> hidden;
  std::int64_t segment_index = -1;

  bool empty() const { return hidden.empty(); }
};

struct BoundAttention {
  Var query;
  Var key;
  Var value;
};

inline BoundAttention bind(Tape& tape, const AttentionParams& p) {
  return {tape.parameter(p.query), tape.parameter(p.key), tape.parameter(p.value)};
}

// Bound as constants: the readout is differentiable in its inputs but not in
// the projection weights.
inline BoundAttention bind_frozen(Tape& tape, const AttentionParams& p) {
  return {tape.frozen(p.query), tape.frozen(p.key), tape.frozen(p.value)};
}

struct AttentionOptions {
  bool scale_logits = true;
  // Incremented by the number of query-key scores evaluated.
  std::size_t* score_counter = nullptr;
};

// Keys are laid out as [context rows; current rows]. Query t sees every
// context row and current rows 0..t.
inline BoolMatrix causal_mask(Index t_len, Index context_len) {
  if (t_len < 1) throw ValidationError("causal_mask: segment length must be >= 1");
  BoolMatrix mask(t_len, context_len + t_len);
  for (Index t = 0; t < t_len; ++t) {
    for (Index j = 0; j < context_len; ++j) mask(t, j) = true;
    for (Index j = 0; j < t_len; ++j) mask(t, context_len + j) = j <= t;
  }
  return mask;
}

namespace detail {
inline Var attend(Var q, Var k, Var v, const BoolMatrix* mask, const AttentionOptions& opt) {
  Var logits = matmul_nt(q, k);
  if (opt.scale_logits) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(q.cols())));
  if (opt.score_counter != nullptr) {
    *opt.score_counter += static_cast<std::size_t>(logits.rows() * logits.cols());
  }
  return matmul(softmax_rows(logits, mask), v);
}
}  // namespace detail

// Segment-recurrent causal self-attention. context is the previous segment's
// hidden state at the same depth (empty for the first segment); it enters as a
// constant so no gradient reaches it.
inline Var recurrent_attention_layer(Var input, const Matrix& context, const BoundAttention& p,
                                     const AttentionOptions& opt = {}) {
  const Index t_len = input.rows();
  const Index c_len = context.rows();
  if (c_len != 0 && (c_len != t_len || context.cols() != input.cols())) {
    throw DimensionError("recurrent_attention_layer: context " + shape_str(context) +
                         " for segment " + shape_str(input.value()));
  }
  Tape& tape = input.tape();
  Var kv = c_len == 0 ? input : row_concat(tape.constant(context), input);
  const BoolMatrix mask = causal_mask(t_len, c_len);
  return detail::attend(matmul_nt(input, p.query), matmul_nt(kv, p.key), matmul_nt(kv, p.value),
                        &mask, opt);
}

// Long-term readout: queries from the segment, keys and values from the m
// memory slots. No mask, slots are unordered.
inline Var long_term_attention_layer(Var query_input, Var memory, const BoundAttention& p,
                                     const AttentionOptions& opt = {}) {
  if (memory.rows() == 0) {
    throw EmptyMemoryError("long_term_attention_layer: memory has no slots");
  }
  if (memory.cols() != query_input.cols()) {
    throw DimensionError("long_term_attention_layer: memory " + shape_str(memory.value()) +
                         " for queries " + shape_str(query_input.value()));
  }
  return detail::attend(matmul_nt(query_input, p.query), matmul_nt(memory, p.key),
                        matmul_nt(memory, p.value), nullptr, opt);
}

}  // namespace dman
