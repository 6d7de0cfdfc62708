#pragma once

#include "itsr/abi.hpp"

#include <cstddef>
#include <span>
#include <vector>

#include "itsr/rng.hpp"
#include "itsr/tensor.hpp"

// Differentiable operations. Each op records a backward rule on the active
// tape when any input requires a gradient; otherwise it is plain evaluation.
//
// Sequence data is token-major: a batch of G sequences of T tokens with c
// channels is a [(G*T) x c] matrix, and ops that must respect sequence
// boundaries take the tokens-per-sequence count explicitly.
namespace itsr::inline ITSR_ABI {

enum class Mode { Train, Eval };

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x[m x n] + bias[n] on every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x * c for a constant c.
Tensor scale(const Tensor& x, Real c);
/// x * s for a one-element tensor s (gradient flows into s).
Tensor mul_scalar(const Tensor& x, const Tensor& s);

Tensor exp(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
/// Inverted dropout: zeroes with probability `rate` and rescales survivors
/// by 1/(1-rate) in Train mode; identity in Eval mode or at rate 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng, Mode mode);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& x);

/// Per-row standardisation (population variance) followed by gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Real eps = Real(1e-5));

/// Batch normalisation over the rows of x [N x c] (N = batch*T), per channel.
struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
  std::size_t batches_seen = 0;
  Real momentum = Real(0.1);
  Real eps = Real(1e-5);

  explicit BatchNorm(std::size_t channels = 1);
  std::size_t channels() const { return running_mean.size(); }
};

/// Train mode normalises with batch statistics and updates the running
/// estimates; Eval mode uses the running estimates and throws StateError if
/// none have been accumulated.
Tensor batch_norm(const Tensor& x, BatchNorm& bn, Mode mode);

/// Cross-correlation along the token axis.
/// x: [(G*T) x c_in], kernels: [c_out x c_in x k]; zero padding is applied
/// per sequence so tokens never mix across sequence boundaries. Output has
/// T' = T + 2*padding - k + 1 tokens per sequence.
Tensor conv1d_tokens(const Tensor& x, const Tensor& kernels, std::size_t padding,
                     std::size_t tokens_per_seq);

/// [a | b] along the last axis.
Tensor concat_cols(const Tensor& a, const Tensor& b);
/// Stacks equally sized vectors (or 1 x n rows) into an [count x n] matrix.
Tensor stack_rows(std::span<const Tensor> rows);
/// Mean over each sequence: [(G*T) x c] -> [G x c].
Tensor mean_pool_tokens(const Tensor& x, std::size_t tokens_per_seq);
/// Mean over variable-length segments; offsets has G+1 entries.
Tensor segment_mean(const Tensor& x, std::span<const std::size_t> offsets);
/// Rows of table [V x d] selected by indices -> [indices.size() x d].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);
/// Untracked-safe reshape that keeps the gradient path.
Tensor reshape(const Tensor& x, Shape shape);

/// Rows scaled to unit Euclidean norm. A zero row throws DomainError naming
/// its index.
Tensor l2_normalize_rows(const Tensor& x);

/// mean_i( logsumexp(S_i) - S_ii ) for a square logit matrix S.
Tensor diagonal_cross_entropy(const Tensor& logits);

/// softmax(Q K^T / sqrt(d)) V for single sequences Q [Tq x d], K, V [Tk x d].
/// Composed from the primitive ops.
Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Fused multi-sequence, multi-head cross attention.
/// q: [(G*Tq) x (h*d)], k, v: [(G*Tk) x (h*d)]. For each sequence g and head
/// j the column block j of width d is attended independently; outputs are
/// laid out like q (heads concatenated along columns).
Tensor block_cross_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             std::size_t heads, std::size_t q_tokens,
                             std::size_t kv_tokens);

}  // namespace itsr
