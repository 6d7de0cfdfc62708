#pragma once

#include "itsr/abi.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "itsr/tensor.hpp"

// Deterministic stand-ins for pretrained vision and text encoders. They are
// fixed random feature maps, useful as a reproducible test substrate; they do
// not carry any learned semantics.
namespace itsr::inline ITSR_ABI {

/// Sinusoidal position offsets [tokens x dim].
Tensor sinusoidal_positions(std::size_t tokens, std::size_t dim);

struct EncodedSequence {
  Tensor cls;     // [d_E]
  Tensor tokens;  // [T x d_E]
};

inline constexpr double kImagePositionScale = 0.7;
inline constexpr double kTextPositionScale = 0.1;

/// Non-overlapping patch flattening, frozen random projection, scaled
/// sinusoidal position offsets: patches = x P + a*pos. The class vector is
/// sum_t tanh(patch_t) / sqrt(T); the squashing lets it depend on where
/// content sits, and the sqrt(T) normalisation keeps a single changed patch
/// visible at any T.
class ToyImageEncoder {
 public:
  ToyImageEncoder(std::size_t channels, std::size_t patch, std::size_t dim,
                  std::uint64_t seed, double position_scale = kImagePositionScale);

  /// image: [c x h x w]; h and w must be multiples of the patch size.
  EncodedSequence encode(const Tensor& image) const;

  std::size_t dim() const { return dim_; }
  std::size_t patch() const { return patch_; }

 private:
  std::size_t channels_, patch_, dim_;
  double position_scale_;
  Tensor projection_;  // [(c*patch*patch) x dim]
};

/// Hashed-vocabulary embedding table plus small position offsets.
/// tokens_i = tanh(E[bucket(w_i)] + a*pos_i); cls = mean of tokens.
class ToyTextEncoder {
 public:
  ToyTextEncoder(std::size_t vocab, std::size_t dim, std::uint64_t seed,
                 double position_scale = kTextPositionScale);

  std::size_t bucket(const std::string& word) const;
  EncodedSequence encode(std::span<const std::string> words) const;

  /// Class vectors for a batch of sentences [n x dim]; differentiable with
  /// respect to table() when it requires a gradient.
  Tensor encode_batch(std::span<const std::vector<std::string>> sentences) const;

  Tensor& table() { return table_; }
  const Tensor& table() const { return table_; }
  std::size_t vocab() const { return vocab_; }
  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::size_t vocab_, dim_;
  std::uint64_t seed_;
  double position_scale_;
  Tensor table_;  // [vocab x dim]
};

}  // namespace itsr
