#pragma once

#include "itsr/abi.hpp"

#include <string>

#include "itsr/layers.hpp"

namespace itsr::inline ITSR_ABI {

inline constexpr std::size_t kHeadHidden = 256;
inline constexpr std::size_t kHeadOutput = 128;

/// linear -> ReLU -> linear, mapping fused image or text features into the
/// shared retrieval space.
struct ProjectionHead {
  Linear hidden;
  Linear output;

  ProjectionHead() = default;
  ProjectionHead(std::size_t in, Rng& rng, std::size_t hidden_width = kHeadHidden,
                 std::size_t out_width = kHeadOutput);

  std::size_t in_features() const { return hidden.in_features(); }
  std::size_t out_features() const { return output.out_features(); }
  void collect(const std::string& prefix, ParamCollector& out) const;
};

/// Rows of f [G x d_in] (or a single vector [d_in]) through the head.
Tensor project(const ProjectionHead& head, const Tensor& f);

/// a.b / (|a||b|); DomainError if either vector has zero norm.
double cosine_similarity(std::span<const Real> a, std::span<const Real> b);

/// ln(1/0.07): the sharpness of a CLIP-style temperature of 0.07.
inline constexpr double kClipStyleKappa = 2.659260036932778;
inline constexpr double kLiteralKappa = 0.07;
inline constexpr double kKappaLimit = 5.0;

struct ContrastiveLoss {
  Tensor image_to_text;  // L_xy
  Tensor text_to_image;  // L_yx
  Tensor total;          // L_C
};

/// S_ij = cos(fx_i, fy_j) * exp(kappa). L_xy is the mean cross entropy of
/// the rows of S against the diagonal, L_yx the same over S^T, and
/// L_C = (L_xy + L_yx) / 2. A zero-norm row throws DomainError naming it.
ContrastiveLoss contrastive_loss(const Tensor& fx, const Tensor& fy, const Tensor& kappa);

}  // namespace itsr
