#include "itsr/heads.hpp"

#include <cmath>

#include "itsr/errors.hpp"
#include "itsr/kernels.hpp"

namespace itsr::inline ITSR_ABI {

ProjectionHead::ProjectionHead(std::size_t in, Rng& rng, std::size_t hidden_width,
                               std::size_t out_width)
    : hidden(in, hidden_width, rng), output(hidden_width, out_width, rng) {}

void ProjectionHead::collect(const std::string& prefix, ParamCollector& out) const {
  hidden.collect(prefix + ".hidden", out);
  output.collect(prefix + ".output", out);
}

Tensor project(const ProjectionHead& head, const Tensor& f) {
  const bool vector = f.rank() == 1;
  const Tensor x = vector ? reshape(f, {1, f.dim(0)}) : f;
  if (x.rank() != 2 || x.dim(1) != head.in_features()) {
    throw ShapeError("projection head expects width " +
                     std::to_string(head.in_features()) + ", got " +
                     shape_string(f.shape()));
  }
  Tensor y = head.output(relu(head.hidden(x)));
  return vector ? reshape(y, {head.out_features()}) : y;
}

double cosine_similarity(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: lengths " + std::to_string(a.size()) +
                     " and " + std::to_string(b.size()));
  }
  const double na = kernels::l2_norm(a), nb = kernels::l2_norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw DomainError("cosine_similarity of a zero-norm vector");
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += static_cast<double>(a[i]) * b[i];
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

ContrastiveLoss contrastive_loss(const Tensor& fx, const Tensor& fy, const Tensor& kappa) {
  if (fx.rank() != 2 || fx.shape() != fy.shape()) {
    throw ShapeError("contrastive_loss: features " + shape_string(fx.shape()) +
                     " and " + shape_string(fy.shape()) + " must be equal [b x k]");
  }
  if (kappa.numel() != 1) throw ShapeError("contrastive_loss: kappa must be a scalar");
  Tensor nx, ny;
  try {
    nx = l2_normalize_rows(fx);
  } catch (const DomainError& e) {
    throw DomainError(std::string("image features: ") + e.what());
  }
  try {
    ny = l2_normalize_rows(fy);
  } catch (const DomainError& e) {
    throw DomainError(std::string("text features: ") + e.what());
  }
  Tensor logits = mul_scalar(matmul(nx, transpose(ny)), exp(kappa));
  Tensor xy = diagonal_cross_entropy(logits);
  Tensor yx = diagonal_cross_entropy(transpose(logits));
  return {xy, yx, scale(add(xy, yx), Real(0.5))};
}

}  // namespace itsr
