#include "itsr/layers.hpp"

#include <cmath>

namespace itsr::inline ITSR_ABI {

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
  t.set_requires_grad();
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias)
    : has_bias(with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = uniform_param({in, out}, bound, rng);
  if (with_bias) bias = uniform_param({out}, bound, rng);
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return has_bias ? add_bias(y, bias) : y;
}

void Linear::collect(const std::string& prefix, ParamCollector& out) const {
  out.add(prefix + ".weight", weight);
  if (has_bias) out.add(prefix + ".bias", bias);
}

LayerNormParams::LayerNormParams(std::size_t width)
    : gain({width}, Real(1)), bias({width}, Real(0)) {
  gain.set_requires_grad();
  bias.set_requires_grad();
}

void LayerNormParams::collect(const std::string& prefix, ParamCollector& out) const {
  out.add(prefix + ".gain", gain, false);
  out.add(prefix + ".bias", bias, false);
}

}  // namespace itsr
