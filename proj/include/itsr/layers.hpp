#pragma once

#include "itsr/abi.hpp"

#include <string>
#include <vector>

#include "itsr/ops.hpp"
#include "itsr/rng.hpp"
#include "itsr/tensor.hpp"

namespace itsr::inline ITSR_ABI {

/// Trainable tensor with a stable name used for checkpoints and optimizer
/// state. `decay` says whether weight decay applies to it.
struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay = true;
};

struct BatchNormRef {
  std::string name;
  BatchNorm* norm;
};

struct ParamCollector {
  std::vector<ParamRef> params;
  std::vector<BatchNormRef> norms;

  void add(std::string name, const Tensor& t, bool decay = true) {
    params.push_back({std::move(name), t, decay});
  }
  /// Registers the running statistics and the (non-decayed) affine terms.
  void add_norm(const std::string& name, BatchNorm& bn) {
    norms.push_back({name, &bn});
    add(name + ".gamma", bn.gamma, false);
    add(name + ".beta", bn.beta, false);
  }
};

/// Tensor of `shape` filled with U(-bound, bound) and marked trainable.
Tensor uniform_param(Shape shape, double bound, Rng& rng);

/// y = x W (+ b). W: [in x out]. Initialised U(+-1/sqrt(in)).
struct Linear {
  Tensor weight;
  Tensor bias;  // empty when constructed without a bias
  bool has_bias = false;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);

  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  void collect(const std::string& prefix, ParamCollector& out) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t width);

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void collect(const std::string& prefix, ParamCollector& out) const;
};

}  // namespace itsr
