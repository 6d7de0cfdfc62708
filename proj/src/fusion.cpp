#include "itsr/fusion.hpp"

#include <cmath>

#include "itsr/errors.hpp"

namespace itsr::inline ITSR_ABI {

FusionStrategy parse_fusion_strategy(std::string_view name) {
  if (name == "gff-sub") return FusionStrategy::GffSubtract;
  if (name == "gff-concat") return FusionStrategy::GffConcat;
  if (name == "tff") return FusionStrategy::Tff;
  throw ConfigError("unknown fusion strategy '" + std::string(name) +
                    "' (expected one of: gff-sub, gff-concat, tff)");
}

std::string to_string(FusionStrategy strategy) {
  switch (strategy) {
    case FusionStrategy::GffSubtract: return "gff-sub";
    case FusionStrategy::GffConcat: return "gff-concat";
    case FusionStrategy::Tff: return "tff";
  }
  return "?";
}

std::size_t FusionConfig::fused_dim() const {
  switch (strategy) {
    case FusionStrategy::GffSubtract: return embed_dim;
    case FusionStrategy::GffConcat: return 2 * embed_dim;
    case FusionStrategy::Tff: return 2 * d();
  }
  return 0;
}

void FusionConfig::validate() const {
  if (embed_dim == 0) throw ConfigError("embedding width must be positive");
  if (strategy != FusionStrategy::Tff) return;
  if (heads == 0 || stages == 0) throw ConfigError("heads and fusion stages must be >= 1");
  if (d() == 0) {
    throw ConfigError("head width is zero: embedding width " + std::to_string(embed_dim) +
                      " with " + std::to_string(heads) + " heads");
  }
  if (conv_kernel % 2 == 0) throw ConfigError("conv kernel size must be odd");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

Tensor gff_subtract(const Tensor& cls_t1, const Tensor& cls_t2) {
  if (cls_t1.shape() != cls_t2.shape()) {
    throw ShapeError("gff_subtract: " + shape_string(cls_t1.shape()) + " vs " +
                     shape_string(cls_t2.shape()));
  }
  return sub(cls_t2, cls_t1);
}

Tensor gff_concat(const Tensor& cls_t1, const Tensor& cls_t2) {
  if (cls_t1.shape() != cls_t2.shape()) {
    throw ShapeError("gff_concat: " + shape_string(cls_t1.shape()) + " vs " +
                     shape_string(cls_t2.shape()));
  }
  return concat_cols(cls_t2, cls_t1);
}

AttentionParams::AttentionParams(std::size_t embed_dim, std::size_t n,
                                 std::size_t head_dim, Rng& rng)
    : heads(n) {
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  wq = uniform_param({embed_dim, n * head_dim}, in_bound, rng);
  wk = uniform_param({embed_dim, n * head_dim}, in_bound, rng);
  wv = uniform_param({embed_dim, n * head_dim}, in_bound, rng);
  wo = uniform_param({n * head_dim, embed_dim},
                     1.0 / std::sqrt(static_cast<double>(n * head_dim)), rng);
}

void AttentionParams::collect(const std::string& prefix, ParamCollector& out) const {
  out.add(prefix + ".wq", wq);
  out.add(prefix + ".wk", wk);
  out.add(prefix + ".wv", wv);
  out.add(prefix + ".wo", wo);
}

StreamUpdateParams::StreamUpdateParams(const FusionConfig& c, Rng& rng)
    : attention(c.embed_dim, c.heads, c.d(), rng),
      norm1(c.embed_dim),
      ffn1(c.embed_dim, c.hidden(), rng),
      ffn2(c.hidden(), c.embed_dim, rng),
      norm2(c.embed_dim) {}

void StreamUpdateParams::collect(const std::string& prefix, ParamCollector& out) const {
  attention.collect(prefix + ".attention", out);
  norm1.collect(prefix + ".norm1", out);
  ffn1.collect(prefix + ".ffn1", out);
  ffn2.collect(prefix + ".ffn2", out);
  norm2.collect(prefix + ".norm2", out);
}

ResidualConvBlock::ResidualConvBlock(std::size_t channels, std::size_t kernel, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels * kernel));
  for (std::size_t i = 0; i < 3; ++i) {
    kernels[i] = uniform_param({channels, channels, kernel}, bound, rng);
    norms[i] = BatchNorm(channels);
    norms[i].gamma.set_requires_grad();
    norms[i].beta.set_requires_grad();
  }
}

void ResidualConvBlock::collect(const std::string& prefix, ParamCollector& out) {
  for (std::size_t i = 0; i < 3; ++i) {
    out.add(prefix + ".conv" + std::to_string(i), kernels[i]);
    out.add_norm(prefix + ".bn" + std::to_string(i), norms[i]);
  }
}

FusionStageParams::FusionStageParams(const FusionConfig& c, Rng& rng)
    : update(c, rng),
      to_head_space(uniform_param({c.embed_dim, c.d()},
                                  1.0 / std::sqrt(static_cast<double>(c.embed_dim)), rng)),
      residual(2 * c.d(), c.conv_kernel, rng),
      norm(2 * c.d()) {}

void FusionStageParams::collect(const std::string& prefix, ParamCollector& out) {
  update.collect(prefix + ".update", out);
  out.add(prefix + ".to_head_space", to_head_space);
  residual.collect(prefix + ".residual", out);
  norm.collect(prefix + ".norm", out);
}

TffParams::TffParams(const FusionConfig& c, Rng& rng) : config(c) {
  c.validate();
  for (std::size_t i = 0; i < c.stages; ++i) stages.emplace_back(c, rng);
}

void TffParams::collect(const std::string& prefix, ParamCollector& out) {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stages[i].collect(prefix + ".stage" + std::to_string(i), out);
  }
}

Tensor tff_difference(const Tensor& p_t1, const Tensor& p_t2) {
  if (p_t1.shape() != p_t2.shape()) {
    throw ShapeError("tff_difference: " + shape_string(p_t1.shape()) + " vs " +
                     shape_string(p_t2.shape()));
  }
  return sub(p_t2, p_t1);
}

Tensor multi_head_cross_attention(const Tensor& stream, const Tensor& s,
                                  const AttentionParams& p, std::size_t tokens) {
  const std::size_t width = p.wq.dim(1);
  if (p.wo.dim(0) != width || p.wk.dim(1) != width || p.wv.dim(1) != width) {
    throw ConfigError("attention output projection expects " +
                      std::to_string(p.wo.dim(0)) + " inputs but heads provide " +
                      std::to_string(width));
  }
  Tensor heads = block_cross_attention(matmul(stream, p.wq), matmul(s, p.wk),
                                       matmul(s, p.wv), p.heads, tokens, tokens);
  return matmul(heads, p.wo);
}

Tensor tff_stream_update(const Tensor& stream, const Tensor& s,
                         const StreamUpdateParams& p, std::size_t tokens) {
  Tensor f1 = p.norm1(add(stream, multi_head_cross_attention(stream, s, p.attention, tokens)));
  return p.norm2(add(f1, p.ffn2(relu(p.ffn1(f1)))));
}

Tensor residual_conv(const Tensor& x, ResidualConvBlock& block, std::size_t tokens,
                     double dropout_rate, Rng& rng, Mode mode) {
  Tensor h = x;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t pad = (block.kernels[i].dim(2) - 1) / 2;
    h = batch_norm(conv1d_tokens(h, block.kernels[i], pad, tokens), block.norms[i], mode);
    if (i < 2) h = relu(h);
    h = dropout(h, dropout_rate, rng, mode);
  }
  return h;
}

Tensor tff_fusion_stage(const Tensor& f_t1, const Tensor& f_t2, const Tensor& prev,
                        FusionStageParams& stage, std::size_t tokens,
                        double dropout_rate, Rng& rng, Mode mode) {
  Tensor c = concat_cols(f_t1, f_t2);
  if (prev.shape() != c.shape()) {
    throw ShapeError("fusion stage: previous output " + shape_string(prev.shape()) +
                     " does not match " + shape_string(c.shape()));
  }
  Tensor x = add(c, prev);
  return stage.norm(add(x, residual_conv(x, stage.residual, tokens, dropout_rate, rng, mode)));
}

Tensor tff_fuse(const Tensor& p_t1, const Tensor& p_t2, TffParams& params,
                std::size_t tokens, Rng& rng, Mode mode) {
  const FusionConfig& c = params.config;
  if (p_t1.rank() != 2 || p_t1.dim(1) != c.embed_dim) {
    throw ShapeError("tff_fuse: patch tokens " + shape_string(p_t1.shape()) +
                     " do not have width " + std::to_string(c.embed_dim));
  }
  const Tensor s = tff_difference(p_t1, p_t2);
  Tensor f1 = p_t1, f2 = p_t2;
  Tensor fused({p_t1.dim(0), 2 * c.d()});
  for (auto& stage : params.stages) {
    f1 = tff_stream_update(f1, s, stage.update, tokens);
    f2 = tff_stream_update(f2, s, stage.update, tokens);
    fused = tff_fusion_stage(matmul(f1, stage.to_head_space),
                             matmul(f2, stage.to_head_space), fused, stage, tokens,
                             c.dropout, rng, mode);
  }
  return mean_pool_tokens(fused, tokens);
}

}  // namespace itsr
