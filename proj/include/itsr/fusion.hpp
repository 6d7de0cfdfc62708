#pragma once

#include "itsr/abi.hpp"

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "itsr/layers.hpp"
#include "itsr/ops.hpp"

namespace itsr::inline ITSR_ABI {

enum class FusionStrategy { GffSubtract, GffConcat, Tff };

/// Accepts "gff-sub", "gff-concat", "tff"; ConfigError lists them otherwise.
FusionStrategy parse_fusion_strategy(std::string_view name);
std::string to_string(FusionStrategy strategy);

struct FusionConfig {
  FusionStrategy strategy = FusionStrategy::Tff;
  std::size_t embed_dim = 32;   // d_E
  std::size_t heads = 4;        // n
  std::size_t head_dim = 0;     // d; 0 means embed_dim / heads
  std::size_t stages = 3;       // l
  std::size_t ffn_hidden = 0;   // 0 means 2 * embed_dim
  std::size_t conv_kernel = 3;
  double dropout = 0.1;

  std::size_t d() const { return head_dim ? head_dim : embed_dim / heads; }
  std::size_t hidden() const { return ffn_hidden ? ffn_hidden : 2 * embed_dim; }
  /// Length of the fused vector for this strategy.
  std::size_t fused_dim() const;
  /// Throws ConfigError for inconsistent extents.
  void validate() const;
};

// --- global feature fusion ---------------------------------------------------

/// cls_t2 - cls_t1. Works row-wise on [G x d_E] batches.
Tensor gff_subtract(const Tensor& cls_t1, const Tensor& cls_t2);
/// [cls_t2 | cls_t1] along the feature axis.
Tensor gff_concat(const Tensor& cls_t1, const Tensor& cls_t2);

// --- transformer fusion ------------------------------------------------------

/// Per-head projections stored side by side: column block k of wq/wk/wv is
/// the projection of head k.
struct AttentionParams {
  Tensor wq, wk, wv;  // [d_E x n*d]
  Tensor wo;          // [n*d x d_E]
  std::size_t heads = 1;

  AttentionParams() = default;
  AttentionParams(std::size_t embed_dim, std::size_t heads, std::size_t head_dim, Rng& rng);
  void collect(const std::string& prefix, ParamCollector& out) const;
};

struct StreamUpdateParams {
  AttentionParams attention;
  LayerNormParams norm1;
  Linear ffn1, ffn2;
  LayerNormParams norm2;

  StreamUpdateParams() = default;
  StreamUpdateParams(const FusionConfig& config, Rng& rng);
  void collect(const std::string& prefix, ParamCollector& out) const;
};

/// Three convolutions over the token axis, each followed by batch norm and
/// dropout (ReLU after the first two).
struct ResidualConvBlock {
  std::array<Tensor, 3> kernels;  // [2d x 2d x k]
  std::array<BatchNorm, 3> norms;

  ResidualConvBlock() = default;
  ResidualConvBlock(std::size_t channels, std::size_t kernel, Rng& rng);
  void collect(const std::string& prefix, ParamCollector& out);
};

struct FusionStageParams {
  StreamUpdateParams update;
  Tensor to_head_space;  // [d_E x d], shared by both streams
  ResidualConvBlock residual;
  LayerNormParams norm;

  FusionStageParams() = default;
  FusionStageParams(const FusionConfig& config, Rng& rng);
  void collect(const std::string& prefix, ParamCollector& out);
};

struct TffParams {
  FusionConfig config;
  std::vector<FusionStageParams> stages;

  TffParams() = default;
  TffParams(const FusionConfig& config, Rng& rng);
  void collect(const std::string& prefix, ParamCollector& out);
};

/// s = p_t2 - p_t1.
Tensor tff_difference(const Tensor& p_t1, const Tensor& p_t2);

/// Heads attend from the stream (queries) to the difference s (keys and
/// values); concatenated heads are projected by wo. Inputs are token-major
/// batches of sequences with `tokens` rows each.
Tensor multi_head_cross_attention(const Tensor& stream, const Tensor& s,
                                  const AttentionParams& params, std::size_t tokens);

/// f' = LN(f + MultiHead(f, s)); f'' = LN(f' + g(f')).
Tensor tff_stream_update(const Tensor& stream, const Tensor& s,
                         const StreamUpdateParams& params, std::size_t tokens);

/// r(x) for a token-major batch [(G*T) x 2d].
Tensor residual_conv(const Tensor& x, ResidualConvBlock& block, std::size_t tokens,
                     double dropout_rate, Rng& rng, Mode mode);

/// c = [f_t1 | f_t2]; LN(c + prev + r(c + prev)).
Tensor tff_fusion_stage(const Tensor& f_t1, const Tensor& f_t2, const Tensor& prev,
                        FusionStageParams& stage, std::size_t tokens,
                        double dropout_rate, Rng& rng, Mode mode);

/// Full transformer fusion of patch sequences p_t1, p_t2 [(G*T) x d_E] into
/// [G x 2d]: difference, l stages of stream updates and residual fusion
/// starting from a zero matrix, then a mean over tokens.
Tensor tff_fuse(const Tensor& p_t1, const Tensor& p_t2, TffParams& params,
                std::size_t tokens, Rng& rng, Mode mode);

}  // namespace itsr
