#pragma once

#include "itsr/abi.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "itsr/dataset.hpp"
#include "itsr/encoders.hpp"
#include "itsr/fusion.hpp"
#include "itsr/heads.hpp"

namespace itsr::inline ITSR_ABI {

struct ModelConfig {
  FusionConfig fusion;
  std::size_t head_hidden = kHeadHidden;
  std::size_t head_output = kHeadOutput;
  std::size_t text_vocab = 4096;
  bool clip_style_kappa = false;
  bool train_text_encoder = false;
  std::uint64_t seed = 0;

  double initial_kappa() const { return clip_style_kappa ? kClipStyleKappa : kLiteralKappa; }
};

/// Everything that is trained or needed to reproduce a forward pass: fusion
/// parameters (empty for the global strategies), both projection heads, the
/// temperature and the text encoder table.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  FusionStrategy strategy() const { return config_.fusion.strategy; }

  /// Fused and projected image-pair features [G x out].
  Tensor encode_images(std::span<const BitemporalSample* const> pairs, Rng& rng, Mode mode);
  /// Fused features before the head [G x fused_dim].
  Tensor fuse(std::span<const BitemporalSample* const> pairs, Rng& rng, Mode mode);
  /// Projected sentence features [G x out].
  Tensor encode_texts(std::span<const std::vector<std::string>> sentences);

  /// Trainable parameters (respecting the text encoder freeze flag).
  std::vector<ParamRef> trainable();
  /// Every tensor that a checkpoint must carry, plus the batch norms.
  ParamCollector state();

  Tensor& kappa() { return kappa_; }
  /// Keeps kappa inside [-kKappaLimit, kKappaLimit].
  void clamp_kappa();

  TffParams& tff() { return tff_; }
  ProjectionHead& image_head() { return image_head_; }
  ProjectionHead& text_head() { return text_head_; }
  ToyTextEncoder& text_encoder() { return text_encoder_; }

 private:
  ModelConfig config_;
  TffParams tff_;
  ProjectionHead image_head_;
  ProjectionHead text_head_;
  Tensor kappa_;
  ToyTextEncoder text_encoder_;
};

/// Checkpoint contents beyond the model itself.
struct TrainingProgress {
  std::uint64_t epochs_done = 0;
  std::map<std::string, std::vector<Real>> velocities;
};

inline constexpr std::uint16_t kTsrcVersion = 1;

/// "TSRC" | u16 version | u32 record count | records of
/// (u32 name length, name, u32 rank, u32 dims[rank], f32 payload).
void save_checkpoint(const std::filesystem::path& path, Model& model,
                     const TrainingProgress& progress = {});

struct LoadedCheckpoint {
  Model model;
  TrainingProgress progress;
};

/// Rebuilds the model from the stored configuration.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// As above, but rejects a checkpoint whose architecture differs from
/// `expected` (ConfigError naming the first differing field).
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const ModelConfig& expected);

/// Reads only the stored configuration.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace itsr
