#pragma once

#include "itsr/abi.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "itsr/dataset.hpp"
#include "itsr/model.hpp"
#include "itsr/trainer.hpp"

namespace itsr::inline ITSR_ABI {

/// Everything a training run depends on.
///
/// Text form is one `key = value` per line; `#` starts a comment. Keys:
///   manifest, val_manifest, out, split (e.g. "0.8,0.1,0.1"), nochange_keep,
///   fusion, fusion_stages, heads, head_dim, ffn_hidden, conv_kernel,
///   dropout, embed_dim (0: take from the data), head_hidden, head_output,
///   text_vocab, clip_style_kappa, train_text_encoder, batch_size, lr,
///   weight_decay, momentum, epochs, seed, batching.
struct RunConfig {
  RunConfig() { model.fusion.embed_dim = 0; }

  std::filesystem::path manifest;
  std::filesystem::path val_manifest;  // empty: split `manifest`
  std::filesystem::path out_dir;
  SplitFractions split;
  double nochange_keep = 0.15;
  ModelConfig model;
  TrainConfig train;

  /// Sets one key. ConfigError for an unknown key or a malformed value.
  void set(std::string_view key, std::string_view value);
  /// Resolved configuration in the text form, every key present.
  std::string to_text() const;
  /// Range checks across all sections.
  void validate() const;
};

using Setting = std::pair<std::string, std::string>;

/// Parses the text form. Errors carry the line number.
std::vector<Setting> parse_settings(std::string_view text);
std::vector<Setting> read_settings_file(const std::filesystem::path& path);

/// Defaults, then the optional file, then command-line overrides.
RunConfig resolve_run_config(const std::filesystem::path& file,
                             const std::vector<Setting>& overrides);

}  // namespace itsr
