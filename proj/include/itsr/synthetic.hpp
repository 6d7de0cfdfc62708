#pragma once

#include "itsr/abi.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "itsr/dataset.hpp"

// Small block-world change dataset: each pair is two grid images where the
// second differs from the first by at most one coloured block, captioned by
// templates describing the edit.
namespace itsr::inline ITSR_ABI {

enum class EditKind { Add, Remove, None };

struct BlockEdit {
  EditKind kind = EditKind::None;
  std::size_t color = 0;
  std::size_t row = 0;
  std::size_t col = 0;

  /// The edit that undoes this one (add <-> remove at the same block).
  BlockEdit reversed() const;
};

inline constexpr std::array<const char*, 4> kBlockColors{"red", "green", "blue", "yellow"};

struct SyntheticConfig {
  std::size_t pairs = 16;
  std::size_t grid = 4;          // cells per side; one patch per cell
  std::uint64_t seed = 0;
  std::size_t embed_dim = 32;
  std::size_t cell_pixels = 4;
  double nochange_fraction = 0.1;
  double background_density = 0.3;
};

/// "north west", "southmost east", ... for a cell of a grid. Every cell of
/// grids up to 4x4 gets a distinct set of words.
std::string location_phrase(std::size_t row, std::size_t col, std::size_t grid);

/// Five paraphrases describing an edit.
std::array<std::string, kCaptionsPerPair> edit_captions(const BlockEdit& edit,
                                                        std::size_t grid);

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<BlockEdit> edits;  // parallel to manifest.entries
  std::filesystem::path manifest_path;
};

/// Writes manifest.jsonl and emb/<id>_t{1,2}.tsre under `out_dir`. Output is
/// a pure function of the config.
SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& config,
                                            const std::filesystem::path& out_dir);

}  // namespace itsr
