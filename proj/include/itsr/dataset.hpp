#pragma once

#include "itsr/abi.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "itsr/tensor.hpp"

namespace itsr::inline ITSR_ABI {

inline constexpr std::size_t kCaptionsPerPair = 5;

/// Lowercase, drop punctuation, split on whitespace.
std::vector<std::string> tokenize(const std::string& sentence);

struct TextSample {
  std::string id;
  std::string text;
  std::vector<std::string> words;  // never empty

  static TextSample from_sentence(std::string id, std::string text);
};

struct BitemporalSample {
  std::string id;
  Tensor emb_t1;  // [T x d_E] patch tokens
  Tensor emb_t2;
  Tensor cls_t1;  // [d_E]
  Tensor cls_t2;
  std::array<TextSample, kCaptionsPerPair> captions;
  bool change = true;

  std::size_t tokens() const { return emb_t1.dim(0); }
  std::size_t dim() const { return emb_t1.dim(1); }
};

struct ManifestEntry {
  std::string id;
  std::array<std::string, kCaptionsPerPair> captions;
  std::filesystem::path emb_t1;
  std::filesystem::path emb_t2;
  bool change = true;
};

enum class Split { Train, Val, Test };

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::optional<Split> split;

  std::size_t size() const { return entries.size(); }
};

/// One JSON object per line: {"id", "captions": [5 strings], "emb_t1",
/// "emb_t2", "change"}. Relative embedding paths resolve against the
/// manifest's directory. Throws ParseError (with the line number) on a
/// malformed record or duplicate id and IoError for a missing file.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes entries in order; embedding paths are stored relative to the
/// manifest directory when they live below it.
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Splits an embedding file matrix into its class token (row 0) and patch
/// tokens (rows 1..T). Needs at least two rows.
std::pair<Tensor, Tensor> split_class_token(const Tensor& rows);

/// Reads every embedding file referenced by the manifest (files in parallel).
std::vector<BitemporalSample> load_samples(const DatasetManifest& manifest);

/// Per-pair validation shared by loaders: equal shapes, non-empty captions.
void validate_sample(const BitemporalSample& sample);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct SplitManifests {
  DatasetManifest train;
  DatasetManifest val;
  DatasetManifest test;
};

/// Seeded shuffle into train/val/test (counts rounded, test takes the rest);
/// then keeps floor(nochange_keep * count) of the no-change entries of the
/// training split, chosen by the same seed. Each split keeps manifest order.
SplitManifests split_and_subsample(const DatasetManifest& manifest,
                                   const SplitFractions& fractions,
                                   double nochange_keep, std::uint64_t seed);

/// Concatenation of manifests, e.g. validation + test for evaluation.
DatasetManifest merge_manifests(const std::vector<DatasetManifest>& parts);

}  // namespace itsr
