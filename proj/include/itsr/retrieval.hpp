#pragma once

#include "itsr/abi.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "itsr/dataset.hpp"
#include "itsr/model.hpp"

namespace itsr::inline ITSR_ABI {

/// Rows of projected features with their pair ids. Text archives also carry
/// the caption each row encodes.
struct RetrievalArchive {
  std::vector<std::string> ids;
  Tensor features;                    // [N x k]
  std::vector<double> norms;          // Euclidean norm of each row
  std::vector<std::string> captions;  // empty for image archives
  std::vector<bool> change;

  std::size_t size() const { return ids.size(); }

  /// Validates extents and rejects zero-norm rows (DomainError naming the id).
  static RetrievalArchive from_rows(std::vector<std::string> ids, Tensor features,
                                    std::vector<std::string> captions,
                                    std::vector<bool> change);
};

struct Hit {
  std::size_t row;
  std::string id;
  double score;
};

/// Ranks archive rows by cosine similarity to q, highest first; equal scores
/// rank by ascending id, then row. Rows whose id equals `exclude_id` are
/// skipped. k larger than the candidate count returns all candidates.
/// ConfigError for k = 0, StateError for an empty archive, DomainError for a
/// zero-norm query.
std::vector<Hit> query_topk(const RetrievalArchive& archive, std::span<const Real> q,
                            std::size_t k, std::optional<std::string_view> exclude_id = {});

/// Cosine similarity matrix [queries x rows] in row-major order.
std::vector<double> cosine_matrix(const Tensor& queries, const RetrievalArchive& archive);

enum class Modality { Image, Text };

/// Eval-mode projected features for a dataset: one image row per pair and
/// one text row per caption (pair-major, caption-minor).
struct FeatureBank {
  Tensor images;  // [N x k]
  Tensor texts;   // [5N x k]
};

FeatureBank compute_features(Model& model, const std::vector<BitemporalSample>& samples);

/// Image archive (one row per pair) or text archive (one row per caption).
RetrievalArchive build_archive(Model& model, const std::vector<BitemporalSample>& samples,
                               Modality modality);
RetrievalArchive archive_from_bank(const FeatureBank& bank,
                                   const std::vector<BitemporalSample>& samples,
                                   Modality modality);

enum class Task { TextToImage, ImageToText };
enum class Scope { Full, Change, NoChange };

std::string to_string(Task task);
std::string to_string(Scope scope);
Task parse_task(std::string_view name);
Scope parse_scope(std::string_view name);
bool in_scope(Scope scope, bool change);

struct LooOptions {
  Task task = Task::TextToImage;
  Scope scope = Scope::Full;
  std::size_t rounds = 5;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  /// Image-to-text only: archive every caption of the other pairs instead of
  /// the one sampled per pair for the round.
  bool all_captions = false;
};

struct RetrievedItem {
  std::string id;
  double score;
  std::string caption;  // image-to-text: the retrieved caption
};

struct QueryResult {
  std::size_t round;
  std::string query_id;
  std::string query_text;  // text-to-image: the sampled query caption
  std::size_t archive_size;
  std::vector<RetrievedItem> retrieved;
};

struct LooResult {
  LooOptions options;
  std::vector<QueryResult> queries;  // round-major, then manifest order
};

/// Caption index sampled for every pair in a round (shared by both tasks).
std::vector<std::size_t> sample_round_captions(std::size_t pair_count,
                                               std::uint64_t seed, std::size_t round);

/// Each in-scope pair queries the archive built from all other pairs.
/// ConfigError for fewer than two pairs; an empty scope yields no queries.
LooResult leave_one_out_eval(const FeatureBank& bank,
                             const std::vector<BitemporalSample>& samples,
                             const LooOptions& options);
LooResult leave_one_out_eval(Model& model, const std::vector<BitemporalSample>& samples,
                             const LooOptions& options);

/// One JSON line per query: {round, query_id, task, scope, retrieved:
/// [{id, score}]}, plus query_text / caption where applicable.
void write_results_jsonl(const std::filesystem::path& path, const LooResult& result);

}  // namespace itsr
