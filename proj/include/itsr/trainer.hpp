#pragma once

#include "itsr/abi.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "itsr/dataset.hpp"
#include "itsr/model.hpp"
#include "itsr/optim.hpp"

namespace itsr::inline ITSR_ABI {

/// How (pair, caption) examples are grouped into mini-batches.
///  - Plain: all pair x caption examples shuffled together and cut into
///    batches, so a batch may hold the same pair twice.
///  - DistinctPairs: each of the five caption rounds takes one caption per
///    pair; pairs are shuffled and cut per round, so no pair repeats inside
///    a batch.
enum class BatchPolicy { Plain, DistinctPairs };

BatchPolicy parse_batch_policy(std::string_view name);
std::string to_string(BatchPolicy policy);

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr = 0.01;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  BatchPolicy batching = BatchPolicy::DistinctPairs;

  /// Throws ConfigError unless every knob is in range. lr = 0 is accepted
  /// as a dry run that reports losses without updating.
  void validate() const;
};

struct Example {
  std::size_t pair;
  std::size_t caption;
};

using Batch = std::vector<Example>;

/// Epoch-seeded batches over pair_count x 5 examples. A final batch of fewer
/// than two examples is dropped. ConfigError for an empty dataset.
std::vector<Batch> make_batches(std::size_t pair_count, std::size_t batch_size,
                                std::uint64_t seed, std::uint64_t epoch,
                                BatchPolicy policy = BatchPolicy::Plain);

/// Model plus optimiser state.
class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& config);

  /// One pass over the batches; returns the mean batch loss. Throws
  /// TrainingError carrying the batch index on a non-finite loss.
  double train_epoch(const std::vector<BitemporalSample>& samples,
                     const std::vector<Batch>& batches, std::uint64_t epoch);

  /// Loss, gradients and (when lr > 0) one optimiser step for one batch.
  double step(const std::vector<BitemporalSample>& samples, const Batch& batch, Rng& rng);

  std::vector<SgdSlot>& slots() { return slots_; }
  TrainingProgress progress(std::uint64_t epochs_done) const;
  void restore(const TrainingProgress& progress);

 private:
  Model& model_;
  TrainConfig config_;
  std::vector<SgdSlot> slots_;
};

struct Recall {
  double image_to_text = 0.0;
  double text_to_image = 0.0;
  double mean() const { return 0.5 * (image_to_text + text_to_image); }
};

/// Recall@1 with eval-mode features. Every caption of every pair is a text
/// query and a text archive row; a hit is a top-1 result belonging to the
/// query's own pair. Ties rank by ascending id.
Recall validate(Model& model, const std::vector<BitemporalSample>& samples);

/// Recall@k variant of validate().
Recall recall_at_k(Model& model, const std::vector<BitemporalSample>& samples,
                   std::size_t k);

struct EpochRecord {
  std::uint64_t epoch;
  double loss;
  Recall val;
  double kappa;
};

struct TrainRunOptions {
  std::filesystem::path out_dir;  // empty: no files written
  /// Optimiser state and epoch count of a checkpoint already loaded into
  /// the model.
  std::optional<TrainingProgress> resume;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainRunResult {
  std::vector<EpochRecord> history;
  Recall best_val;
  std::uint64_t best_epoch = 0;
};

/// Trains for config.epochs (continuing from a checkpoint when resuming).
/// With an out_dir, appends one JSON line per epoch to train_log.jsonl and
/// keeps best.tsrc (highest mean validation recall@1, earliest on ties) and
/// final.tsrc.
TrainRunResult train(Model& model, const TrainConfig& config,
                     const std::vector<BitemporalSample>& train_set,
                     const std::vector<BitemporalSample>& val_set,
                     const TrainRunOptions& options = {});

}  // namespace itsr
