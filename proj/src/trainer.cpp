#include "itsr/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "itsr/errors.hpp"
#include "itsr/retrieval.hpp"

namespace itsr::inline ITSR_ABI {

BatchPolicy parse_batch_policy(std::string_view name) {
  if (name == "plain") return BatchPolicy::Plain;
  if (name == "distinct-pairs") return BatchPolicy::DistinctPairs;
  throw ConfigError("unknown batching policy '" + std::string(name) +
                    "' (expected plain or distinct-pairs)");
}

std::string to_string(BatchPolicy policy) {
  return policy == BatchPolicy::Plain ? "plain" : "distinct-pairs";
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
}

std::vector<Batch> make_batches(std::size_t pair_count, std::size_t batch_size,
                                std::uint64_t seed, std::uint64_t epoch,
                                BatchPolicy policy) {
  if (pair_count == 0) throw ConfigError("cannot batch an empty dataset");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  Rng rng = Rng::stream(seed, "batches", epoch);
  std::vector<Batch> batches;
  auto cut = [&](const std::vector<Example>& examples) {
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
      const std::size_t end = std::min(examples.size(), start + batch_size);
      if (end - start < 2) break;
      batches.emplace_back(examples.begin() + static_cast<std::ptrdiff_t>(start),
                           examples.begin() + static_cast<std::ptrdiff_t>(end));
    }
  };
  if (policy == BatchPolicy::Plain) {
    std::vector<Example> all;
    for (std::size_t p = 0; p < pair_count; ++p)
      for (std::size_t c = 0; c < kCaptionsPerPair; ++c) all.push_back({p, c});
    shuffle(all.begin(), all.end(), rng);
    cut(all);
    return batches;
  }
  // Every pair visits its captions in its own random order, one per round.
  std::vector<std::array<std::size_t, kCaptionsPerPair>> order(pair_count);
  for (auto& o : order) {
    std::iota(o.begin(), o.end(), std::size_t{0});
    shuffle(o.begin(), o.end(), rng);
  }
  for (std::size_t round = 0; round < kCaptionsPerPair; ++round) {
    std::vector<Example> examples;
    for (std::size_t p = 0; p < pair_count; ++p) examples.push_back({p, order[p][round]});
    shuffle(examples.begin(), examples.end(), rng);
    cut(examples);
  }
  return batches;
}

Trainer::Trainer(Model& model, const TrainConfig& config) : model_(model), config_(config) {
  config_.validate();
  for (auto& p : model_.trainable()) {
    slots_.push_back({p.name, p.tensor, std::vector<Real>(p.tensor.numel(), Real(0)), p.decay});
  }
}

TrainingProgress Trainer::progress(std::uint64_t epochs_done) const {
  TrainingProgress out;
  out.epochs_done = epochs_done;
  for (const auto& s : slots_) out.velocities[s.name] = s.velocity;
  return out;
}

void Trainer::restore(const TrainingProgress& progress) {
  for (auto& s : slots_) {
    auto it = progress.velocities.find(s.name);
    if (it == progress.velocities.end()) continue;
    if (it->second.size() != s.velocity.size()) {
      throw FormatError("velocity for '" + s.name + "' has the wrong length");
    }
    s.velocity = it->second;
  }
}

double Trainer::step(const std::vector<BitemporalSample>& samples, const Batch& batch,
                     Rng& rng) {
  std::vector<const BitemporalSample*> pairs;
  std::vector<std::vector<std::string>> sentences;
  for (const auto& ex : batch) {
    pairs.push_back(&samples.at(ex.pair));
    sentences.push_back(samples[ex.pair].captions.at(ex.caption).words);
  }
  Tape tape;
  TapeScope scope(tape);
  const Tensor fx = model_.encode_images(pairs, rng, Mode::Train);
  const Tensor fy = model_.encode_texts(sentences);
  const Tensor loss = contrastive_loss(fx, fy, model_.kappa()).total;
  const double value = loss.item();
  if (!std::isfinite(value)) throw DomainError("loss is not finite");
  tape.backward(loss);
  if (config_.lr > 0.0) {
    sgd_momentum_step(slots_, {config_.lr, config_.momentum, config_.weight_decay});
    model_.clamp_kappa();
  }
  for (auto& s : slots_) s.param.zero_grad();
  return value;
}

double Trainer::train_epoch(const std::vector<BitemporalSample>& samples,
                            const std::vector<Batch>& batches, std::uint64_t epoch) {
  Rng rng = Rng::stream(config_.seed, "dropout", epoch);
  double total = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    try {
      total += step(samples, batches[b], rng);
    } catch (const DomainError& e) {
      throw TrainingError("epoch " + std::to_string(epoch + 1) + ", batch " +
                              std::to_string(b) + ": " + e.what(),
                          b);
    }
  }
  return batches.empty() ? 0.0 : total / static_cast<double>(batches.size());
}

Recall recall_at_k(Model& model, const std::vector<BitemporalSample>& samples,
                   std::size_t k) {
  const std::size_t n = samples.size();
  if (n < 2) throw ConfigError("recall needs at least 2 pairs");
  const FeatureBank bank = compute_features(model, samples);
  const RetrievalArchive images = archive_from_bank(bank, samples, Modality::Image);
  const RetrievalArchive texts = archive_from_bank(bank, samples, Modality::Text);
  const std::size_t c = kCaptionsPerPair;

  // Rows ranked ahead of `row` under score-desc, id-asc, row-asc ordering.
  auto rank_of = [](const double* scores, const RetrievalArchive& a, std::size_t row) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (scores[j] > scores[row] ||
          (scores[j] == scores[row] && (a.ids[j] < a.ids[row] ||
                                        (a.ids[j] == a.ids[row] && j < row)))) {
        ++ahead;
      }
    }
    return ahead;
  };

  std::size_t t2i_hits = 0, i2t_hits = 0;
  const auto t2i = cosine_matrix(bank.texts, images);
  for (std::size_t q = 0; q < n * c; ++q) {
    t2i_hits += rank_of(&t2i[q * n], images, q / c) < k;
  }
  const auto i2t = cosine_matrix(bank.images, texts);
  for (std::size_t p = 0; p < n; ++p) {
    const double* s = &i2t[p * n * c];
    std::size_t best = p * c;
    for (std::size_t j = p * c + 1; j < (p + 1) * c; ++j) {
      if (s[j] > s[best]) best = j;
    }
    i2t_hits += rank_of(s, texts, best) < k;
  }
  return {static_cast<double>(i2t_hits) / static_cast<double>(n),
          static_cast<double>(t2i_hits) / static_cast<double>(n * c)};
}

Recall validate(Model& model, const std::vector<BitemporalSample>& samples) {
  return recall_at_k(model, samples, 1);
}

TrainRunResult train(Model& model, const TrainConfig& config,
                     const std::vector<BitemporalSample>& train_set,
                     const std::vector<BitemporalSample>& val_set,
                     const TrainRunOptions& options) {
  config.validate();
  if (train_set.size() < 2) throw ConfigError("training needs at least 2 pairs");
  const auto& selection = val_set.size() >= 2 ? val_set : train_set;

  Trainer trainer(model, config);
  std::uint64_t start = 0;
  if (options.resume) {
    trainer.restore(*options.resume);
    start = options.resume->epochs_done;
  }

  std::ofstream log;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto mode = start > 0 ? std::ios::app : std::ios::trunc;
    log.open(options.out_dir / "train_log.jsonl", mode);
    if (!log) throw IoError("cannot write training log in " + options.out_dir.string());
  }

  TrainRunResult result;
  double best = -1.0;
  for (std::uint64_t epoch = start; epoch < config.epochs; ++epoch) {
    const auto batches =
        make_batches(train_set.size(), config.batch_size, config.seed, epoch, config.batching);
    EpochRecord rec{epoch + 1, trainer.train_epoch(train_set, batches, epoch), {}, 0.0};
    rec.val = validate(model, selection);
    rec.kappa = model.kappa()[0];
    result.history.push_back(rec);
    if (rec.val.mean() > best) {
      best = rec.val.mean();
      result.best_val = rec.val;
      result.best_epoch = rec.epoch;
      if (!options.out_dir.empty()) {
        save_checkpoint(options.out_dir / "best.tsrc", model, trainer.progress(rec.epoch));
      }
    }
    if (log.is_open()) {
      nlohmann::ordered_json line;
      line["epoch"] = rec.epoch;
      line["loss"] = rec.loss;
      line["val_recall_i2t"] = rec.val.image_to_text;
      line["val_recall_t2i"] = rec.val.text_to_image;
      line["kappa"] = rec.kappa;
      log << line.dump() << '\n' << std::flush;
    }
    if (options.on_epoch) options.on_epoch(rec);
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "final.tsrc", model, trainer.progress(config.epochs));
  }
  return result;
}

}  // namespace itsr
