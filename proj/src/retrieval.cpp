#include "itsr/retrieval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "itsr/errors.hpp"
#include "itsr/kernels.hpp"

namespace itsr::inline ITSR_ABI {

namespace {

constexpr std::size_t kEvalChunk = 64;

void scan(const RetrievalArchive& a, std::span<const Real> q, double q_norm,
          std::span<double> out) {
  const std::size_t work = a.size() * q.size();
  if (work >= kernels::kParallelWork) {
    kernels::cosine_scan_parallel(a.features.data(), a.norms, q, q_norm, out);
  } else {
    kernels::cosine_scan_serial(a.features.data(), a.norms, q, q_norm, out);
  }
}

}  // namespace

RetrievalArchive RetrievalArchive::from_rows(std::vector<std::string> ids, Tensor features,
                                             std::vector<std::string> captions,
                                             std::vector<bool> change) {
  if (features.rank() != 2 || features.dim(0) != ids.size() ||
      change.size() != ids.size() || (!captions.empty() && captions.size() != ids.size())) {
    throw ShapeError("archive rows, ids, captions and flags disagree");
  }
  RetrievalArchive a;
  const std::size_t n = features.dim(0), d = features.dim(1);
  a.norms.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    a.norms[i] = kernels::l2_norm(features.data().subspan(i * d, d));
    if (!(a.norms[i] > 0.0)) {
      throw DomainError("zero-norm archive feature for '" + ids[i] + "'");
    }
  }
  a.ids = std::move(ids);
  a.features = std::move(features);
  a.captions = std::move(captions);
  a.change = std::move(change);
  return a;
}

std::vector<Hit> query_topk(const RetrievalArchive& archive, std::span<const Real> q,
                            std::size_t k, std::optional<std::string_view> exclude_id) {
  if (k == 0) throw ConfigError("k must be at least 1");
  if (archive.size() == 0) throw StateError("query against an empty archive");
  if (q.size() != archive.features.dim(1)) {
    throw ShapeError("query width " + std::to_string(q.size()) + " vs archive width " +
                     std::to_string(archive.features.dim(1)));
  }
  const double q_norm = kernels::l2_norm(q);
  if (!(q_norm > 0.0)) throw DomainError("zero-norm query");

  std::vector<double> scores(archive.size());
  scan(archive, q, q_norm, scores);

  std::vector<std::size_t> rows;
  rows.reserve(archive.size());
  for (std::size_t i = 0; i < archive.size(); ++i) {
    if (exclude_id && archive.ids[i] == *exclude_id) continue;
    rows.push_back(i);
  }
  const auto ahead = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    if (archive.ids[a] != archive.ids[b]) return archive.ids[a] < archive.ids[b];
    return a < b;
  };
  const std::size_t take = std::min(k, rows.size());
  std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take),
                    rows.end(), ahead);
  std::vector<Hit> hits;
  hits.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    hits.push_back({rows[i], archive.ids[rows[i]], scores[rows[i]]});
  }
  return hits;
}

std::vector<double> cosine_matrix(const Tensor& queries, const RetrievalArchive& archive) {
  const std::size_t m = queries.dim(0), d = queries.dim(1), n = archive.size();
  if (archive.features.dim(1) != d) throw ShapeError("cosine_matrix: widths differ");
  std::vector<double> out(m * n), qnorm(m);
  for (std::size_t i = 0; i < m; ++i) {
    qnorm[i] = kernels::l2_norm(queries.data().subspan(i * d, d));
    if (!(qnorm[i] > 0.0)) throw DomainError("zero-norm query row " + std::to_string(i));
  }
#pragma omp parallel for schedule(static) if (m * n * d >= kernels::kParallelWork)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
    const auto q = queries.data().subspan(static_cast<std::size_t>(i) * d, d);
    kernels::cosine_scan_serial(archive.features.data(), archive.norms, q, qnorm[i],
                                std::span<double>(out).subspan(static_cast<std::size_t>(i) * n, n));
  }
  return out;
}

FeatureBank compute_features(Model& model, const std::vector<BitemporalSample>& samples) {
  if (samples.empty()) throw ConfigError("no pairs to encode");
  NoGradScope no_grad;
  Rng unused(0);
  const std::size_t n = samples.size(), out = model.config().head_output;
  FeatureBank bank{Tensor({n, out}), Tensor({n * kCaptionsPerPair, out})};
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t end = std::min(n, start + kEvalChunk);
    std::vector<const BitemporalSample*> pairs;
    std::vector<std::vector<std::string>> sentences;
    for (std::size_t i = start; i < end; ++i) {
      pairs.push_back(&samples[i]);
      for (const auto& c : samples[i].captions) sentences.push_back(c.words);
    }
    const Tensor img = model.encode_images(pairs, unused, Mode::Eval);
    const Tensor txt = model.encode_texts(sentences);
    std::copy(img.data().begin(), img.data().end(), bank.images.data().begin() + start * out);
    std::copy(txt.data().begin(), txt.data().end(),
              bank.texts.data().begin() + start * kCaptionsPerPair * out);
  }
  return bank;
}

RetrievalArchive archive_from_bank(const FeatureBank& bank,
                                   const std::vector<BitemporalSample>& samples,
                                   Modality modality) {
  std::vector<std::string> ids, captions;
  std::vector<bool> change;
  for (const auto& s : samples) {
    const std::size_t copies = modality == Modality::Image ? 1 : kCaptionsPerPair;
    for (std::size_t c = 0; c < copies; ++c) {
      ids.push_back(s.id);
      change.push_back(s.change);
      if (modality == Modality::Text) captions.push_back(s.captions[c].text);
    }
  }
  const Tensor& rows = modality == Modality::Image ? bank.images : bank.texts;
  try {
    return RetrievalArchive::from_rows(std::move(ids), rows.clone(), std::move(captions),
                                       std::move(change));
  } catch (const DomainError& e) {
    throw DomainError(std::string("archive build aborted: ") + e.what());
  }
}

RetrievalArchive build_archive(Model& model, const std::vector<BitemporalSample>& samples,
                               Modality modality) {
  return archive_from_bank(compute_features(model, samples), samples, modality);
}

std::string to_string(Task task) {
  return task == Task::TextToImage ? "T2I" : "I2T";
}

std::string to_string(Scope scope) {
  switch (scope) {
    case Scope::Full: return "full";
    case Scope::Change: return "change";
    case Scope::NoChange: return "no_change";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  if (name == "T2I" || name == "t2i") return Task::TextToImage;
  if (name == "I2T" || name == "i2t") return Task::ImageToText;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected T2I or I2T)");
}

Scope parse_scope(std::string_view name) {
  if (name == "full") return Scope::Full;
  if (name == "change") return Scope::Change;
  if (name == "no_change" || name == "no-change") return Scope::NoChange;
  throw ConfigError("unknown scope '" + std::string(name) +
                    "' (expected full, change or no_change)");
}

bool in_scope(Scope scope, bool change) {
  switch (scope) {
    case Scope::Full: return true;
    case Scope::Change: return change;
    case Scope::NoChange: return !change;
  }
  return false;
}

std::vector<std::size_t> sample_round_captions(std::size_t pair_count, std::uint64_t seed,
                                               std::size_t round) {
  Rng rng = Rng::stream(seed, "loo-captions", round);
  std::vector<std::size_t> choice(pair_count);
  for (auto& c : choice) c = static_cast<std::size_t>(rng.below(kCaptionsPerPair));
  return choice;
}

LooResult leave_one_out_eval(const FeatureBank& bank,
                             const std::vector<BitemporalSample>& samples,
                             const LooOptions& opt) {
  const std::size_t n = samples.size();
  if (n < 2) throw ConfigError("leave-one-out evaluation needs at least 2 pairs");
  if (opt.k == 0) throw ConfigError("k must be at least 1");
  if (opt.rounds == 0) throw ConfigError("rounds must be at least 1");
  const std::size_t width = bank.images.dim(1);

  LooResult result{opt, {}};
  std::vector<std::size_t> queries;
  for (std::size_t i = 0; i < n; ++i) {
    if (in_scope(opt.scope, samples[i].change)) queries.push_back(i);
  }
  const RetrievalArchive images = archive_from_bank(bank, samples, Modality::Image);
  const RetrievalArchive all_texts = archive_from_bank(bank, samples, Modality::Text);

  for (std::size_t round = 0; round < opt.rounds; ++round) {
    const auto choice = sample_round_captions(n, opt.seed, round);
    const RetrievalArchive* archive = &images;
    RetrievalArchive round_texts;
    if (opt.task == Task::ImageToText) {
      if (opt.all_captions) {
        archive = &all_texts;
      } else {
        std::vector<std::string> ids, captions;
        std::vector<bool> change;
        Tensor rows({n, width});
        for (std::size_t i = 0; i < n; ++i) {
          ids.push_back(samples[i].id);
          captions.push_back(samples[i].captions[choice[i]].text);
          change.push_back(samples[i].change);
          const auto src = bank.texts.data().subspan((i * kCaptionsPerPair + choice[i]) * width, width);
          std::copy(src.begin(), src.end(), rows.data().begin() + i * width);
        }
        round_texts = RetrievalArchive::from_rows(std::move(ids), std::move(rows),
                                                  std::move(captions), std::move(change));
        archive = &round_texts;
      }
    }
    std::vector<QueryResult> round_results(queries.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t qi = 0; qi < static_cast<std::int64_t>(queries.size()); ++qi) {
      const std::size_t p = queries[static_cast<std::size_t>(qi)];
      const auto& sample = samples[p];
      QueryResult& r = round_results[static_cast<std::size_t>(qi)];
      r.round = round;
      r.query_id = sample.id;
      std::span<const Real> q;
      if (opt.task == Task::TextToImage) {
        r.query_text = sample.captions[choice[p]].text;
        q = bank.texts.data().subspan((p * kCaptionsPerPair + choice[p]) * width, width);
      } else {
        q = bank.images.data().subspan(p * width, width);
      }
      r.archive_size = 0;
      for (const auto& id : archive->ids) r.archive_size += id != sample.id;
      for (const auto& h : query_topk(*archive, q, opt.k, sample.id)) {
        r.retrieved.push_back(
            {h.id, h.score, archive->captions.empty() ? std::string() : archive->captions[h.row]});
      }
    }
    for (auto& r : round_results) result.queries.push_back(std::move(r));
  }
  return result;
}

LooResult leave_one_out_eval(Model& model, const std::vector<BitemporalSample>& samples,
                             const LooOptions& options) {
  return leave_one_out_eval(compute_features(model, samples), samples, options);
}

void write_results_jsonl(const std::filesystem::path& path, const LooResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& q : result.queries) {
    nlohmann::ordered_json line;
    line["round"] = q.round;
    line["query_id"] = q.query_id;
    line["task"] = to_string(result.options.task);
    line["scope"] = to_string(result.options.scope);
    if (!q.query_text.empty()) line["query_text"] = q.query_text;
    line["archive_size"] = q.archive_size;
    auto& items = line["retrieved"] = nlohmann::ordered_json::array();
    for (const auto& item : q.retrieved) {
      nlohmann::ordered_json entry;
      entry["id"] = item.id;
      entry["score"] = item.score;
      if (!item.caption.empty()) entry["caption"] = item.caption;
      items.push_back(std::move(entry));
    }
    out << line.dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace itsr
