#include "itsr/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "itsr/embedding_io.hpp"
#include "itsr/errors.hpp"
#include "itsr/rng.hpp"

namespace itsr::inline ITSR_ABI {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> tokenize(const std::string& sentence) {
  std::vector<std::string> words;
  std::string current;
  for (unsigned char c : sentence) {
    if (std::isspace(c)) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else if (std::isalnum(c) || c >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

TextSample TextSample::from_sentence(std::string id, std::string text) {
  TextSample sample{std::move(id), std::move(text), {}};
  sample.words = tokenize(sample.text);
  if (sample.words.empty()) {
    throw ConfigError("caption '" + sample.text + "' has no words");
  }
  return sample;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();

  DatasetManifest manifest;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(),
                    [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    ManifestEntry entry;
    try {
      entry.id = record.at("id").get<std::string>();
      const auto& caps = record.at("captions");
      if (!caps.is_array() || caps.size() != kCaptionsPerPair) {
        throw ParseError("entry '" + entry.id + "' must have exactly 5 captions",
                         line_no);
      }
      for (std::size_t i = 0; i < kCaptionsPerPair; ++i) {
        entry.captions[i] = caps[i].get<std::string>();
        if (tokenize(entry.captions[i]).empty()) {
          throw ParseError("entry '" + entry.id + "' has an empty caption", line_no);
        }
      }
      entry.emb_t1 = record.at("emb_t1").get<std::string>();
      entry.emb_t2 = record.at("emb_t2").get<std::string>();
      entry.change = record.at("change").get<bool>();
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad record: ") + e.what(), line_no);
    }
    if (entry.id.empty()) throw ParseError("empty id", line_no);
    if (!seen.insert(entry.id).second) {
      throw ParseError("duplicate id '" + entry.id + "'", line_no);
    }
    for (auto* p : {&entry.emb_t1, &entry.emb_t2}) {
      if (p->is_relative()) *p = base / *p;
      if (!fs::exists(*p)) throw IoError("missing embedding file " + p->string());
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  const fs::path base = fs::absolute(path).parent_path().lexically_normal();
  auto portable = [&](const fs::path& p) {
    const fs::path abs = fs::absolute(p).lexically_normal();
    const fs::path rel = abs.lexically_relative(base);
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return abs.generic_string();
  };
  for (const auto& e : manifest.entries) {
    json record = json::object();
    record["id"] = e.id;
    record["captions"] = e.captions;
    record["emb_t1"] = portable(e.emb_t1);
    record["emb_t2"] = portable(e.emb_t2);
    record["change"] = e.change;
    out << record.dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::pair<Tensor, Tensor> split_class_token(const Tensor& rows) {
  if (rows.rank() != 2 || rows.dim(0) < 2) {
    throw ShapeError("embedding matrix needs a class token and at least one "
                     "patch token, got " + shape_string(rows.shape()));
  }
  const std::size_t T = rows.dim(0) - 1, d = rows.dim(1);
  std::vector<Real> cls(rows.data().begin(), rows.data().begin() + d);
  std::vector<Real> patches(rows.data().begin() + d, rows.data().end());
  return {Tensor({d}, std::move(cls)), Tensor({T, d}, std::move(patches))};
}

void validate_sample(const BitemporalSample& s) {
  if (s.emb_t1.shape() != s.emb_t2.shape()) {
    throw ShapeError("pair '" + s.id + "': t1 " + shape_string(s.emb_t1.shape()) +
                     " and t2 " + shape_string(s.emb_t2.shape()) + " differ");
  }
  if (s.cls_t1.numel() != s.dim() || s.cls_t2.numel() != s.dim()) {
    throw ShapeError("pair '" + s.id + "': class token width mismatch");
  }
  for (const auto& c : s.captions) {
    if (c.words.empty()) throw ConfigError("pair '" + s.id + "' has an empty caption");
  }
}

std::vector<BitemporalSample> load_samples(const DatasetManifest& manifest) {
  const auto n = static_cast<std::int64_t>(manifest.entries.size());
  std::vector<BitemporalSample> samples(manifest.entries.size());
  std::exception_ptr failure;
  std::mutex failure_mutex;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      const auto& e = manifest.entries[i];
      BitemporalSample s;
      s.id = e.id;
      std::tie(s.cls_t1, s.emb_t1) = split_class_token(read_embedding_file(e.emb_t1));
      std::tie(s.cls_t2, s.emb_t2) = split_class_token(read_embedding_file(e.emb_t2));
      for (std::size_t c = 0; c < kCaptionsPerPair; ++c) {
        s.captions[c] = TextSample::from_sentence(e.id + "#" + std::to_string(c),
                                                  e.captions[c]);
      }
      s.change = e.change;
      validate_sample(s);
      samples[i] = std::move(s);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  if (!samples.empty()) {
    const auto& shape = samples.front().emb_t1.shape();
    for (const auto& s : samples) {
      if (s.emb_t1.shape() != shape) {
        throw ShapeError("pair '" + s.id + "' has embeddings " +
                         shape_string(s.emb_t1.shape()) + ", expected " +
                         shape_string(shape));
      }
    }
  }
  return samples;
}

SplitManifests split_and_subsample(const DatasetManifest& manifest,
                                   const SplitFractions& fractions,
                                   double nochange_keep, std::uint64_t seed) {
  const double total = fractions.train + fractions.val + fractions.test;
  if (std::abs(total - 1.0) > 1e-9 || fractions.train < 0 || fractions.val < 0 ||
      fractions.test < 0) {
    throw ConfigError("split fractions must be non-negative and sum to 1, got " +
                      std::to_string(total));
  }
  if (!(nochange_keep > 0.0 && nochange_keep <= 1.0)) {
    throw ConfigError("no-change keep fraction must lie in (0, 1]");
  }
  const std::size_t n = manifest.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::stream(seed, "split");
  shuffle(order.begin(), order.end(), rng);

  const auto count = [n](double f) {
    return std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(f * n)));
  };
  const std::size_t n_train = count(fractions.train);
  const std::size_t n_val = std::min(n - n_train, count(fractions.val));

  std::vector<std::size_t> train(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> val(order.begin() + n_train, order.begin() + n_train + n_val);
  std::vector<std::size_t> test(order.begin() + n_train + n_val, order.end());

  if (nochange_keep < 1.0) {
    std::vector<std::size_t> nochange, kept;
    for (auto i : train) {
      (manifest.entries[i].change ? kept : nochange).push_back(i);
    }
    Rng sub = Rng::stream(seed, "nochange-subsample");
    shuffle(nochange.begin(), nochange.end(), sub);
    const auto keep = static_cast<std::size_t>(
        std::floor(nochange_keep * static_cast<double>(nochange.size()) + 1e-9));
    kept.insert(kept.end(), nochange.begin(), nochange.begin() + keep);
    train = std::move(kept);
  }

  auto build = [&](std::vector<std::size_t> idx, Split split) {
    std::sort(idx.begin(), idx.end());
    DatasetManifest m;
    m.split = split;
    for (auto i : idx) m.entries.push_back(manifest.entries[i]);
    return m;
  };
  return {build(std::move(train), Split::Train), build(std::move(val), Split::Val),
          build(std::move(test), Split::Test)};
}

DatasetManifest merge_manifests(const std::vector<DatasetManifest>& parts) {
  DatasetManifest merged;
  std::set<std::string> seen;
  for (const auto& part : parts) {
    for (const auto& e : part.entries) {
      if (!seen.insert(e.id).second) {
        throw ConfigError("merged manifests share id '" + e.id + "'");
      }
      merged.entries.push_back(e);
    }
  }
  return merged;
}

}  // namespace itsr
