#include "itsr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

#include <json.hpp>

#include "itsr/errors.hpp"

namespace itsr::inline ITSR_ABI {

namespace {

using NgramCounts = std::unordered_map<std::string, std::size_t>;

NgramCounts ngrams(const Tokens& words, std::size_t n) {
  NgramCounts counts;
  if (words.size() < n) return counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    std::string key;
    for (std::size_t j = 0; j < n; ++j) {
      if (j) key.push_back('\x1f');
      key += words[i + j];
    }
    ++counts[key];
  }
  return counts;
}

void require_references(const std::vector<Tokens>& references, const char* metric) {
  if (references.empty()) throw ConfigError(std::string(metric) + " needs at least one reference");
}

}  // namespace

double bleu(const Tokens& hyp, const std::vector<Tokens>& refs, std::size_t n) {
  require_references(refs, "BLEU");
  if (n == 0) throw ConfigError("BLEU order must be at least 1");
  if (hyp.empty()) return 0.0;

  double log_sum = 0.0;
  for (std::size_t order = 1; order <= n; ++order) {
    const NgramCounts h = ngrams(hyp, order);
    NgramCounts max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : ngrams(r, order)) max_ref[g] = std::max(max_ref[g], c);
    }
    std::size_t matched = 0;
    for (const auto& [g, c] : h) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    const std::size_t total = hyp.size() >= order ? hyp.size() - order + 1 : 0;
    double p;
    if (matched > 0) {
      p = static_cast<double>(matched) / static_cast<double>(total);
    } else if (order == 1) {
      return 0.0;
    } else {
      p = 1.0 / static_cast<double>(total + 1);
    }
    log_sum += std::log(p);
  }

  const double c = static_cast<double>(hyp.size());
  std::size_t closest = refs.front().size();
  for (const auto& r : refs) {
    const auto diff = [&](std::size_t len) {
      return std::abs(static_cast<double>(len) - c);
    };
    if (diff(r.size()) < diff(closest) || (diff(r.size()) == diff(closest) && r.size() < closest)) {
      closest = r.size();
    }
  }
  const double r = static_cast<double>(closest);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(n));
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& hyp, const std::vector<Tokens>& refs, double beta) {
  require_references(refs, "ROUGE-L");
  if (hyp.empty()) return 0.0;
  double best = 0.0;
  for (const auto& r : refs) {
    if (r.empty()) continue;
    const auto lcs = static_cast<double>(lcs_length(hyp, r));
    if (lcs == 0.0) continue;
    const double recall = lcs / static_cast<double>(r.size());
    const double precision = lcs / static_cast<double>(hyp.size());
    const double b2 = beta * beta;
    best = std::max(best, (1 + b2) * recall * precision / (recall + b2 * precision));
  }
  return best;
}

void SynonymTable::add(const std::string& a, const std::string& b) {
  links_[a].insert(b);
  links_[b].insert(a);
}

bool SynonymTable::match(const std::string& a, const std::string& b) const {
  if (a == b) return true;
  auto it = links_.find(a);
  return it != links_.end() && it->second.count(b) > 0;
}

namespace {

class AlignmentSearch {
 public:
  AlignmentSearch(const Tokens& hyp, const Tokens& ref, const SynonymTable* syn)
      : candidates_(hyp.size()), used_(ref.size(), false) {
    for (std::size_t i = 0; i < hyp.size(); ++i)
      for (std::size_t j = 0; j < ref.size(); ++j)
        if (syn ? syn->match(hyp[i], ref[j]) : hyp[i] == ref[j]) candidates_[i].push_back(j);
  }

  Alignment run() {
    target_ = max_matching();
    if (target_ == 0) return {};
    best_chunks_ = std::numeric_limits<std::size_t>::max();
    search(0, 0, 0, kNone);
    return {target_, best_chunks_};
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  // Kuhn's augmenting paths: the largest number of matches.
  std::size_t max_matching() {
    std::vector<std::size_t> owner(used_.size(), kNone);
    std::size_t total = 0;
    for (std::size_t i = 0; i < candidates_.size(); ++i) {
      std::vector<bool> seen(used_.size(), false);
      if (augment(i, owner, seen)) ++total;
    }
    return total;
  }

  bool augment(std::size_t i, std::vector<std::size_t>& owner, std::vector<bool>& seen) {
    for (auto j : candidates_[i]) {
      if (seen[j]) continue;
      seen[j] = true;
      if (owner[j] == kNone || augment(owner[j], owner, seen)) {
        owner[j] = i;
        return true;
      }
    }
    return false;
  }

  // Upper bound on further matches from hypothesis position i onwards.
  std::size_t reachable(std::size_t i) const {
    std::size_t n = 0;
    for (; i < candidates_.size(); ++i) {
      for (auto j : candidates_[i]) {
        if (!used_[j]) {
          ++n;
          break;
        }
      }
    }
    return n;
  }

  // Depth-first over hypothesis positions; prev is the reference index the
  // previous hypothesis word aligned to (kNone if it stayed unaligned).
  void search(std::size_t i, std::size_t matched, std::size_t chunks, std::size_t prev) {
    if (chunks >= best_chunks_) return;
    if (matched + reachable(i) < target_) return;
    if (i == candidates_.size()) {
      if (matched == target_) best_chunks_ = chunks;
      return;
    }
    const std::size_t next = prev == kNone ? kNone : prev + 1;
    if (next != kNone && next < used_.size() && !used_[next] &&
        std::find(candidates_[i].begin(), candidates_[i].end(), next) != candidates_[i].end()) {
      used_[next] = true;
      search(i + 1, matched + 1, chunks, next);
      used_[next] = false;
    }
    for (auto j : candidates_[i]) {
      if (used_[j] || j == next) continue;
      used_[j] = true;
      search(i + 1, matched + 1, chunks + 1, j);
      used_[j] = false;
    }
    search(i + 1, matched, chunks, kNone);
  }

  std::vector<std::vector<std::size_t>> candidates_;
  std::vector<bool> used_;
  std::size_t target_ = 0;
  std::size_t best_chunks_ = 0;
};

}  // namespace

Alignment meteor_align(const Tokens& hyp, const Tokens& ref, const SynonymTable* synonyms) {
  return AlignmentSearch(hyp, ref, synonyms).run();
}

double meteor(const Tokens& hyp, const std::vector<Tokens>& refs, const SynonymTable* synonyms) {
  require_references(refs, "METEOR");
  if (hyp.empty()) return 0.0;
  double best = 0.0;
  for (const auto& r : refs) {
    if (r.empty()) continue;
    const Alignment a = meteor_align(hyp, r, synonyms);
    if (a.matches == 0) continue;
    const double m = static_cast<double>(a.matches);
    const double p = m / static_cast<double>(hyp.size());
    const double rec = m / static_cast<double>(r.size());
    const double f_mean = 10.0 * p * rec / (rec + 9.0 * p);
    const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
    best = std::max(best, f_mean * (1.0 - penalty));
  }
  return best;
}

MetricValues score_pair(const Tokens& hyp, const std::vector<Tokens>& refs,
                        const SynonymTable* synonyms) {
  return {bleu(hyp, refs, 1), bleu(hyp, refs, 4), meteor(hyp, refs, synonyms),
          rouge_l(hyp, refs)};
}

namespace {

MetricValues& operator+=(MetricValues& a, const MetricValues& b) {
  a.bleu1 += b.bleu1;
  a.bleu4 += b.bleu4;
  a.meteor += b.meteor;
  a.rouge_l += b.rouge_l;
  return a;
}

MetricValues divided(MetricValues a, double n) {
  a.bleu1 /= n;
  a.bleu4 /= n;
  a.meteor /= n;
  a.rouge_l /= n;
  return a;
}

}  // namespace

TaskScore score_retrieval(const LooResult& results, const std::vector<BitemporalSample>& samples,
                          const SynonymTable* synonyms) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < samples.size(); ++i) index[samples[i].id] = i;
  auto refs_of = [&](const std::string& id) {
    auto it = index.find(id);
    if (it == index.end()) throw LookupError("retrieval result names unknown pair '" + id + "'");
    std::vector<Tokens> refs;
    for (const auto& c : samples[it->second].captions) refs.push_back(c.words);
    return refs;
  };

  const auto& opt = results.options;
  TaskScore score;
  score.task = opt.task;
  score.scope = opt.scope;
  score.rounds = opt.rounds;
  score.k = opt.k;

  const auto& qs = results.queries;
  std::vector<std::optional<MetricValues>> per_query(qs.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t qi = 0; qi < static_cast<std::int64_t>(qs.size()); ++qi) {
    try {
      const auto& q = qs[static_cast<std::size_t>(qi)];
      const std::size_t take = std::min(opt.k, q.retrieved.size());
      if (take == 0) continue;
      MetricValues sum;
      for (std::size_t r = 0; r < take; ++r) {
        const auto& item = q.retrieved[r];
        if (opt.task == Task::TextToImage) {
          sum += score_pair(tokenize(q.query_text), refs_of(item.id), synonyms);
        } else {
          sum += score_pair(tokenize(item.caption), refs_of(q.query_id), synonyms);
        }
      }
      per_query[static_cast<std::size_t>(qi)] = divided(sum, static_cast<double>(take));
    } catch (...) {
#pragma omp critical(itsr_metrics_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<MetricValues> round_sum(opt.rounds);
  std::vector<std::size_t> round_count(opt.rounds, 0);
  for (std::size_t i = 0; i < qs.size(); ++i) {
    if (qs[i].archive_size > score.archive_size) score.archive_size = qs[i].archive_size;
    if (!per_query[i]) {
      ++score.excluded;
      continue;
    }
    round_sum.at(qs[i].round) += *per_query[i];
    ++round_count[qs[i].round];
    ++score.queries;
  }
  MetricValues total;
  std::size_t rounds_scored = 0;
  for (std::size_t r = 0; r < opt.rounds; ++r) {
    if (round_count[r] == 0) {
      score.per_round.emplace_back();
      continue;
    }
    score.per_round.push_back(divided(round_sum[r], static_cast<double>(round_count[r])));
    total += *score.per_round.back();
    ++rounds_scored;
  }
  if (rounds_scored > 0) score.mean = divided(total, static_cast<double>(rounds_scored));
  return score;
}

std::vector<ScopeReport> evaluate(const FeatureBank& bank,
                                  const std::vector<BitemporalSample>& samples,
                                  const EvaluationOptions& options) {
  std::vector<ScopeReport> out;
  for (Scope scope : options.scopes) {
    ScopeReport report;
    for (Task task : {Task::TextToImage, Task::ImageToText}) {
      LooOptions loo{task, scope, options.rounds, options.k, options.seed, options.all_captions};
      const LooResult result = leave_one_out_eval(bank, samples, loo);
      if (!options.results_dir.empty()) {
        write_results_jsonl(options.results_dir / ("retrieval_" + to_string(task) + "_" +
                                                   to_string(scope) + ".jsonl"),
                            result);
      }
      (task == Task::TextToImage ? report.text_to_image : report.image_to_text) =
          score_retrieval(result, samples);
    }
    if (report.text_to_image.mean && report.image_to_text.mean) {
      MetricValues avg = *report.text_to_image.mean;
      avg += *report.image_to_text.mean;
      report.cross_task_average = divided(avg, 2.0);
    }
    out.push_back(std::move(report));
  }
  return out;
}

namespace {

using ojson = nlohmann::ordered_json;

ojson metric_json(const std::optional<MetricValues>& v) {
  ojson j;
  if (!v) {
    j["bleu1"] = nullptr;
    j["bleu4"] = nullptr;
    j["meteor"] = nullptr;
    j["rougeL"] = nullptr;
  } else {
    j["bleu1"] = v->bleu1;
    j["bleu4"] = v->bleu4;
    j["meteor"] = v->meteor;
    j["rougeL"] = v->rouge_l;
  }
  return j;
}

ojson task_json(const TaskScore& s, const std::optional<MetricValues>& cross) {
  ojson j;
  j["task"] = to_string(s.task);
  j["scope"] = to_string(s.scope);
  j["rounds"] = s.rounds;
  j["k"] = s.k;
  const ojson scores = metric_json(s.mean);
  for (const auto& [key, value] : scores.items()) j[key] = value;
  j["cross_task_average"] = metric_json(cross);
  ojson diag;
  diag["queries"] = s.queries;
  diag["excluded"] = s.excluded;
  diag["archive_size"] = s.archive_size;
  diag["per_round"] = ojson::array();
  for (const auto& r : s.per_round) diag["per_round"].push_back(metric_json(r));
  j["diagnostics"] = std::move(diag);
  return j;
}

}  // namespace

std::string report_jsonl(const std::vector<ScopeReport>& reports) {
  std::string out;
  for (const auto& r : reports) {
    out += task_json(r.text_to_image, r.cross_task_average).dump() + "\n";
    out += task_json(r.image_to_text, r.cross_task_average).dump() + "\n";
  }
  return out;
}

void write_report(const std::filesystem::path& path, const std::vector<ScopeReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write report " + path.string());
  out << report_jsonl(reports);
  if (!out) throw IoError("failed writing report " + path.string());
}

}  // namespace itsr
