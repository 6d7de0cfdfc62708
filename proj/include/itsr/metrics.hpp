#pragma once

#include "itsr/abi.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "itsr/dataset.hpp"
#include "itsr/retrieval.hpp"

namespace itsr::inline ITSR_ABI {

using Tokens = std::vector<std::string>;

/// Sentence BLEU with clipped n-gram precisions for orders 1..n, geometric
/// mean and brevity penalty against the closest reference length (shorter on
/// ties). Orders >= 2 without a match use (0+1)/(total+1); no unigram match
/// gives 0. Empty hypothesis gives 0.
double bleu(const Tokens& hypothesis, const std::vector<Tokens>& references, std::size_t n);

/// Length of the longest common subsequence.
std::size_t lcs_length(const Tokens& a, const Tokens& b);

/// LCS F-measure with beta = 1.2, maximised over references.
double rouge_l(const Tokens& hypothesis, const std::vector<Tokens>& references,
               double beta = 1.2);

/// Symmetric word-equivalence table consulted by METEOR in addition to exact
/// matches.
class SynonymTable {
 public:
  void add(const std::string& a, const std::string& b);
  bool match(const std::string& a, const std::string& b) const;
  bool empty() const { return links_.empty(); }

 private:
  std::map<std::string, std::set<std::string>> links_;
};

/// Unigram alignment statistics for one hypothesis/reference pair: the
/// alignment with the most matches, and among those the fewest chunks.
struct Alignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};
Alignment meteor_align(const Tokens& hypothesis, const Tokens& reference,
                       const SynonymTable* synonyms = nullptr);

/// F_mean = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3, score
/// F_mean*(1-penalty), maximised over references; 0 without matches.
double meteor(const Tokens& hypothesis, const std::vector<Tokens>& references,
              const SynonymTable* synonyms = nullptr);

struct MetricValues {
  double bleu1 = 0, bleu4 = 0, meteor = 0, rouge_l = 0;
};

/// All four metrics for one hypothesis against its references.
MetricValues score_pair(const Tokens& hypothesis, const std::vector<Tokens>& references,
                        const SynonymTable* synonyms = nullptr);

struct TaskScore {
  Task task = Task::TextToImage;
  Scope scope = Scope::Full;
  std::size_t rounds = 0;
  std::size_t k = 0;
  std::optional<MetricValues> mean;                  // empty: no scored query
  std::vector<std::optional<MetricValues>> per_round;
  std::size_t queries = 0;   // scored queries over all rounds
  std::size_t excluded = 0;  // queries with nothing retrieved
  std::size_t archive_size = 0;
};

/// Per query: each of the top-k retrieved items is scored (text-to-image:
/// query caption vs the retrieved pair's captions; image-to-text: retrieved
/// caption vs the query pair's captions), averaged over the items, then over
/// queries, then over rounds.
TaskScore score_retrieval(const LooResult& results,
                          const std::vector<BitemporalSample>& samples,
                          const SynonymTable* synonyms = nullptr);

struct ScopeReport {
  TaskScore text_to_image;
  TaskScore image_to_text;
  std::optional<MetricValues> cross_task_average;
};

struct EvaluationOptions {
  std::size_t rounds = 5;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::vector<Scope> scopes{Scope::Full, Scope::Change, Scope::NoChange};
  bool all_captions = false;
  std::filesystem::path results_dir;  // when set, per-task retrieval lists go here
};

/// Leave-one-out retrieval for both tasks and every requested scope, scored.
std::vector<ScopeReport> evaluate(const FeatureBank& bank,
                                  const std::vector<BitemporalSample>& samples,
                                  const EvaluationOptions& options);

/// One JSON document per (task, scope) with keys in the order task, scope,
/// rounds, k, bleu1, bleu4, meteor, rougeL, cross_task_average, diagnostics.
std::string report_jsonl(const std::vector<ScopeReport>& reports);
void write_report(const std::filesystem::path& path, const std::vector<ScopeReport>& reports);

}  // namespace itsr
