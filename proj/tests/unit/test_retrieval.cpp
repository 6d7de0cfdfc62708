#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>
#include <gtest/gtest.h>

#include "itsr/errors.hpp"
#include "itsr/retrieval.hpp"
#include "itsr/synthetic.hpp"
#include "oracles.hpp"
#include "tempdir.hpp"

using namespace itsr;
using testing_support::TempDir;

namespace {

std::vector<Real> random_rows(std::size_t n, std::size_t d, Rng& rng) {
  std::vector<Real> v(n * d);
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-1, 1));
  return v;
}

RetrievalArchive make_archive(const std::vector<Real>& rows, std::size_t d,
                              std::vector<std::string> ids) {
  const std::size_t n = ids.size();
  return RetrievalArchive::from_rows(std::move(ids), Tensor({n, d}, rows), {},
                                     std::vector<bool>(n, true));
}

std::vector<std::string> shuffled_ids(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = "id" + std::to_string(100000 + perm[i]);
  return ids;
}

std::vector<double> oracle_scores(const std::vector<Real>& rows, std::size_t d,
                                  std::span<const Real> q) {
  double qn = 0;
  for (Real x : q) qn += double(x) * double(x);
  qn = std::sqrt(qn);
  std::vector<double> s(rows.size() / d);
  for (std::size_t r = 0; r < s.size(); ++r) {
    double dot = 0, rn = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += double(rows[r * d + j]) * double(q[j]);
      rn += double(rows[r * d + j]) * double(rows[r * d + j]);
    }
    s[r] = dot / (std::sqrt(rn) * qn);
  }
  return s;
}

std::vector<std::string> hit_ids(const std::vector<Hit>& hits) {
  std::vector<std::string> out;
  for (const auto& h : hits) out.push_back(h.id);
  return out;
}

// n pairs, every third one unchanged, with a random feature bank.
struct Fixture {
  std::vector<BitemporalSample> samples;
  FeatureBank bank;
};

Fixture random_fixture(std::size_t n, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  Fixture f;
  f.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = f.samples[i];
    s.id = "pair" + std::to_string(i);
    s.change = i % 3 != 0;
    for (std::size_t c = 0; c < kCaptionsPerPair; ++c) {
      s.captions[c] = TextSample::from_sentence(s.id, "caption " + std::to_string(c) + " of " + s.id);
    }
  }
  f.bank.images = Tensor({n, width}, random_rows(n, width, rng));
  f.bank.texts = Tensor({n * kCaptionsPerPair, width}, random_rows(n * kCaptionsPerPair, width, rng));
  return f;
}

}  // namespace

TEST(Archive, ZeroNormRowNamesTheId) {
  try {
    make_archive({1, 0, 0, 0, 0, 1}, 2, {"a", "b", "c"});
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
  EXPECT_THROW(RetrievalArchive::from_rows({"a"}, Tensor(Shape{2, 2}, 1), {}, {true}),
               ShapeError);
}

TEST(QueryTopk, FullRankingIsAPermutation) {
  Rng rng(1);
  const auto rows = random_rows(40, 6, rng);
  auto ids = shuffled_ids(40, rng);
  const auto archive = make_archive(rows, 6, ids);
  const auto q = random_rows(1, 6, rng);
  auto got = hit_ids(query_topk(archive, q, 40));
  EXPECT_EQ(hit_ids(query_topk(archive, q, 400)), got);
  std::sort(got.begin(), got.end());
  std::sort(ids.begin(), ids.end());
  EXPECT_EQ(got, ids);
}

TEST(QueryTopk, ArchiveRowAsQueryComesFirst) {
  Rng rng(2);
  const auto rows = random_rows(50, 8, rng);
  const auto archive = make_archive(rows, 8, shuffled_ids(50, rng));
  for (std::size_t r : {0, 17, 49}) {
    const std::span<const Real> q(rows.data() + r * 8, 8);
    const auto hits = query_topk(archive, q, 3);
    EXPECT_EQ(hits[0].row, r);
    EXPECT_NEAR(hits[0].score, 1.0, 1e-12);
  }
}

TEST(QueryTopk, MatchesFullSortWithTies) {
  Rng rng(3);
  const std::size_t n = 1000, d = 12;
  auto rows = random_rows(n, d, rng);
  for (std::size_t i = 0; i < 100; ++i) {
    const auto src = rng.below(n), dst = rng.below(n);
    std::copy_n(rows.begin() + src * d, d, rows.begin() + dst * d);
  }
  const auto ids = shuffled_ids(n, rng);
  const auto archive = make_archive(rows, d, ids);
  for (int t = 0; t < 60; ++t) {
    std::vector<Real> q = random_rows(1, d, rng);
    if (t % 3 == 0) std::copy_n(rows.begin() + rng.below(n) * d, d, q.begin());
    const auto want = oracle::full_sort_ids(oracle_scores(rows, d, q), ids);
    for (std::size_t k : {1, 5, 50}) {
      const auto got = hit_ids(query_topk(archive, q, k));
      ASSERT_EQ(got, std::vector<std::string>(want.begin(), want.begin() + k)) << "k=" << k;
    }
  }
}

TEST(QueryTopk, EqualScoresRankByAscendingId) {
  const std::vector<Real> rows{1, 0, 1, 0, 1, 0, 0, 1};
  const auto archive = make_archive(rows, 2, {"zeta", "alpha", "mid", "other"});
  const std::vector<Real> q{2, 0};
  EXPECT_EQ(hit_ids(query_topk(archive, q, 4)),
            (std::vector<std::string>{"alpha", "mid", "zeta", "other"}));
}

TEST(QueryTopk, PositiveScalingKeepsTheRanking) {
  Rng rng(4);
  const std::size_t n = 200, d = 10;
  const auto rows = random_rows(n, d, rng);
  const auto ids = shuffled_ids(n, rng);
  auto scaled = rows;
  for (std::size_t r = 0; r < n; ++r) {
    const Real f = static_cast<Real>(rng.uniform(0.1, 20));
    for (std::size_t j = 0; j < d; ++j) scaled[r * d + j] *= f;
  }
  const auto a = make_archive(rows, d, ids), b = make_archive(scaled, d, ids);
  for (int t = 0; t < 20; ++t) {
    auto q = random_rows(1, d, rng);
    auto q3 = q;
    for (auto& x : q3) x *= 3.5f;
    const auto base = hit_ids(query_topk(a, q, 10));
    EXPECT_EQ(hit_ids(query_topk(a, q3, 10)), base);
    EXPECT_EQ(hit_ids(query_topk(b, q, 10)), base);
  }
}

TEST(QueryTopk, ExcludedIdNeverReturned) {
  const std::vector<Real> rows{1, 0, 1, 0.1f, 0, 1};
  const auto archive = make_archive(rows, 2, {"a", "b", "c"});
  const std::vector<Real> q{1, 0};
  EXPECT_EQ(hit_ids(query_topk(archive, q, 5, "a")), (std::vector<std::string>{"b", "c"}));
}

TEST(QueryTopk, ErrorCases) {
  const auto archive = make_archive({1, 0, 0, 1}, 2, {"a", "b"});
  const std::vector<Real> q{1, 1}, zero{0, 0}, wide{1, 1, 1};
  EXPECT_THROW(query_topk(archive, q, 0), ConfigError);
  EXPECT_THROW(query_topk(archive, zero, 1), DomainError);
  EXPECT_THROW(query_topk(archive, wide, 1), ShapeError);
  RetrievalArchive empty;
  EXPECT_THROW(query_topk(empty, q, 1), StateError);
}

TEST(CosineMatrix, AgreesWithPerQueryScan) {
  Rng rng(5);
  const auto rows = random_rows(30, 5, rng);
  const auto archive = make_archive(rows, 5, shuffled_ids(30, rng));
  const auto qs = random_rows(4, 5, rng);
  const auto m = cosine_matrix(Tensor({4, 5}, qs), archive);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto want = oracle_scores(rows, 5, std::span<const Real>(qs.data() + i * 5, 5));
    for (std::size_t r = 0; r < 30; ++r) EXPECT_EQ(m[i * 30 + r], want[r]);
  }
}

TEST(Names, TasksAndScopesRoundTrip) {
  for (auto t : {Task::TextToImage, Task::ImageToText}) EXPECT_EQ(parse_task(to_string(t)), t);
  for (auto s : {Scope::Full, Scope::Change, Scope::NoChange}) {
    EXPECT_EQ(parse_scope(to_string(s)), s);
  }
  EXPECT_THROW(parse_scope("partial"), ConfigError);
  EXPECT_THROW(parse_task("X2Y"), ConfigError);
  EXPECT_TRUE(in_scope(Scope::NoChange, false));
  EXPECT_FALSE(in_scope(Scope::Change, false));
}

TEST(LeaveOneOut, EveryQuerySearchesTheOtherPairs) {
  const auto f = random_fixture(12, 6, 7);
  for (auto task : {Task::TextToImage, Task::ImageToText}) {
    LooOptions opt;
    opt.task = task;
    opt.k = 20;
    const auto result = leave_one_out_eval(f.bank, f.samples, opt);
    ASSERT_EQ(result.queries.size(), 5u * 12u);
    for (const auto& q : result.queries) {
      EXPECT_EQ(q.archive_size, 11u);
      EXPECT_EQ(q.retrieved.size(), 11u);
      for (const auto& item : q.retrieved) EXPECT_NE(item.id, q.query_id);
      EXPECT_EQ(task == Task::TextToImage, !q.query_text.empty());
      EXPECT_EQ(task == Task::ImageToText, !q.retrieved.front().caption.empty());
    }
  }
}

TEST(LeaveOneOut, AllCaptionArchiveHoldsFiveRowsPerOtherPair) {
  const auto f = random_fixture(6, 4, 8);
  LooOptions opt;
  opt.task = Task::ImageToText;
  opt.all_captions = true;
  opt.rounds = 1;
  opt.k = 100;
  const auto result = leave_one_out_eval(f.bank, f.samples, opt);
  for (const auto& q : result.queries) {
    EXPECT_EQ(q.archive_size, 25u);
    EXPECT_EQ(q.retrieved.size(), 25u);
  }
}

TEST(LeaveOneOut, RoundsAreSeededAndReproducible) {
  const auto f = random_fixture(10, 6, 9);
  LooOptions opt;
  opt.seed = 42;
  const auto a = leave_one_out_eval(f.bank, f.samples, opt);
  const auto b = leave_one_out_eval(f.bank, f.samples, opt);
  ASSERT_EQ(a.queries.size(), b.queries.size());
  for (std::size_t i = 0; i < a.queries.size(); ++i) {
    EXPECT_EQ(a.queries[i].query_text, b.queries[i].query_text);
    ASSERT_EQ(a.queries[i].retrieved.size(), b.queries[i].retrieved.size());
    for (std::size_t j = 0; j < a.queries[i].retrieved.size(); ++j) {
      EXPECT_EQ(a.queries[i].retrieved[j].id, b.queries[i].retrieved[j].id);
      EXPECT_EQ(a.queries[i].retrieved[j].score, b.queries[i].retrieved[j].score);
    }
  }
  EXPECT_EQ(sample_round_captions(10, 42, 3), sample_round_captions(10, 42, 3));
  std::set<std::vector<std::size_t>> rounds;
  for (std::size_t r = 0; r < 5; ++r) rounds.insert(sample_round_captions(10, 42, r));
  EXPECT_GT(rounds.size(), 1u);
}

TEST(LeaveOneOut, ScopeFiltersQueriesButNotTheArchive) {
  const auto f = random_fixture(9, 5, 10);
  LooOptions opt;
  opt.scope = Scope::NoChange;
  opt.rounds = 2;
  opt.k = 50;
  const auto result = leave_one_out_eval(f.bank, f.samples, opt);
  ASSERT_EQ(result.queries.size(), 2u * 3u);
  std::set<std::string> retrieved;
  for (const auto& q : result.queries) {
    EXPECT_FALSE(f.samples[std::stoul(q.query_id.substr(4))].change);
    EXPECT_EQ(q.archive_size, 8u);
    for (const auto& item : q.retrieved) retrieved.insert(item.id);
  }
  EXPECT_EQ(retrieved.size(), 9u);
}

TEST(LeaveOneOut, EmptyScopeGivesNoQueries) {
  auto f = random_fixture(4, 5, 11);
  for (auto& s : f.samples) s.change = true;
  LooOptions opt;
  opt.scope = Scope::NoChange;
  EXPECT_TRUE(leave_one_out_eval(f.bank, f.samples, opt).queries.empty());
}

TEST(LeaveOneOut, InvalidSettingsRejected) {
  const auto f = random_fixture(4, 5, 12);
  LooOptions opt;
  opt.k = 0;
  EXPECT_THROW(leave_one_out_eval(f.bank, f.samples, opt), ConfigError);
  opt = {};
  opt.rounds = 0;
  EXPECT_THROW(leave_one_out_eval(f.bank, f.samples, opt), ConfigError);
  const auto one = random_fixture(1, 5, 12);
  EXPECT_THROW(leave_one_out_eval(one.bank, one.samples, {}), ConfigError);
}

TEST(LeaveOneOut, ResultsExportOneLinePerQuery) {
  TempDir dir;
  const auto f = random_fixture(5, 4, 13);
  LooOptions opt;
  opt.task = Task::ImageToText;
  opt.rounds = 2;
  opt.k = 3;
  write_results_jsonl(dir / "r.jsonl", leave_one_out_eval(f.bank, f.samples, opt));
  std::ifstream in(dir / "r.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("task"), "I2T");
    EXPECT_EQ(j.at("scope"), "full");
    EXPECT_EQ(j.at("retrieved").size(), 3u);
    EXPECT_TRUE(j.at("retrieved")[0].contains("caption"));
    EXPECT_TRUE(j.at("retrieved")[0].at("score").is_number());
  }
  EXPECT_EQ(lines, 10u);
}

TEST(BuildArchive, ModelFeaturesAreDeterministicAndCounted) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.pairs = 7;
  const auto samples = load_samples(generate_synthetic_dataset(cfg, dir.path()).manifest);
  ModelConfig mc;
  mc.fusion.strategy = FusionStrategy::GffConcat;
  mc.fusion.embed_dim = 32;
  mc.head_hidden = 32;
  mc.head_output = 16;
  mc.text_vocab = 64;
  Model model(mc);
  const auto images = build_archive(model, samples, Modality::Image);
  const auto texts = build_archive(model, samples, Modality::Text);
  EXPECT_EQ(images.size(), 7u);
  EXPECT_EQ(texts.size(), 35u);
  EXPECT_EQ(texts.captions[6], samples[1].captions[1].text);
  const auto again = build_archive(model, samples, Modality::Image);
  EXPECT_EQ(std::vector<Real>(images.features.data().begin(), images.features.data().end()),
            std::vector<Real>(again.features.data().begin(), again.features.data().end()));
  for (double n : images.norms) EXPECT_GT(n, 0);
}
