#include <algorithm>
#include <cmath>
#include <map>

#include <json.hpp>
#include <gtest/gtest.h>

#include "itsr/metrics.hpp"
#include "itsr/rng.hpp"
#include "oracles.hpp"

using namespace itsr;

namespace {

Tokens t(const std::string& s) { return tokenize(s); }

std::vector<Tokens> refs(std::initializer_list<const char*> r) {
  std::vector<Tokens> out;
  for (const char* s : r) out.push_back(tokenize(s));
  return out;
}

Tokens random_sentence(Rng& rng, std::size_t vocab, std::size_t max_len) {
  Tokens out(1 + rng.below(max_len));
  for (auto& w : out) w = "w" + std::to_string(rng.below(vocab));
  return out;
}

// Clipped unigram matches against one reference.
std::size_t clipped_unigrams(const Tokens& hyp, const Tokens& ref) {
  std::map<std::string, int> counts;
  for (const auto& w : ref) ++counts[w];
  std::size_t m = 0;
  for (const auto& w : hyp) {
    if (counts[w] > 0) {
      --counts[w];
      ++m;
    }
  }
  return m;
}

BitemporalSample pair_with_captions(const std::string& id, std::array<const char*, 5> caps,
                                    bool change = true) {
  BitemporalSample s;
  s.id = id;
  s.change = change;
  for (std::size_t i = 0; i < 5; ++i) s.captions[i] = TextSample::from_sentence(id, caps[i]);
  return s;
}

}  // namespace

TEST(Bleu, HandDerivedFixtures) {
  EXPECT_NEAR(bleu(t("a b c"), refs({"a b d"}), 1), 2.0 / 3.0, 1e-12);
  EXPECT_EQ(bleu(t("the cat sat on the mat"), refs({"the cat sat on the mat"}), 4), 1.0);
  EXPECT_EQ(bleu(t("x y z"), refs({"a b c"}), 1), 0.0);
  EXPECT_EQ(bleu(t("x y z"), refs({"a b c"}), 4), 0.0);
  // 5/6, 3/5, 2/4, 1/3 clipped precisions at equal length.
  EXPECT_NEAR(bleu(t("the cat sat on the mat"), refs({"the cat sat on a mat"}), 4),
              std::pow(1.0 / 12.0, 0.25), 1e-12);
  // Short hypothesis: precision 1, brevity penalty exp(1 - 4/2).
  EXPECT_NEAR(bleu(t("a b"), refs({"a b c d"}), 1), std::exp(-1.0), 1e-12);
  // Orders 3 and 4 have no match: (0+1)/(2+1) and (0+1)/(1+1).
  EXPECT_NEAR(bleu(t("a b c d"), refs({"a b x y"}), 4), std::pow(1.0 / 36.0, 0.25), 1e-12);
  // Reference lengths 2 and 4 are equally close to 3; the shorter one wins.
  EXPECT_EQ(bleu(t("a b c"), refs({"a b", "a b c d"}), 1), 1.0);
  // Clipping uses the largest count in any single reference.
  EXPECT_NEAR(bleu(t("a a a b"), refs({"a b c d", "a a x y"}), 1), 0.75, 1e-12);
  EXPECT_EQ(bleu({}, refs({"a"}), 1), 0.0);
}

TEST(Bleu, SingleReferenceEqualLengthIsClippedPrecision) {
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    const Tokens hyp = random_sentence(rng, 6, 9);
    Tokens ref = random_sentence(rng, 6, 9);
    ref.resize(hyp.size(), "w0");
    EXPECT_NEAR(bleu(hyp, {ref}, 1),
                static_cast<double>(clipped_unigrams(hyp, ref)) / hyp.size(), 1e-12);
  }
}

TEST(RougeL, HandDerivedFixtures) {
  EXPECT_EQ(rouge_l(t("a b c d"), refs({"a b c d"})), 1.0);
  EXPECT_NEAR(rouge_l(t("a b c d"), refs({"a c b d"})), 0.75, 1e-12);
  EXPECT_EQ(rouge_l(t("a b"), refs({"c d"})), 0.0);
  EXPECT_NEAR(rouge_l(t("a b c"), refs({"a b c d e"})), 1.464 / 2.04, 1e-12);
  EXPECT_NEAR(rouge_l(t("a b c"), refs({"x y", "a b c d e"})), 1.464 / 2.04, 1e-12);
  EXPECT_EQ(rouge_l({}, refs({"a"})), 0.0);
}

TEST(RougeL, LcsMatchesRecursiveOracleAndBetaCancelsWhenBalanced) {
  Rng rng(2);
  for (int i = 0; i < 300; ++i) {
    const Tokens a = random_sentence(rng, 5, 10), b = random_sentence(rng, 5, 10);
    const std::size_t l = oracle::lcs(a, b);
    ASSERT_EQ(lcs_length(a, b), l);
    const double r = rouge_l(a, {b});
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
    if (a.size() == b.size()) {
      EXPECT_NEAR(r, static_cast<double>(l) / a.size(), 1e-12);
      EXPECT_NEAR(rouge_l(a, {b}, 3.0), r, 1e-12);
    }
  }
}

TEST(Meteor, HandDerivedFixtures) {
  EXPECT_EQ(meteor(t("a b"), refs({"c d"})), 0.0);
  EXPECT_NEAR(meteor(t("the cat"), refs({"the cat"})), 0.9375, 1e-12);
  EXPECT_NEAR(meteor(t("cat"), refs({"cat"})), 0.5, 1e-12);
  // Three chunks over four matches.
  EXPECT_NEAR(meteor(t("a b c d"), refs({"a b d c"})), 1 - 0.5 * std::pow(0.75, 3), 1e-12);
  // P = 1, R = 1/2: F = 5 / 9.5, one chunk over two matches.
  EXPECT_NEAR(meteor(t("a b"), refs({"a b c d"})), 5.0 / 9.5 * 0.9375, 1e-12);
  // The repeated "the" can align with either reference word; the choice that
  // keeps one chunk wins.
  EXPECT_NEAR(meteor(t("the cat the"), refs({"the cat"})), 20.0 / 21.0 * 0.9375, 1e-12);
  EXPECT_NEAR(meteor(t("a b"), refs({"x", "a b"})), 0.9375, 1e-12);
}

TEST(Meteor, SynonymTableExtendsMatching) {
  SynonymTable syn;
  syn.add("big", "large");
  EXPECT_TRUE(syn.match("large", "big"));
  EXPECT_TRUE(syn.match("big", "big"));
  EXPECT_FALSE(syn.match("big", "small"));
  EXPECT_NEAR(meteor(t("big house"), refs({"large house"})), 0.25, 1e-12);
  EXPECT_NEAR(meteor(t("big house"), refs({"large house"}), &syn), 0.9375, 1e-12);
}

TEST(Meteor, AlignmentMatchesExhaustiveSearch) {
  Rng rng(3);
  for (int i = 0; i < 400; ++i) {
    const Tokens hyp = random_sentence(rng, 4, 8), ref = random_sentence(rng, 4, 8);
    const auto [m, ch] = oracle::meteor_alignment(hyp, ref);
    const Alignment a = meteor_align(hyp, ref);
    ASSERT_EQ(a.matches, m);
    ASSERT_EQ(a.chunks, ch);
    double want = 0;
    if (m > 0) {
      const double p = double(m) / hyp.size(), r = double(m) / ref.size();
      want = 10 * p * r / (r + 9 * p) * (1 - 0.5 * std::pow(double(ch) / m, 3));
    }
    EXPECT_NEAR(meteor(hyp, {ref}), want, 1e-12);
  }
}

TEST(Metrics, IdenticalSentencesScoreTheirClosedForm) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const Tokens s = random_sentence(rng, 50, 12);
    const auto v = score_pair(s, {s});
    EXPECT_EQ(v.bleu1, 1.0);
    EXPECT_EQ(v.rouge_l, 1.0);
    EXPECT_NEAR(v.bleu4, 1.0, 1e-12);
    const double m = static_cast<double>(s.size());
    EXPECT_NEAR(v.meteor, 1 - 0.5 / (m * m * m), 1e-12);
  }
}

TEST(Metrics, BoundedOnRandomInputs) {
  Rng rng(5);
  for (int i = 0; i < 300; ++i) {
    const Tokens hyp = random_sentence(rng, 8, 10);
    std::vector<Tokens> rs;
    for (std::size_t r = 0; r <= rng.below(4); ++r) rs.push_back(random_sentence(rng, 8, 10));
    const auto v = score_pair(hyp, rs);
    for (double x : {v.bleu1, v.bleu4, v.meteor, v.rouge_l}) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(Metrics, RetokenisationPreservingTokensKeepsScores) {
  const auto a = score_pair(t("A red block, appears."), refs({"a RED block appears!"}));
  const auto b = score_pair(t("a red block appears"), refs({"a red block appears"}));
  EXPECT_EQ(a.bleu4, b.bleu4);
  EXPECT_EQ(a.meteor, b.meteor);
  EXPECT_EQ(a.rouge_l, b.rouge_l);
}

TEST(ScoreRetrieval, SingleQueryTopOneIsTheRawPairMetric) {
  const std::vector<BitemporalSample> samples{
      pair_with_captions("p0", {"a red block appears", "x", "y", "z", "w"}),
      pair_with_captions("p1", {"a blue block appears in the north", "a block is added",
                                "something new", "the scene changed", "new block"})};
  LooResult t2i;
  t2i.options.task = Task::TextToImage;
  t2i.options.rounds = 1;
  t2i.options.k = 1;
  t2i.queries.push_back({0, "p0", "a red block appears", 1, {{"p1", 0.9, ""}}});
  const auto s = score_retrieval(t2i, samples);
  std::vector<Tokens> p1;
  for (const auto& c : samples[1].captions) p1.push_back(c.words);
  const auto want = score_pair(t("a red block appears"), p1);
  ASSERT_TRUE(s.mean);
  EXPECT_EQ(s.mean->bleu1, want.bleu1);
  EXPECT_EQ(s.mean->bleu4, want.bleu4);
  EXPECT_EQ(s.mean->meteor, want.meteor);
  EXPECT_EQ(s.mean->rouge_l, want.rouge_l);
  EXPECT_EQ(s.queries, 1u);
  EXPECT_EQ(s.archive_size, 1u);

  LooResult i2t;
  i2t.options.task = Task::ImageToText;
  i2t.options.rounds = 1;
  i2t.options.k = 1;
  i2t.queries.push_back({0, "p1", "", 1, {{"p0", 0.5, "a red block appears"}}});
  const auto si = score_retrieval(i2t, samples);
  ASSERT_TRUE(si.mean);
  EXPECT_EQ(si.mean->meteor, want.meteor);
  EXPECT_EQ(si.mean->bleu1, want.bleu1);
}

TEST(ScoreRetrieval, QueriesAverageArithmetically) {
  // "a b c d e" against references of one exact-matching caption and noise.
  const std::vector<BitemporalSample> samples{
      pair_with_captions("p0", {"a b c d e", "q", "q", "q", "q"}),
      pair_with_captions("p1", {"a b c d e", "q", "q", "q", "q"}),
      pair_with_captions("p2", {"a v v v v", "q", "q", "q", "q"})};
  LooResult r;
  r.options.task = Task::ImageToText;
  r.options.rounds = 1;
  r.options.k = 1;
  // BLEU-1 of the retrieved caption vs the query's references: 0.2 and 0.6.
  r.queries.push_back({0, "p0", "", 2, {{"p2", 0.1, "a x y z w"}}});
  r.queries.push_back({0, "p1", "", 2, {{"p2", 0.1, "a b c x y"}}});
  const auto s = score_retrieval(r, samples);
  ASSERT_TRUE(s.mean);
  EXPECT_NEAR(s.mean->bleu1, 0.4, 1e-12);
}

TEST(ScoreRetrieval, TopKItemsThenRoundsAreAveraged) {
  const std::vector<BitemporalSample> samples{
      pair_with_captions("p0", {"a b c d", "q", "q", "q", "q"}),
      pair_with_captions("p1", {"x y z w", "q", "q", "q", "q"}),
      pair_with_captions("p2", {"a b c d", "q", "q", "q", "q"})};
  LooResult r;
  r.options.task = Task::TextToImage;
  r.options.rounds = 2;
  r.options.k = 2;
  // Round 0: retrieved p2 (rouge 1) and p1 (rouge 0) -> 0.5.
  r.queries.push_back({0, "p0", "a b c d", 2, {{"p2", 0.9, ""}, {"p1", 0.1, ""}}});
  // Round 1: both hits perfect -> 1.
  r.queries.push_back({1, "p1", "a b c d", 2, {{"p0", 0.9, ""}, {"p2", 0.8, ""}}});
  const auto s = score_retrieval(r, samples);
  ASSERT_EQ(s.per_round.size(), 2u);
  EXPECT_NEAR(s.per_round[0]->rouge_l, 0.5, 1e-12);
  EXPECT_NEAR(s.per_round[1]->rouge_l, 1.0, 1e-12);
  EXPECT_NEAR(s.mean->rouge_l, 0.75, 1e-12);
}

TEST(ScoreRetrieval, EmptyRetrievalIsExcludedAndCounted) {
  const std::vector<BitemporalSample> samples{
      pair_with_captions("p0", {"a b", "q", "q", "q", "q"}),
      pair_with_captions("p1", {"a b", "q", "q", "q", "q"})};
  LooResult r;
  r.options.rounds = 1;
  r.options.k = 1;
  r.queries.push_back({0, "p0", "a b", 1, {}});
  r.queries.push_back({0, "p1", "a b", 1, {{"p0", 1, ""}}});
  const auto s = score_retrieval(r, samples);
  EXPECT_EQ(s.excluded, 1u);
  EXPECT_EQ(s.queries, 1u);
  EXPECT_EQ(s.mean->bleu1, 1.0);

  LooResult none;
  none.options.rounds = 1;
  const auto e = score_retrieval(none, samples);
  EXPECT_FALSE(e.mean);
}

TEST(ScoreRetrieval, QueryOrderDoesNotMatter) {
  Rng rng(6);
  std::vector<BitemporalSample> samples;
  for (int i = 0; i < 12; ++i) {
    std::array<std::string, 5> caps;
    for (auto& c : caps) {
      c.clear();
      for (const auto& w : random_sentence(rng, 6, 7)) c += w + " ";
    }
    BitemporalSample s;
    s.id = "p" + std::to_string(i);
    for (std::size_t c = 0; c < 5; ++c) s.captions[c] = TextSample::from_sentence(s.id, caps[c]);
    samples.push_back(s);
  }
  LooResult r;
  r.options.task = Task::TextToImage;
  r.options.rounds = 1;
  r.options.k = 3;
  for (int i = 0; i < 12; ++i) {
    QueryResult q{0, samples[i].id, samples[i].captions[0].text, 11, {}};
    for (int j = 1; j <= 3; ++j) q.retrieved.push_back({samples[(i + j) % 12].id, 0.0, ""});
    r.queries.push_back(q);
  }
  const auto a = score_retrieval(r, samples);
  std::reverse(r.queries.begin(), r.queries.end());
  std::rotate(r.queries.begin(), r.queries.begin() + 5, r.queries.end());
  const auto b = score_retrieval(r, samples);
  EXPECT_NEAR(a.mean->bleu1, b.mean->bleu1, 1e-12);
  EXPECT_NEAR(a.mean->bleu4, b.mean->bleu4, 1e-12);
  EXPECT_NEAR(a.mean->meteor, b.mean->meteor, 1e-12);
  EXPECT_NEAR(a.mean->rouge_l, b.mean->rouge_l, 1e-12);
}

TEST(Evaluate, ReportCoversBothTasksAndEveryScope) {
  Rng rng(7);
  std::vector<BitemporalSample> samples;
  for (int i = 0; i < 9; ++i) {
    samples.push_back(pair_with_captions("p" + std::to_string(i),
                                         {"a block appears", "a block is added", "new block",
                                          "something changed", "look a block"},
                                         i % 3 != 0));
  }
  FeatureBank bank{Tensor(Shape{9, 4}), Tensor(Shape{45, 4})};
  for (auto& x : bank.images.data()) x = static_cast<Real>(rng.uniform(-1, 1));
  for (auto& x : bank.texts.data()) x = static_cast<Real>(rng.uniform(-1, 1));
  EvaluationOptions opt;
  opt.rounds = 2;
  const auto reports = evaluate(bank, samples, opt);
  ASSERT_EQ(reports.size(), 3u);
  for (const auto& r : reports) {
    ASSERT_TRUE(r.text_to_image.mean && r.image_to_text.mean && r.cross_task_average);
    EXPECT_NEAR(r.cross_task_average->meteor,
                0.5 * (r.text_to_image.mean->meteor + r.image_to_text.mean->meteor), 1e-15);
    EXPECT_EQ(r.text_to_image.archive_size, 8u);
  }
  EXPECT_EQ(reports[1].text_to_image.queries, 2u * 6u);
  EXPECT_EQ(reports[2].image_to_text.queries, 2u * 3u);

  std::istringstream lines(report_jsonl(reports));
  std::size_t count = 0;
  for (std::string line; std::getline(lines, line); ++count) {
    const auto j = nlohmann::ordered_json::parse(line);
    std::vector<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.push_back(k);
    EXPECT_EQ(keys, (std::vector<std::string>{"task", "scope", "rounds", "k", "bleu1", "bleu4",
                                              "meteor", "rougeL", "cross_task_average",
                                              "diagnostics"}));
    EXPECT_EQ(j.at("rounds"), 2);
    EXPECT_GE(j.at("rougeL").get<double>(), 0.0);
  }
  EXPECT_EQ(count, 6u);
}
