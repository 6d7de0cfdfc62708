#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "itsr/dataset.hpp"
#include "itsr/embedding_io.hpp"
#include "itsr/encoders.hpp"
#include "itsr/errors.hpp"
#include "itsr/rng.hpp"
#include "itsr/synthetic.hpp"
#include "tempdir.hpp"

using namespace itsr;
using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

std::vector<Real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> v(r * c);
  for (auto& x : v) x = rng.uniform(-3, 3);
  return Tensor({r, c}, std::move(v));
}

std::string record(const std::string& id, std::size_t captions, const std::string& emb) {
  std::string caps;
  for (std::size_t i = 0; i < captions; ++i) {
    caps += (i ? "," : "") + std::string("\"caption number ") + std::to_string(i) + "\"";
  }
  return "{\"id\":\"" + id + "\",\"captions\":[" + caps + "],\"emb_t1\":\"" + emb +
         "\",\"emb_t2\":\"" + emb + "\",\"change\":true}\n";
}

DatasetManifest fake_manifest(std::size_t change, std::size_t nochange) {
  DatasetManifest m;
  for (std::size_t i = 0; i < change + nochange; ++i) {
    ManifestEntry e;
    e.id = "p" + std::to_string(i);
    e.change = i < change;
    m.entries.push_back(e);
  }
  return m;
}

std::set<std::string> ids(const DatasetManifest& m) {
  std::set<std::string> out;
  for (const auto& e : m.entries) out.insert(e.id);
  return out;
}

}  // namespace

TEST(EmbeddingFile, RoundTripIsBitwise) {
  TempDir dir;
  for (std::uint64_t seed : {1, 2, 3}) {
    const Tensor m = random_matrix(1 + seed * 3, 7, seed);
    write_embedding_file(dir / "m.tsre", m);
    const Tensor back = read_embedding_file(dir / "m.tsre");
    ASSERT_EQ(back.shape(), m.shape());
    for (std::size_t i = 0; i < m.numel(); ++i) {
      EXPECT_EQ(static_cast<float>(back[i]), static_cast<float>(m[i]));
    }
  }
}

TEST(EmbeddingFile, HeaderLayout) {
  TempDir dir;
  write_embedding_file(dir / "m.tsre", Tensor({1, 2}, {1.0, -2.0}));
  const std::string bytes = slurp(dir / "m.tsre");
  ASSERT_EQ(bytes.size(), 16u + 8u);
  EXPECT_EQ(bytes.substr(0, 4), "TSRE");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 0);
  EXPECT_EQ(bytes[7], 0);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 2);
}

TEST(EmbeddingFile, ZeroRowsRejected) {
  TempDir dir;
  std::string bytes = "TSRE";
  bytes += std::string("\x01\x00\x00\x00", 4);
  bytes += std::string("\x00\x00\x00\x00", 4);
  bytes += std::string("\x03\x00\x00\x00", 4);
  dump(dir / "z.tsre", bytes);
  EXPECT_THROW(read_embedding_file(dir / "z.tsre"), FormatError);
}

TEST(EmbeddingFile, TruncatedPayloadIsAnIoError) {
  TempDir dir;
  write_embedding_file(dir / "m.tsre", random_matrix(4, 4, 9));
  std::string bytes = slurp(dir / "m.tsre");
  bytes.resize(bytes.size() - 5);
  dump(dir / "m.tsre", bytes);
  EXPECT_THROW(read_embedding_file(dir / "m.tsre"), IoError);
}

TEST(EmbeddingFile, BadMagicVersionOrDtype) {
  TempDir dir;
  write_embedding_file(dir / "m.tsre", random_matrix(2, 2, 4));
  const std::string good = slurp(dir / "m.tsre");
  for (std::size_t at : {0u, 4u, 6u}) {
    std::string bad = good;
    bad[at] = static_cast<char>(bad[at] + 1);
    dump(dir / "bad.tsre", bad);
    EXPECT_THROW(read_embedding_file(dir / "bad.tsre"), FormatError) << "byte " << at;
  }
}

TEST(EmbeddingFile, MissingFileIsAnIoError) {
  TempDir dir;
  EXPECT_THROW(read_embedding_file(dir / "nope.tsre"), IoError);
}

TEST(Manifest, EmptyFileGivesEmptyManifest) {
  TempDir dir;
  dump(dir / "m.jsonl", "");
  EXPECT_EQ(load_manifest(dir / "m.jsonl").size(), 0u);
}

TEST(Manifest, EntriesKeepFileOrder) {
  TempDir dir;
  write_embedding_file(dir / "e.tsre", random_matrix(3, 2, 1));
  dump(dir / "m.jsonl", record("c", 5, "e.tsre") + record("a", 5, "e.tsre") +
                            record("b", 5, "e.tsre"));
  const auto m = load_manifest(dir / "m.jsonl");
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m.entries[0].id, "c");
  EXPECT_EQ(m.entries[1].id, "a");
  EXPECT_EQ(m.entries[2].id, "b");
  EXPECT_EQ(m.entries[0].emb_t1, dir / "e.tsre");
}

TEST(Manifest, FourCaptionsRejectedWithLineNumber) {
  TempDir dir;
  write_embedding_file(dir / "e.tsre", random_matrix(3, 2, 1));
  dump(dir / "m.jsonl", record("a", 5, "e.tsre") + record("b", 4, "e.tsre"));
  try {
    load_manifest(dir / "m.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("exactly 5 captions"), std::string::npos);
  }
}

TEST(Manifest, MalformedJsonNamesTheLine) {
  TempDir dir;
  write_embedding_file(dir / "e.tsre", random_matrix(3, 2, 1));
  dump(dir / "m.jsonl", record("a", 5, "e.tsre") + "\n{not json\n");
  try {
    load_manifest(dir / "m.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Manifest, MissingEmbeddingFileNamesThePath) {
  TempDir dir;
  dump(dir / "m.jsonl", record("a", 5, "absent.tsre"));
  try {
    load_manifest(dir / "m.jsonl");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("absent.tsre"), std::string::npos);
  }
}

TEST(Manifest, DuplicateIdRejected) {
  TempDir dir;
  write_embedding_file(dir / "e.tsre", random_matrix(3, 2, 1));
  dump(dir / "m.jsonl", record("a", 5, "e.tsre") + record("a", 5, "e.tsre"));
  EXPECT_THROW(load_manifest(dir / "m.jsonl"), ParseError);
}

TEST(Manifest, WriteThenLoadRoundTrips) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.pairs = 4;
  const auto data = generate_synthetic_dataset(cfg, dir.path());
  write_manifest(dir / "copy.jsonl", data.manifest);
  const auto back = load_manifest(dir / "copy.jsonl");
  ASSERT_EQ(back.size(), data.manifest.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.entries[i].id, data.manifest.entries[i].id);
    EXPECT_EQ(back.entries[i].captions, data.manifest.entries[i].captions);
    EXPECT_EQ(fs::canonical(back.entries[i].emb_t2),
              fs::canonical(data.manifest.entries[i].emb_t2));
  }
}

TEST(Tokenize, LowercasesAndStripsPunctuation) {
  EXPECT_EQ(tokenize("A Red block, appears!  North-west."),
            (std::vector<std::string>{"a", "red", "block", "appears", "northwest"}));
  EXPECT_TRUE(tokenize(" ... ").empty());
  EXPECT_THROW(TextSample::from_sentence("x", "?!"), ConfigError);
}

TEST(Samples, ClassTokenSplitAndShapeChecks) {
  const auto [cls, patches] = split_class_token(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(cls.shape(), (Shape{2}));
  EXPECT_EQ(patches.shape(), (Shape{2, 2}));
  EXPECT_EQ(cls[1], 2);
  EXPECT_EQ(patches[0], 3);
  EXPECT_THROW(split_class_token(Tensor({1, 2}, {1, 2})), ShapeError);

  BitemporalSample s;
  s.id = "x";
  s.emb_t1 = Tensor(Shape{4, 2});
  s.emb_t2 = Tensor(Shape{3, 2});
  s.cls_t1 = s.cls_t2 = Tensor(Shape{2});
  for (auto& c : s.captions) c = TextSample::from_sentence("c", "words");
  EXPECT_THROW(validate_sample(s), ShapeError);
}

TEST(ToyImageEncoder, TokenCountFollowsPatchGrid) {
  const ToyImageEncoder enc(3, 4, 16, 7);
  const auto out = enc.encode(Tensor(Shape{3, 8, 8}));
  EXPECT_EQ(out.tokens.shape(), (Shape{4, 16}));
  EXPECT_EQ(out.cls.shape(), (Shape{16}));
  EXPECT_THROW(enc.encode(Tensor(Shape{3, 8, 6})), ShapeError);
  EXPECT_THROW(enc.encode(Tensor(Shape{2, 8, 8})), ShapeError);
}

TEST(ToyImageEncoder, DeterministicInImageAndSeed) {
  Rng rng(3);
  std::vector<Real> px(3 * 8 * 8);
  for (auto& x : px) x = rng.uniform(0, 1);
  const Tensor image({3, 8, 8}, px);
  const auto a = ToyImageEncoder(3, 4, 16, 7).encode(image);
  const auto b = ToyImageEncoder(3, 4, 16, 7).encode(Tensor({3, 8, 8}, px));
  const auto c = ToyImageEncoder(3, 4, 16, 8).encode(image);
  EXPECT_EQ(values(a.tokens), values(b.tokens));
  EXPECT_EQ(values(a.cls), values(b.cls));
  EXPECT_NE(values(a.tokens), values(c.tokens));
}

TEST(ToyImageEncoder, ZeroImageGivesPositionOffsetsOnly) {
  const auto out = ToyImageEncoder(3, 4, 16, 7).encode(Tensor(Shape{3, 8, 8}));
  const Tensor pos = sinusoidal_positions(4, 16);
  for (std::size_t i = 0; i < pos.numel(); ++i) {
    EXPECT_FLOAT_EQ(out.tokens[i], static_cast<Real>(kImagePositionScale * pos[i]));
  }
}

TEST(ToyTextEncoder, DeterministicAndOneWordClassIsTheToken) {
  const ToyTextEncoder enc(64, 12, 5);
  const std::vector<std::string> s{"a", "red", "block"};
  const auto a = enc.encode(s), b = ToyTextEncoder(64, 12, 5).encode(s);
  EXPECT_EQ(values(a.cls), values(b.cls));
  EXPECT_EQ(a.tokens.shape(), (Shape{3, 12}));

  const std::vector<std::string> one{"block"};
  const auto single = enc.encode(one);
  for (std::size_t j = 0; j < 12; ++j) EXPECT_DOUBLE_EQ(single.cls[j], single.tokens[j]);
}

TEST(ToyTextEncoder, WordOrderChangesTheClassVector) {
  const ToyTextEncoder enc(64, 12, 5);
  const std::vector<std::string> ab{"red", "block"}, ba{"block", "red"};
  ASSERT_NE(enc.bucket("red"), enc.bucket("block"));
  const auto x = enc.encode(ab), y = enc.encode(ba);
  double diff = 0;
  for (std::size_t j = 0; j < 12; ++j) diff = std::max(diff, std::abs(double(x.cls[j] - y.cls[j])));
  EXPECT_GT(diff, 1e-4);
}

TEST(ToyTextEncoder, BatchMatchesSingleSentences) {
  const ToyTextEncoder enc(64, 12, 5);
  const std::vector<std::vector<std::string>> batch{{"a", "red", "block"}, {"nothing"}};
  const Tensor out = enc.encode_batch(batch);
  ASSERT_EQ(out.shape(), (Shape{2, 12}));
  for (std::size_t r = 0; r < 2; ++r) {
    const auto single = enc.encode(batch[r]);
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(out[r * 12 + j], single.cls[j], 1e-6);
  }
}

TEST(Synthetic, SixteenPairsEightyCaptions) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.pairs = 16;
  const auto data = generate_synthetic_dataset(cfg, dir.path());
  const auto loaded = load_manifest(data.manifest_path);
  ASSERT_EQ(loaded.size(), 16u);
  std::size_t captions = 0;
  for (const auto& e : loaded.entries) captions += e.captions.size();
  EXPECT_EQ(captions, 80u);
  EXPECT_EQ(load_samples(loaded).size(), 16u);
}

TEST(Synthetic, NoChangePairsHaveIdenticalEmbeddings) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.pairs = 30;
  cfg.nochange_fraction = 0.3;
  const auto samples = load_samples(generate_synthetic_dataset(cfg, dir.path()).manifest);
  std::size_t nochange = 0;
  for (const auto& s : samples) {
    if (s.change) {
      EXPECT_NE(values(s.emb_t1), values(s.emb_t2)) << s.id;
      continue;
    }
    ++nochange;
    EXPECT_EQ(values(s.emb_t1), values(s.emb_t2)) << s.id;
    EXPECT_EQ(values(s.cls_t1), values(s.cls_t2)) << s.id;
  }
  EXPECT_GT(nochange, 0u);
}

TEST(Synthetic, FixedSeedRegeneratesByteIdenticalFiles) {
  TempDir a, b;
  SyntheticConfig cfg;
  cfg.pairs = 6;
  cfg.seed = 11;
  const auto da = generate_synthetic_dataset(cfg, a.path());
  generate_synthetic_dataset(cfg, b.path());
  EXPECT_EQ(slurp(a / "manifest.jsonl"), slurp(b / "manifest.jsonl"));
  for (const auto& e : da.manifest.entries) {
    const auto rel = fs::relative(e.emb_t1, a.path());
    EXPECT_EQ(slurp(a / rel), slurp(b / rel)) << rel;
  }
}

TEST(Synthetic, ReversedEditSwapsAddAndRemove) {
  const BlockEdit add{EditKind::Add, 2, 1, 3};
  const BlockEdit back = add.reversed();
  EXPECT_EQ(back.kind, EditKind::Remove);
  EXPECT_EQ(back.color, 2u);
  EXPECT_EQ(back.row, 1u);
  EXPECT_EQ(back.col, 3u);
  EXPECT_EQ(BlockEdit{}.reversed().kind, EditKind::None);
}

TEST(Synthetic, LocationPhrasesAreDistinctPerCell) {
  std::set<std::set<std::string>> seen;
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      const auto words = tokenize(location_phrase(r, c, 4));
      seen.insert({words.begin(), words.end()});
    }
  }
  EXPECT_EQ(seen.size(), 16u);
}

TEST(Split, EightyTenTenOnHundredEntries) {
  const auto parts = split_and_subsample(fake_manifest(100, 0), {0.8, 0.1, 0.1}, 1.0, 3);
  EXPECT_EQ(parts.train.size(), 80u);
  EXPECT_EQ(parts.val.size(), 10u);
  EXPECT_EQ(parts.test.size(), 10u);
}

TEST(Split, KeepAllLeavesTrainingUnchanged) {
  const auto m = fake_manifest(50, 50);
  const auto full = split_and_subsample(m, {0.6, 0.1, 0.3}, 1.0, 8);
  std::size_t nochange = 0;
  for (const auto& e : full.train.entries) nochange += !e.change;
  EXPECT_GT(nochange, 0u);
  const auto unsplit = split_and_subsample(m, {1, 0, 0}, 1.0, 8);
  EXPECT_EQ(ids(unsplit.train), ids(m));
}

TEST(Split, FloorOfKeepFractionOfNoChange) {
  const auto parts = split_and_subsample(fake_manifest(10, 40), {1, 0, 0}, 0.15, 4);
  std::size_t change = 0, nochange = 0;
  for (const auto& e : parts.train.entries) (e.change ? change : nochange)++;
  EXPECT_EQ(change, 10u);
  EXPECT_EQ(nochange, 6u);
}

TEST(Split, SubsamplingTouchesTrainingOnly) {
  const auto m = fake_manifest(30, 70);
  const auto all = split_and_subsample(m, {0.6, 0.1, 0.3}, 1.0, 2);
  const auto sub = split_and_subsample(m, {0.6, 0.1, 0.3}, 0.15, 2);
  EXPECT_EQ(ids(all.val), ids(sub.val));
  EXPECT_EQ(ids(all.test), ids(sub.test));
  EXPECT_LT(sub.train.size(), all.train.size());
}

TEST(Split, DisjointAndCoveringForManySeeds) {
  const auto m = fake_manifest(37, 26);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = split_and_subsample(m, {0.6, 0.1, 0.3}, 1.0, seed);
    std::set<std::string> all;
    for (const auto* part : {&p.train, &p.val, &p.test}) {
      for (const auto& e : part->entries) EXPECT_TRUE(all.insert(e.id).second) << e.id;
    }
    EXPECT_EQ(all, ids(m));
  }
}

TEST(Split, DeterministicPerSeed) {
  const auto m = fake_manifest(40, 40);
  EXPECT_EQ(ids(split_and_subsample(m, {0.8, 0.1, 0.1}, 0.15, 5).train),
            ids(split_and_subsample(m, {0.8, 0.1, 0.1}, 0.15, 5).train));
  EXPECT_NE(ids(split_and_subsample(m, {0.8, 0.1, 0.1}, 0.15, 5).train),
            ids(split_and_subsample(m, {0.8, 0.1, 0.1}, 0.15, 6).train));
}

TEST(Split, BadFractionsOrKeepRejected) {
  const auto m = fake_manifest(10, 0);
  EXPECT_THROW(split_and_subsample(m, {0.8, 0.1, 0.2}, 1.0, 0), ConfigError);
  EXPECT_THROW(split_and_subsample(m, {1.1, -0.1, 0}, 1.0, 0), ConfigError);
  EXPECT_THROW(split_and_subsample(m, {0.8, 0.1, 0.1}, 0.0, 0), ConfigError);
  EXPECT_THROW(split_and_subsample(m, {0.8, 0.1, 0.1}, 1.5, 0), ConfigError);
}

TEST(Split, MergeRejectsSharedIds) {
  const auto m = fake_manifest(3, 0);
  EXPECT_EQ(merge_manifests({m, fake_manifest(0, 0)}).size(), 3u);
  EXPECT_THROW(merge_manifests({m, m}), ConfigError);
}
