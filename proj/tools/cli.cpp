#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "itsr/config.hpp"
#include "itsr/errors.hpp"
#include "itsr/metrics.hpp"
#include "itsr/retrieval.hpp"
#include "itsr/selfcheck.hpp"
#include "itsr/synthetic.hpp"
#include "selfcheck_bridge.hpp"

namespace itsr::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::vector<BitemporalSample> load_dataset(const std::vector<fs::path>& manifests) {
  std::vector<DatasetManifest> parts;
  for (const auto& m : manifests) parts.push_back(load_manifest(m));
  return load_samples(merge_manifests(parts));
}

void check_dim(const Model& model, const std::vector<BitemporalSample>& samples) {
  if (samples.empty()) throw ConfigError("manifest has no pairs");
  const std::size_t want = model.config().fusion.embed_dim;
  if (samples.front().dim() != want) {
    throw ConfigError("checkpoint expects embedding width " + std::to_string(want) +
                      " but the data has " + std::to_string(samples.front().dim()));
  }
}

// --- synth -------------------------------------------------------------------

struct SynthArgs {
  SyntheticConfig config;
  fs::path out;
  bool force = false;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.config.pairs < 2) throw ConfigError("--pairs must be at least 2");
  if (fs::exists(a.out) && !fs::is_empty(a.out)) {
    if (!a.force) {
      throw UsageError("output directory " + a.out.string() +
                       " is not empty (use --force to overwrite)");
    }
    fs::remove_all(a.out / "emb");
    fs::remove(a.out / "manifest.jsonl");
    fs::remove(a.out / "config.txt");
  }
  ensure_dir(a.out);
  const auto ds = generate_synthetic_dataset(a.config, a.out);
  std::ostringstream cfg;
  cfg << "pairs = " << a.config.pairs << "\ngrid = " << a.config.grid
      << "\nseed = " << a.config.seed << "\ndim = " << a.config.embed_dim
      << "\ncell_pixels = " << a.config.cell_pixels
      << "\nnochange_fraction = " << a.config.nochange_fraction
      << "\nbackground_density = " << a.config.background_density << '\n';
  write_text(a.out / "config.txt", cfg.str());
  out << ds.manifest_path.string() << '\n';
  return kOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  fs::path config_file;
  fs::path resume;
  std::vector<Setting> overrides;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig rc = resolve_run_config(a.config_file, a.overrides);
  if (rc.out_dir.empty()) throw ConfigError("no output directory given (--out)");
  rc.validate();

  const DatasetManifest all = load_manifest(rc.manifest);
  DatasetManifest train_m, val_m;
  std::optional<DatasetManifest> test_m;
  if (rc.val_manifest.empty()) {
    auto parts = split_and_subsample(all, rc.split, rc.nochange_keep, rc.train.seed);
    train_m = std::move(parts.train);
    val_m = std::move(parts.val);
    test_m = std::move(parts.test);
  } else {
    train_m = split_and_subsample(all, {1.0, 0.0, 0.0}, rc.nochange_keep, rc.train.seed).train;
    val_m = load_manifest(rc.val_manifest);
  }
  const auto train_set = load_samples(train_m);
  const auto val_set = load_samples(val_m);
  if (train_set.size() < 2) throw ConfigError("training split has fewer than two pairs");

  const std::size_t dim = train_set.front().dim();
  if (rc.model.fusion.embed_dim == 0) rc.model.fusion.embed_dim = dim;
  if (rc.model.fusion.embed_dim != dim) {
    throw ConfigError("embed_dim is " + std::to_string(rc.model.fusion.embed_dim) +
                      " but the data has width " + std::to_string(dim));
  }
  rc.model.fusion.validate();

  ensure_dir(rc.out_dir);
  write_text(rc.out_dir / "config.txt", rc.to_text());
  write_manifest(rc.out_dir / "train.jsonl", train_m);
  write_manifest(rc.out_dir / "val.jsonl", val_m);
  if (test_m) write_manifest(rc.out_dir / "test.jsonl", *test_m);

  std::optional<Model> model;
  TrainRunOptions options;
  options.out_dir = rc.out_dir;
  if (!a.resume.empty()) {
    auto loaded = load_checkpoint(a.resume, rc.model);
    options.resume = std::move(loaded.progress);
    model.emplace(std::move(loaded.model));
  } else {
    model.emplace(rc.model);
  }
  options.on_epoch = [&out](const EpochRecord& r) {
    out << "epoch " << r.epoch << " loss " << std::setprecision(6) << r.loss
        << " val_recall_i2t " << r.val.image_to_text << " val_recall_t2i "
        << r.val.text_to_image << " kappa " << r.kappa << '\n';
  };
  const auto result = train(*model, rc.train, train_set, val_set, options);
  out << "best epoch " << result.best_epoch << " (mean recall@1 " << result.best_val.mean()
      << ")\n"
      << "checkpoints: " << (rc.out_dir / "best.tsrc").string() << ", "
      << (rc.out_dir / "final.tsrc").string() << '\n';
  return kOk;
}

// --- evaluate ----------------------------------------------------------------

struct EvaluateArgs {
  fs::path checkpoint;
  std::vector<fs::path> manifests;
  fs::path config_file;
  std::size_t rounds = 5;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::string scope = "all";
  bool all_captions = false;
  fs::path out;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  if (a.k == 0) throw UsageError("--k must be at least 1");
  if (a.rounds == 0) throw UsageError("--rounds must be at least 1");
  std::vector<Scope> scopes;
  if (a.scope == "all") {
    scopes = {Scope::Full, Scope::Change, Scope::NoChange};
  } else {
    scopes = {parse_scope(a.scope)};
  }

  std::optional<LoadedCheckpoint> loaded;
  if (!a.config_file.empty()) {
    RunConfig rc = resolve_run_config(a.config_file, {});
    if (rc.model.fusion.embed_dim == 0) {
      rc.model.fusion.embed_dim = read_checkpoint_config(a.checkpoint).fusion.embed_dim;
    }
    loaded.emplace(load_checkpoint(a.checkpoint, rc.model));
  } else {
    loaded.emplace(load_checkpoint(a.checkpoint));
  }
  Model& model = loaded->model;
  const auto samples = load_dataset(a.manifests);
  check_dim(model, samples);

  ensure_dir(a.out);
  std::ostringstream cfg;
  cfg << "checkpoint = " << a.checkpoint.string() << '\n';
  for (const auto& m : a.manifests) cfg << "manifest = " << m.string() << '\n';
  cfg << "rounds = " << a.rounds << "\nk = " << a.k << "\nseed = " << a.seed
      << "\nscope = " << a.scope << "\nall_captions = " << (a.all_captions ? "true" : "false")
      << '\n';
  write_text(a.out / "eval_config.txt", cfg.str());

  EvaluationOptions opt;
  opt.rounds = a.rounds;
  opt.k = a.k;
  opt.seed = a.seed;
  opt.scopes = scopes;
  opt.all_captions = a.all_captions;
  opt.results_dir = a.out;
  const auto reports = evaluate(compute_features(model, samples), samples, opt);
  write_report(a.out / "report.jsonl", reports);

  auto fmt = [](const std::optional<MetricValues>& v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4);
    if (!v) return std::string("    n/a    n/a    n/a    n/a");
    s << std::setw(7) << v->bleu1 << std::setw(7) << v->bleu4 << std::setw(7) << v->meteor
      << std::setw(7) << v->rouge_l;
    return s.str();
  };
  out << "task scope        BLEU-1 BLEU-4 METEOR ROUGE-L\n";
  for (const auto& r : reports) {
    for (const TaskScore* s : {&r.text_to_image, &r.image_to_text}) {
      std::ostringstream label;
      label << std::left << std::setw(5) << to_string(s->task) << std::setw(10)
            << to_string(s->scope);
      out << label.str() << fmt(s->mean) << '\n';
    }
    std::ostringstream label;
    label << std::left << std::setw(5) << "avg" << std::setw(10) << to_string(r.text_to_image.scope);
    out << label.str() << fmt(r.cross_task_average) << '\n';
  }
  out << "report: " << (a.out / "report.jsonl").string() << '\n';
  return kOk;
}

// --- query -------------------------------------------------------------------

struct QueryArgs {
  fs::path checkpoint;
  fs::path manifest;
  std::string text;
  std::string pair;
  std::size_t k = 5;
};

int cmd_query(const QueryArgs& a, std::ostream& out) {
  if (a.k == 0) throw UsageError("--k must be at least 1");
  auto loaded = load_checkpoint(a.checkpoint);
  Model& model = loaded.model;
  const auto samples = load_samples(load_manifest(a.manifest));
  check_dim(model, samples);
  const FeatureBank bank = compute_features(model, samples);

  std::vector<Hit> hits;
  RetrievalArchive archive;
  if (!a.text.empty()) {
    const auto words = tokenize(a.text);
    if (words.empty()) throw UsageError("--text has no words");
    archive = archive_from_bank(bank, samples, Modality::Image);
    Tensor q;
    {
      NoGradScope no_grad;
      const std::vector<std::vector<std::string>> one{words};
      q = model.encode_texts(one);
    }
    hits = query_topk(archive, q.data(), a.k);
  } else {
    std::size_t row = samples.size();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].id == a.pair) row = i;
    }
    if (row == samples.size()) throw LookupError("unknown pair id '" + a.pair + "'");
    archive = archive_from_bank(bank, samples, Modality::Text);
    const std::size_t dim = bank.images.dim(1);
    hits = query_topk(archive, bank.images.data().subspan(row * dim, dim), a.k);
  }
  for (std::size_t i = 0; i < hits.size(); ++i) {
    nlohmann::ordered_json line;
    line["rank"] = i + 1;
    line["id"] = hits[i].id;
    line["score"] = hits[i].score;
    if (!archive.captions.empty()) {
      line["caption"] = archive.captions[hits[i].row];
    } else {
      for (const auto& s : samples) {
        if (s.id == hits[i].id) line["caption"] = s.captions[0].text;
      }
    }
    out << line.dump() << '\n';
  }
  return kOk;
}

// --- selfcheck ---------------------------------------------------------------

int cmd_selfcheck(const std::string& fault_op, std::ostream& out) {
  std::vector<BridgedOutcome> all = double_precision_gradient_checks(fault_op);
  for (auto* suite : {&retrieval_checks, &metric_checks}) {
    for (auto& c : (*suite)()) all.push_back({c.suite, c.name, c.passed, c.error, c.detail});
  }
  std::size_t failed = 0;
  for (const auto& c : all) {
    out << (c.passed ? "PASS " : "FAIL ") << c.suite << '/' << c.name << "  error "
        << std::setprecision(3) << c.error;
    if (!c.passed && !c.detail.empty()) out << "  (" << c.detail << ')';
    out << '\n';
    if (!c.passed) ++failed;
  }
  out << (all.size() - failed) << '/' << all.size() << " checks passed";
  if (failed) {
    out << "; failing:";
    for (const auto& c : all) {
      if (!c.passed) out << ' ' << c.suite << '/' << c.name;
    }
  }
  out << '\n';
  return failed ? kFailure : kOk;
}

// Flags that map one-to-one onto RunConfig keys.
struct KeyFlag {
  const char* flag;
  const char* key;
  const char* help;
};

constexpr KeyFlag kTrainFlags[] = {
    {"--manifest", "manifest", "training manifest (split unless --val-manifest is given)"},
    {"--val-manifest", "val_manifest", "validation manifest"},
    {"--out", "out", "output directory"},
    {"--split", "split", "train,val,test fractions (default 0.8,0.1,0.1)"},
    {"--nochange-keep", "nochange_keep", "fraction of no-change training pairs kept (0.15)"},
    {"--fusion", "fusion", "gff-sub, gff-concat or tff"},
    {"--fusion-stages", "fusion_stages", "number of fusion stages l"},
    {"--heads", "heads", "attention heads n"},
    {"--head-dim", "head_dim", "per-head width d (0: embed_dim / heads)"},
    {"--dropout", "dropout", "dropout rate inside the fusion block"},
    {"--epochs", "epochs", "training epochs"},
    {"--batch-size", "batch_size", "mini-batch size b"},
    {"--lr", "lr", "learning rate"},
    {"--weight-decay", "weight_decay", "weight decay"},
    {"--momentum", "momentum", "SGD momentum"},
    {"--seed", "seed", "random seed"},
    {"--batching", "batching", "plain or distinct-pairs"},
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bitemporal image / text retrieval: training and evaluation", "itsr"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic dataset");
  s->add_option("--pairs", synth.config.pairs, "number of image pairs")->capture_default_str();
  s->add_option("--grid", synth.config.grid, "cells per side")->capture_default_str();
  s->add_option("--seed", synth.config.seed, "random seed")->capture_default_str();
  s->add_option("--dim", synth.config.embed_dim, "embedding width")->capture_default_str();
  s->add_option("--nochange-fraction", synth.config.nochange_fraction,
                "fraction of unchanged pairs")
      ->capture_default_str();
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_flag("--force", synth.force, "overwrite a non-empty output directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  for (const auto& f : kTrainFlags) {
    const std::string key = f.key;
    t->add_option_function<std::string>(
        f.flag, [&tr, key](const std::string& v) { tr.overrides.emplace_back(key, v); }, f.help);
  }
  t->add_flag_callback("--clip-style-kappa",
                       [&tr] { tr.overrides.emplace_back("clip_style_kappa", "true"); },
                       "initialise kappa to ln(1/0.07)");
  t->add_flag_callback("--train-text-encoder",
                       [&tr] { tr.overrides.emplace_back("train_text_encoder", "true"); },
                       "also train the toy text encoder table");
  t->add_option("--config", tr.config_file, "key = value config file (flags override it)");
  t->add_option("--resume", tr.resume, "continue from a checkpoint");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "leave-one-out retrieval evaluation");
  e->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
  e->add_option("--manifest", ev.manifests, "evaluation manifest (repeat to merge)")->required();
  e->add_option("--config", ev.config_file, "run config the checkpoint must match");
  e->add_option("--rounds", ev.rounds, "caption sampling rounds")->capture_default_str();
  e->add_option("--k", ev.k, "retrieved items per query")->capture_default_str();
  e->add_option("--seed", ev.seed, "caption sampling seed")->capture_default_str();
  e->add_option("--scope", ev.scope, "all, full, change or no_change")->capture_default_str();
  e->add_flag("--all-captions", ev.all_captions,
              "image-to-text archive holds all five captions per pair");
  e->add_option("--out", ev.out, "output directory")->required();

  QueryArgs q;
  auto* qu = app.add_subcommand("query", "rank an archive against one query");
  qu->add_option("--checkpoint", q.checkpoint, "model checkpoint")->required();
  qu->add_option("--manifest", q.manifest, "archive manifest")->required();
  auto* text = qu->add_option("--text", q.text, "sentence query (text to image)");
  auto* pair = qu->add_option("--pair", q.pair, "pair id query (image to text)");
  text->excludes(pair);
  pair->excludes(text);
  qu->add_option("--k", q.k, "results to print")->capture_default_str();

  std::string fault_op;
  auto* sc = app.add_subcommand("selfcheck", "gradient, retrieval and metric oracles");
  sc->add_option("--inject-grad-fault", fault_op,
                 "corrupt the backward rule of the named op (checker test fixture)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    if (qu->parsed() && q.text.empty() == q.pair.empty()) {
      throw UsageError("query needs exactly one of --text or --pair");
    }
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return kUsage;
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (e->parsed()) return cmd_evaluate(ev, out);
    if (qu->parsed()) return cmd_query(q, out);
    if (sc->parsed()) return cmd_selfcheck(fault_op, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsage;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << '\n';
    return kUsage;
  } catch (const ParseError& ex) {
    err << "parse error: " << ex.what() << '\n';
    return kUsage;
  } catch (const LookupError& ex) {
    err << "lookup error: " << ex.what() << '\n';
    return kUsage;
  } catch (const IoError& ex) {
    err << "I/O error: " << ex.what() << '\n';
    return kIo;
  } catch (const FormatError& ex) {
    err << "format error: " << ex.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& ex) {
    err << "I/O error: " << ex.what() << '\n';
    return kIo;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace itsr::cli
