#include "itsr/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "itsr/binary_io.hpp"
#include "itsr/errors.hpp"

namespace itsr::inline ITSR_ABI {

namespace fs = std::filesystem;

Model::Model(const ModelConfig& config)
    : config_(config),
      text_encoder_(config.text_vocab, config.fusion.embed_dim, config.seed) {
  config_.fusion.validate();
  Rng rng = Rng::stream(config.seed, "init");
  if (config_.fusion.strategy == FusionStrategy::Tff) tff_ = TffParams(config_.fusion, rng);
  image_head_ = ProjectionHead(config_.fusion.fused_dim(), rng, config_.head_hidden,
                               config_.head_output);
  text_head_ = ProjectionHead(config_.fusion.embed_dim, rng, config_.head_hidden,
                              config_.head_output);
  kappa_ = Tensor::scalar(static_cast<Real>(config_.initial_kappa()));
  kappa_.set_requires_grad();
  text_encoder_.table().set_requires_grad(config_.train_text_encoder);
}

namespace {

// Token-major stack of per-pair matrices (or vectors) without tracking.
Tensor stack_inputs(std::span<const BitemporalSample* const> pairs,
                    Tensor BitemporalSample::*field, std::size_t expect_cols) {
  const Tensor& first = pairs.front()->*field;
  const std::size_t per = first.numel();
  std::vector<Real> data;
  data.reserve(per * pairs.size());
  for (const auto* p : pairs) {
    const Tensor& t = p->*field;
    if (t.shape() != first.shape()) {
      throw ShapeError("pair '" + p->id + "' has embeddings " + shape_string(t.shape()) +
                       ", batch expects " + shape_string(first.shape()));
    }
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor({per * pairs.size() / expect_cols, expect_cols}, std::move(data));
}

}  // namespace

Tensor Model::fuse(std::span<const BitemporalSample* const> pairs, Rng& rng, Mode mode) {
  if (pairs.empty()) throw ShapeError("cannot fuse an empty batch");
  const std::size_t d = config_.fusion.embed_dim;
  if (pairs.front()->dim() != d) {
    throw ConfigError("model expects embedding width " + std::to_string(d) + ", pair '" +
                      pairs.front()->id + "' has " + std::to_string(pairs.front()->dim()));
  }
  switch (config_.fusion.strategy) {
    case FusionStrategy::GffSubtract:
      return gff_subtract(stack_inputs(pairs, &BitemporalSample::cls_t1, d),
                          stack_inputs(pairs, &BitemporalSample::cls_t2, d));
    case FusionStrategy::GffConcat:
      return gff_concat(stack_inputs(pairs, &BitemporalSample::cls_t1, d),
                        stack_inputs(pairs, &BitemporalSample::cls_t2, d));
    case FusionStrategy::Tff:
      return tff_fuse(stack_inputs(pairs, &BitemporalSample::emb_t1, d),
                      stack_inputs(pairs, &BitemporalSample::emb_t2, d), tff_,
                      pairs.front()->tokens(), rng, mode);
  }
  throw ConfigError("unknown fusion strategy");
}

Tensor Model::encode_images(std::span<const BitemporalSample* const> pairs, Rng& rng,
                            Mode mode) {
  return project(image_head_, fuse(pairs, rng, mode));
}

Tensor Model::encode_texts(std::span<const std::vector<std::string>> sentences) {
  return project(text_head_, text_encoder_.encode_batch(sentences));
}

std::vector<ParamRef> Model::trainable() {
  ParamCollector c = state();
  std::vector<ParamRef> out;
  for (auto& p : c.params) {
    if (p.name == "text_encoder.table" && !config_.train_text_encoder) continue;
    out.push_back(std::move(p));
  }
  return out;
}

ParamCollector Model::state() {
  ParamCollector c;
  if (config_.fusion.strategy == FusionStrategy::Tff) tff_.collect("fusion", c);
  image_head_.collect("image_head", c);
  text_head_.collect("text_head", c);
  c.add("kappa", kappa_, false);
  c.add("text_encoder.table", text_encoder_.table());
  return c;
}

void Model::clamp_kappa() {
  kappa_[0] = std::clamp(kappa_[0], static_cast<Real>(-kKappaLimit),
                         static_cast<Real>(kKappaLimit));
}

// --- checkpoint container ---------------------------------------------------

namespace {

struct Record {
  std::vector<std::uint32_t> dims;
  std::vector<float> payload;
};

using Records = std::map<std::string, Record>;

// 64-bit values travel as four 16-bit limbs, each exact in f32.
Record pack_u64(std::uint64_t v) {
  Record r{{4}, {}};
  for (int i = 0; i < 4; ++i) r.payload.push_back(static_cast<float>((v >> (16 * i)) & 0xffff));
  return r;
}

std::uint64_t unpack_u64(const Record& r, const std::string& name) {
  if (r.payload.size() != 4) throw FormatError("checkpoint record " + name + " is malformed");
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const float limb = r.payload[i];
    if (!(limb >= 0.0f && limb <= 65535.0f) || limb != std::floor(limb)) {
      throw FormatError("checkpoint record " + name + " is malformed");
    }
    v |= static_cast<std::uint64_t>(limb) << (16 * i);
  }
  return v;
}

Record pack_tensor(const Tensor& t) {
  Record r;
  for (auto e : t.shape()) r.dims.push_back(static_cast<std::uint32_t>(e));
  r.payload.assign(t.data().begin(), t.data().end());
  return r;
}

Record pack_values(const std::vector<Real>& v) {
  return Record{{static_cast<std::uint32_t>(v.size())}, {v.begin(), v.end()}};
}

void put_config(Records& out, const ModelConfig& c) {
  const auto& f = c.fusion;
  out["meta/strategy"] = pack_u64(static_cast<std::uint64_t>(f.strategy));
  out["meta/embed_dim"] = pack_u64(f.embed_dim);
  out["meta/heads"] = pack_u64(f.heads);
  out["meta/head_dim"] = pack_u64(f.d());
  out["meta/stages"] = pack_u64(f.stages);
  out["meta/ffn_hidden"] = pack_u64(f.hidden());
  out["meta/conv_kernel"] = pack_u64(f.conv_kernel);
  out["meta/dropout"] = pack_u64(std::bit_cast<std::uint64_t>(f.dropout));
  out["meta/head_hidden"] = pack_u64(c.head_hidden);
  out["meta/head_output"] = pack_u64(c.head_output);
  out["meta/text_vocab"] = pack_u64(c.text_vocab);
  out["meta/clip_style_kappa"] = pack_u64(c.clip_style_kappa);
  out["meta/train_text_encoder"] = pack_u64(c.train_text_encoder);
  out["meta/seed"] = pack_u64(c.seed);
}

const Record& need(const Records& in, const std::string& name) {
  auto it = in.find(name);
  if (it == in.end()) throw FormatError("checkpoint lacks record '" + name + "'");
  return it->second;
}

ModelConfig get_config(const Records& in) {
  auto u = [&](const char* name) { return unpack_u64(need(in, name), name); };
  ModelConfig c;
  const auto strategy = u("meta/strategy");
  if (strategy > 2) throw FormatError("checkpoint has unknown fusion strategy");
  c.fusion.strategy = static_cast<FusionStrategy>(strategy);
  c.fusion.embed_dim = u("meta/embed_dim");
  c.fusion.heads = u("meta/heads");
  c.fusion.head_dim = u("meta/head_dim");
  c.fusion.stages = u("meta/stages");
  c.fusion.ffn_hidden = u("meta/ffn_hidden");
  c.fusion.conv_kernel = u("meta/conv_kernel");
  c.fusion.dropout = std::bit_cast<double>(u("meta/dropout"));
  c.head_hidden = u("meta/head_hidden");
  c.head_output = u("meta/head_output");
  c.text_vocab = u("meta/text_vocab");
  c.clip_style_kappa = u("meta/clip_style_kappa") != 0;
  c.train_text_encoder = u("meta/train_text_encoder") != 0;
  c.seed = u("meta/seed");
  return c;
}

void write_records(const fs::path& path, const Records& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write("TSRC", 4);
  binary::write_le<std::uint16_t>(out, kTsrcVersion);
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, r] : records) {
    binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) binary::write_le<std::uint32_t>(out, d);
    for (float v : r.payload) binary::write_le<float>(out, v);
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Records read_records(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string ctx = path.string();
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "TSRC") {
    throw FormatError(ctx + ": not a checkpoint (bad magic)");
  }
  try {
    const auto version = binary::read_le<std::uint16_t>(in, ctx);
    if (version != kTsrcVersion) {
      throw FormatError(ctx + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = binary::read_le<std::uint32_t>(in, ctx);
    Records records;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = binary::read_le<std::uint32_t>(in, ctx);
      if (len == 0 || len > 4096) throw FormatError(ctx + ": corrupt record name");
      std::string name(len, '\0');
      if (!in.read(name.data(), len)) throw FormatError(ctx + ": truncated record name");
      Record r;
      const auto rank = binary::read_le<std::uint32_t>(in, ctx);
      if (rank > 8) throw FormatError(ctx + ": corrupt rank in record " + name);
      std::uint64_t n = 1;
      for (std::uint32_t k = 0; k < rank; ++k) {
        r.dims.push_back(binary::read_le<std::uint32_t>(in, ctx));
        n *= r.dims.back();
        if (n > (std::uint64_t{1} << 32)) throw FormatError(ctx + ": corrupt shape in " + name);
      }
      r.payload.resize(n);
      for (auto& v : r.payload) v = binary::read_le<float>(in, ctx);
      records[name] = std::move(r);
    }
    return records;
  } catch (const IoError& e) {
    throw FormatError(std::string("corrupt checkpoint: ") + e.what());
  }
}

void fill(std::span<Real> dst, const Record& r, const Shape& shape, const std::string& name) {
  Shape stored(r.dims.begin(), r.dims.end());
  if (stored != shape) {
    throw FormatError("checkpoint record '" + name + "' has shape " + shape_string(stored) +
                      ", model expects " + shape_string(shape));
  }
  std::copy(r.payload.begin(), r.payload.end(), dst.begin());
}

}  // namespace

void save_checkpoint(const fs::path& path, Model& model, const TrainingProgress& progress) {
  Records records;
  put_config(records, model.config());
  records["meta/epochs_done"] = pack_u64(progress.epochs_done);
  ParamCollector state = model.state();
  for (const auto& p : state.params) records[p.name] = pack_tensor(p.tensor);
  for (const auto& n : state.norms) {
    records[n.name + ".running_mean"] = pack_values(n.norm->running_mean);
    records[n.name + ".running_var"] = pack_values(n.norm->running_var);
    records[n.name + ".batches_seen"] = pack_u64(n.norm->batches_seen);
  }
  for (const auto& [name, v] : progress.velocities) records["velocity/" + name] = pack_values(v);
  write_records(path, records);
}

ModelConfig read_checkpoint_config(const fs::path& path) {
  return get_config(read_records(path));
}

namespace {

LoadedCheckpoint restore(const Records& records) {
  LoadedCheckpoint out{Model(get_config(records)), {}};
  out.progress.epochs_done = unpack_u64(need(records, "meta/epochs_done"), "meta/epochs_done");
  ParamCollector state = out.model.state();
  for (auto& p : state.params) {
    fill(p.tensor.data(), need(records, p.name), p.tensor.shape(), p.name);
  }
  for (auto& n : state.norms) {
    const Shape width{n.norm->channels()};
    fill(n.norm->running_mean, need(records, n.name + ".running_mean"), width, n.name);
    fill(n.norm->running_var, need(records, n.name + ".running_var"), width, n.name);
    n.norm->batches_seen = unpack_u64(need(records, n.name + ".batches_seen"), n.name);
  }
  for (const auto& [name, r] : records) {
    if (name.rfind("velocity/", 0) != 0) continue;
    out.progress.velocities[name.substr(9)] = std::vector<Real>(r.payload.begin(), r.payload.end());
  }
  return out;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const fs::path& path) { return restore(read_records(path)); }

LoadedCheckpoint load_checkpoint(const fs::path& path, const ModelConfig& expected) {
  const Records records = read_records(path);
  const ModelConfig stored = get_config(records);
  auto check = [](const char* field, auto have, auto want) {
    if (have != want) {
      throw ConfigError("checkpoint " + std::string(field) + " is " + std::to_string(have) +
                        " but the run expects " + std::to_string(want));
    }
  };
  check("fusion strategy", static_cast<int>(stored.fusion.strategy),
        static_cast<int>(expected.fusion.strategy));
  check("embedding width", stored.fusion.embed_dim, expected.fusion.embed_dim);
  check("head output width", stored.head_output, expected.head_output);
  check("head hidden width", stored.head_hidden, expected.head_hidden);
  check("text vocabulary", stored.text_vocab, expected.text_vocab);
  if (stored.fusion.strategy == FusionStrategy::Tff) {
    check("heads", stored.fusion.heads, expected.fusion.heads);
    check("head width", stored.fusion.d(), expected.fusion.d());
    check("fusion stages", stored.fusion.stages, expected.fusion.stages);
    check("feed-forward width", stored.fusion.hidden(), expected.fusion.hidden());
    check("conv kernel", stored.fusion.conv_kernel, expected.fusion.conv_kernel);
  }
  return restore(records);
}

}  // namespace itsr
