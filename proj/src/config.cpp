#include "itsr/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "itsr/errors.hpp"

namespace itsr::inline ITSR_ABI {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("config key '" + std::string(key) + "': '" + std::string(value) +
                    "' is not " + expected);
}

std::size_t to_count(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    bad_value(key, value, "a non-negative integer");
  }
  return out;
}

double to_double(std::string_view key, std::string_view value) {
  const std::string s(value);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    bad_value(key, value, "a number");
  }
  if (used != s.size()) bad_value(key, value, "a number");
  return out;
}

bool to_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "a boolean (true/false)");
}

SplitFractions to_split(std::string_view key, std::string_view value) {
  std::vector<double> parts;
  std::size_t start = 0;
  while (start <= value.size()) {
    const auto comma = value.find(',', start);
    const auto end = comma == std::string_view::npos ? value.size() : comma;
    parts.push_back(to_double(key, trim(value.substr(start, end - start))));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (parts.size() != 3) bad_value(key, value, "three comma-separated fractions");
  return {parts[0], parts[1], parts[2]};
}

// Shortest text that reads back to the same double.
std::string number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

using Setter = std::function<void(RunConfig&, std::string_view, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"manifest", [](RunConfig& c, auto, auto v) { c.manifest = std::string(v); }},
      {"val_manifest", [](RunConfig& c, auto, auto v) { c.val_manifest = std::string(v); }},
      {"out", [](RunConfig& c, auto, auto v) { c.out_dir = std::string(v); }},
      {"split", [](RunConfig& c, auto k, auto v) { c.split = to_split(k, v); }},
      {"nochange_keep", [](RunConfig& c, auto k, auto v) { c.nochange_keep = to_double(k, v); }},
      {"fusion",
       [](RunConfig& c, auto, auto v) { c.model.fusion.strategy = parse_fusion_strategy(v); }},
      {"fusion_stages",
       [](RunConfig& c, auto k, auto v) { c.model.fusion.stages = to_count(k, v); }},
      {"heads", [](RunConfig& c, auto k, auto v) { c.model.fusion.heads = to_count(k, v); }},
      {"head_dim", [](RunConfig& c, auto k, auto v) { c.model.fusion.head_dim = to_count(k, v); }},
      {"ffn_hidden",
       [](RunConfig& c, auto k, auto v) { c.model.fusion.ffn_hidden = to_count(k, v); }},
      {"conv_kernel",
       [](RunConfig& c, auto k, auto v) { c.model.fusion.conv_kernel = to_count(k, v); }},
      {"dropout", [](RunConfig& c, auto k, auto v) { c.model.fusion.dropout = to_double(k, v); }},
      {"embed_dim",
       [](RunConfig& c, auto k, auto v) { c.model.fusion.embed_dim = to_count(k, v); }},
      {"head_hidden", [](RunConfig& c, auto k, auto v) { c.model.head_hidden = to_count(k, v); }},
      {"head_output", [](RunConfig& c, auto k, auto v) { c.model.head_output = to_count(k, v); }},
      {"text_vocab", [](RunConfig& c, auto k, auto v) { c.model.text_vocab = to_count(k, v); }},
      {"clip_style_kappa",
       [](RunConfig& c, auto k, auto v) { c.model.clip_style_kappa = to_bool(k, v); }},
      {"train_text_encoder",
       [](RunConfig& c, auto k, auto v) { c.model.train_text_encoder = to_bool(k, v); }},
      {"batch_size", [](RunConfig& c, auto k, auto v) { c.train.batch_size = to_count(k, v); }},
      {"lr", [](RunConfig& c, auto k, auto v) { c.train.lr = to_double(k, v); }},
      {"weight_decay", [](RunConfig& c, auto k, auto v) { c.train.weight_decay = to_double(k, v); }},
      {"momentum", [](RunConfig& c, auto k, auto v) { c.train.momentum = to_double(k, v); }},
      {"epochs", [](RunConfig& c, auto k, auto v) { c.train.epochs = to_count(k, v); }},
      {"seed",
       [](RunConfig& c, auto k, auto v) {
         c.train.seed = to_count(k, v);
         c.model.seed = c.train.seed;
       }},
      {"batching", [](RunConfig& c, auto, auto v) { c.train.batching = parse_batch_policy(v); }},
  };
  return table;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second(*this, key, trim(value));
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << "manifest = " << manifest.string() << '\n'
      << "val_manifest = " << val_manifest.string() << '\n'
      << "out = " << out_dir.string() << '\n'
      << "split = " << number(split.train) << ',' << number(split.val) << ','
      << number(split.test) << '\n'
      << "nochange_keep = " << number(nochange_keep) << '\n'
      << "fusion = " << to_string(model.fusion.strategy) << '\n'
      << "fusion_stages = " << model.fusion.stages << '\n'
      << "heads = " << model.fusion.heads << '\n'
      << "head_dim = " << model.fusion.head_dim << '\n'
      << "ffn_hidden = " << model.fusion.ffn_hidden << '\n'
      << "conv_kernel = " << model.fusion.conv_kernel << '\n'
      << "dropout = " << number(model.fusion.dropout) << '\n'
      << "embed_dim = " << model.fusion.embed_dim << '\n'
      << "head_hidden = " << model.head_hidden << '\n'
      << "head_output = " << model.head_output << '\n'
      << "text_vocab = " << model.text_vocab << '\n'
      << "clip_style_kappa = " << (model.clip_style_kappa ? "true" : "false") << '\n'
      << "train_text_encoder = " << (model.train_text_encoder ? "true" : "false") << '\n'
      << "batch_size = " << train.batch_size << '\n'
      << "lr = " << number(train.lr) << '\n'
      << "weight_decay = " << number(train.weight_decay) << '\n'
      << "momentum = " << number(train.momentum) << '\n'
      << "epochs = " << train.epochs << '\n'
      << "seed = " << train.seed << '\n'
      << "batching = " << to_string(train.batching) << '\n';
  return out.str();
}

void RunConfig::validate() const {
  if (manifest.empty()) throw ConfigError("no training manifest given");
  train.validate();
  if (model.text_vocab == 0) throw ConfigError("text_vocab must be positive");
  if (model.head_hidden == 0 || model.head_output == 0) {
    throw ConfigError("projection head widths must be positive");
  }
  if (model.fusion.embed_dim > 0) model.fusion.validate();
}

std::vector<Setting> parse_settings(std::string_view text) {
  std::vector<Setting> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ParseError("expected key = value, got '" + std::string(line) + "'", line_no);
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("missing key before '='", line_no);
    if (!setters().count(key)) {
      throw ParseError("unknown config key '" + std::string(key) + "'", line_no);
    }
    out.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

std::vector<Setting> read_settings_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_settings(text.str());
}

RunConfig resolve_run_config(const std::filesystem::path& file,
                             const std::vector<Setting>& overrides) {
  RunConfig config;
  if (!file.empty()) {
    for (const auto& [k, v] : read_settings_file(file)) config.set(k, v);
  }
  for (const auto& [k, v] : overrides) config.set(k, v);
  return config;
}

}  // namespace itsr
