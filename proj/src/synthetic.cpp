#include "itsr/synthetic.hpp"

#include <cmath>
#include <cstdio>

#include "itsr/embedding_io.hpp"
#include "itsr/encoders.hpp"
#include "itsr/errors.hpp"
#include "itsr/rng.hpp"

namespace itsr::inline ITSR_ABI {

namespace fs = std::filesystem;

BlockEdit BlockEdit::reversed() const {
  BlockEdit r = *this;
  if (kind == EditKind::Add) r.kind = EditKind::Remove;
  else if (kind == EditKind::Remove) r.kind = EditKind::Add;
  return r;
}

namespace {

std::string axis_word(std::size_t i, std::size_t n, const char* low, const char* high,
                      const char* mid) {
  if (n == 1) return mid;
  if (n == 2) return i == 0 ? low : high;
  if (n == 3) return i == 0 ? low : (i == 1 ? mid : high);
  if (n == 4) {
    switch (i) {
      case 0: return std::string(low) + "most";
      case 1: return low;
      case 2: return high;
      default: return std::string(high) + "most";
    }
  }
  return std::to_string(i + 1);
}

}  // namespace

std::string location_phrase(std::size_t row, std::size_t col, std::size_t grid) {
  if (grid > 4) {
    return "row " + std::to_string(row + 1) + " column " + std::to_string(col + 1);
  }
  const std::string r = axis_word(row, grid, "north", "south", "middle");
  const std::string c = axis_word(col, grid, "west", "east", "center");
  return r + " " + c;
}

std::array<std::string, kCaptionsPerPair> edit_captions(const BlockEdit& edit,
                                                        std::size_t grid) {
  if (edit.kind == EditKind::None) {
    return {"the scene is unchanged", "there is no change",
            "nothing has changed in the scene", "the two images look the same",
            "no blocks appear or disappear"};
  }
  const std::string c = kBlockColors.at(edit.color);
  const std::string loc = location_phrase(edit.row, edit.col, grid);
  if (edit.kind == EditKind::Add) {
    return {"a " + c + " block appears in the " + loc,
            "a new " + c + " block is added at the " + loc,
            "the " + loc + " gains a " + c + " block",
            "there is a " + c + " block in the " + loc + " now",
            "a " + c + " block has been built in the " + loc};
  }
  return {"the " + c + " block in the " + loc + " disappears",
          "a " + c + " block is removed from the " + loc,
          "the " + loc + " loses its " + c + " block",
          "there is no longer a " + c + " block in the " + loc,
          "the " + c + " block at the " + loc + " has been demolished"};
}

SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& cfg,
                                            const fs::path& out_dir) {
  if (cfg.pairs < 2) throw ConfigError("synthetic dataset needs at least 2 pairs");
  if (cfg.grid == 0 || cfg.cell_pixels == 0 || cfg.embed_dim == 0) {
    throw ConfigError("synthetic grid, cell size and embedding width must be positive");
  }
  if (!(cfg.nochange_fraction >= 0.0 && cfg.nochange_fraction <= 1.0) ||
      !(cfg.background_density >= 0.0 && cfg.background_density < 1.0)) {
    throw ConfigError("synthetic fractions out of range");
  }

  const std::size_t g = cfg.grid, cells = g * g, px = cfg.cell_pixels;
  const std::size_t side = g * px;
  constexpr std::size_t kChannels = 3;
  static constexpr Real kRgb[4][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};

  // Every (cell, colour, add/remove) class once before any repeats.
  std::vector<BlockEdit> classes;
  for (std::size_t cell = 0; cell < cells; ++cell)
    for (std::size_t color = 0; color < kBlockColors.size(); ++color)
      for (EditKind kind : {EditKind::Add, EditKind::Remove})
        classes.push_back({kind, color, cell / g, cell % g});
  Rng class_rng = Rng::stream(cfg.seed, "synthetic-classes");
  shuffle(classes.begin(), classes.end(), class_rng);

  const auto n_nochange = static_cast<std::size_t>(
      std::floor(cfg.nochange_fraction * static_cast<double>(cfg.pairs) + 1e-9));
  std::vector<bool> is_nochange(cfg.pairs, false);
  {
    std::vector<std::size_t> order(cfg.pairs);
    for (std::size_t i = 0; i < cfg.pairs; ++i) order[i] = i;
    Rng pick = Rng::stream(cfg.seed, "synthetic-nochange");
    shuffle(order.begin(), order.end(), pick);
    for (std::size_t i = 0; i < n_nochange; ++i) is_nochange[order[i]] = true;
  }

  const ToyImageEncoder encoder(kChannels, px, cfg.embed_dim, cfg.seed);
  fs::create_directories(out_dir / "emb");

  SyntheticDataset out;
  out.manifest_path = out_dir / "manifest.jsonl";
  std::size_t next_class = 0;
  for (std::size_t i = 0; i < cfg.pairs; ++i) {
    BlockEdit edit;
    if (!is_nochange[i]) edit = classes[next_class++ % classes.size()];

    // -1 marks an empty cell, otherwise a colour index.
    std::vector<int> before(cells, -1);
    Rng bg = Rng::stream(cfg.seed, "synthetic-background", i);
    for (std::size_t c = 0; c < cells; ++c) {
      if (bg.uniform() < cfg.background_density) {
        before[c] = static_cast<int>(bg.below(kBlockColors.size()));
      }
    }
    std::vector<int> after = before;
    const std::size_t edit_cell = edit.row * g + edit.col;
    if (edit.kind == EditKind::Add) {
      before[edit_cell] = -1;
      after[edit_cell] = static_cast<int>(edit.color);
    } else if (edit.kind == EditKind::Remove) {
      before[edit_cell] = static_cast<int>(edit.color);
      after[edit_cell] = -1;
    }

    auto render = [&](const std::vector<int>& layout) {
      Tensor image({kChannels, side, side});
      for (std::size_t c = 0; c < cells; ++c) {
        if (layout[c] < 0) continue;
        const std::size_t r0 = (c / g) * px, c0 = (c % g) * px;
        for (std::size_t ch = 0; ch < kChannels; ++ch)
          for (std::size_t y = 0; y < px; ++y)
            for (std::size_t x = 0; x < px; ++x)
              image[(ch * side + r0 + y) * side + c0 + x] = kRgb[layout[c]][ch];
      }
      const EncodedSequence enc = encoder.encode(image);
      Tensor rows({1 + cells, cfg.embed_dim});
      auto dst = rows.data();
      std::copy(enc.cls.data().begin(), enc.cls.data().end(), dst.begin());
      std::copy(enc.tokens.data().begin(), enc.tokens.data().end(),
                dst.begin() + static_cast<std::ptrdiff_t>(cfg.embed_dim));
      return rows;
    };

    char id[32];
    std::snprintf(id, sizeof id, "pair%04zu", i);
    ManifestEntry entry;
    entry.id = id;
    entry.captions = edit_captions(edit, g);
    entry.emb_t1 = out_dir / "emb" / (entry.id + "_t1.tsre");
    entry.emb_t2 = out_dir / "emb" / (entry.id + "_t2.tsre");
    entry.change = edit.kind != EditKind::None;
    write_embedding_file(entry.emb_t1, render(before));
    write_embedding_file(entry.emb_t2, render(after));
    out.manifest.entries.push_back(std::move(entry));
    out.edits.push_back(edit);
  }
  write_manifest(out.manifest_path, out.manifest);
  return out;
}

}  // namespace itsr
