#include "itsr/encoders.hpp"

#include <cmath>

#include "itsr/errors.hpp"
#include "itsr/ops.hpp"
#include "itsr/rng.hpp"

namespace itsr::inline ITSR_ABI {

Tensor sinusoidal_positions(std::size_t tokens, std::size_t dim) {
  Tensor pos({tokens, dim});
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) /
                                                static_cast<double>(dim));
      const double angle = static_cast<double>(t) * freq;
      pos.at(t, i) = static_cast<Real>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pos;
}

ToyImageEncoder::ToyImageEncoder(std::size_t channels, std::size_t patch,
                                 std::size_t dim, std::uint64_t seed,
                                 double position_scale)
    : channels_(channels), patch_(patch), dim_(dim), position_scale_(position_scale) {
  if (channels == 0 || patch == 0 || dim == 0) {
    throw ConfigError("image encoder extents must be positive");
  }
  const std::size_t fan_in = channels * patch * patch;
  projection_ = Tensor({fan_in, dim});
  Rng rng = Rng::stream(seed, "image-encoder");
  // Gain 2 keeps block patches well inside tanh's responsive range.
  const double bound = 2.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& w : projection_.data()) w = static_cast<Real>(rng.uniform(-bound, bound));
}

EncodedSequence ToyImageEncoder::encode(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != channels_) {
    throw ShapeError("toy image encoder expects [" + std::to_string(channels_) +
                     " x h x w], got " + shape_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h % patch_ != 0 || w % patch_ != 0) {
    throw ShapeError("image " + shape_string(image.shape()) +
                     " is not divisible into " + std::to_string(patch_) + "-pixel patches");
  }
  const std::size_t rows = h / patch_, cols = w / patch_, T = rows * cols;
  const std::size_t fan_in = channels_ * patch_ * patch_;
  Tensor flat({T, fan_in});
  for (std::size_t pr = 0; pr < rows; ++pr)
    for (std::size_t pc = 0; pc < cols; ++pc) {
      std::size_t k = 0;
      Real* dst = flat.data().data() + (pr * cols + pc) * fan_in;
      for (std::size_t c = 0; c < channels_; ++c)
        for (std::size_t y = 0; y < patch_; ++y)
          for (std::size_t x = 0; x < patch_; ++x)
            dst[k++] = image[(c * h + pr * patch_ + y) * w + pc * patch_ + x];
    }
  NoGradScope no_grad;
  Tensor patches = add(matmul(flat, projection_),
                       scale(sinusoidal_positions(T, dim_), static_cast<Real>(position_scale_)));
  Tensor cls = scale(mean_pool_tokens(tanh(patches), T),
                     static_cast<Real>(std::sqrt(static_cast<double>(T))))
                   .reshaped({dim_});
  return {cls, patches};
}

ToyTextEncoder::ToyTextEncoder(std::size_t vocab, std::size_t dim, std::uint64_t seed,
                               double position_scale)
    : vocab_(vocab), dim_(dim), seed_(seed), position_scale_(position_scale) {
  if (vocab == 0 || dim == 0) throw ConfigError("text encoder extents must be positive");
  table_ = Tensor({vocab, dim});
  Rng rng = Rng::stream(seed, "text-encoder");
  for (auto& w : table_.data()) w = static_cast<Real>(rng.uniform(-1.0, 1.0));
}

std::size_t ToyTextEncoder::bucket(const std::string& word) const {
  return static_cast<std::size_t>(fnv1a64(word) % vocab_);
}

EncodedSequence ToyTextEncoder::encode(std::span<const std::string> words) const {
  if (words.empty()) throw ShapeError("toy text encoder needs at least one word");
  NoGradScope no_grad;
  std::vector<std::size_t> idx;
  for (const auto& w : words) idx.push_back(bucket(w));
  Tensor tokens = tanh(add(gather_rows(table_, idx),
                           scale(sinusoidal_positions(idx.size(), dim_),
                                 static_cast<Real>(position_scale_))));
  Tensor cls = mean_pool_tokens(tokens, idx.size()).reshaped({dim_});
  return {cls, tokens};
}

Tensor ToyTextEncoder::encode_batch(
    std::span<const std::vector<std::string>> sentences) const {
  if (sentences.empty()) throw ShapeError("toy text encoder: empty batch");
  std::vector<std::size_t> idx;
  std::vector<std::size_t> offsets{0};
  std::size_t longest = 0;
  for (const auto& s : sentences) {
    if (s.empty()) throw ShapeError("toy text encoder needs at least one word");
    for (const auto& w : s) idx.push_back(bucket(w));
    offsets.push_back(idx.size());
    longest = std::max(longest, s.size());
  }
  const Tensor table_pos =
      scale(sinusoidal_positions(longest, dim_), static_cast<Real>(position_scale_));
  Tensor pos({idx.size(), dim_});
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
    for (std::size_t t = 0; t < offsets[s + 1] - offsets[s]; ++t)
      for (std::size_t j = 0; j < dim_; ++j) pos.at(offsets[s] + t, j) = table_pos.at(t, j);
  Tensor tokens = tanh(add(gather_rows(table_, idx), pos));
  return segment_mean(tokens, offsets);
}

}  // namespace itsr
