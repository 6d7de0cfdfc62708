#pragma once

#include "itsr/abi.hpp"

#include <filesystem>

#include "itsr/tensor.hpp"

// TSRE embedding files: "TSRE", u16 version (1), u8 dtype (0 = f32),
// u8 reserved (0), u32 rows, u32 cols, then rows*cols little-endian f32 in
// row-major order.
namespace itsr::inline ITSR_ABI {

inline constexpr std::uint16_t kTsreVersion = 1;

/// Throws FormatError on a bad header and IoError on a short payload.
Tensor read_embedding_file(const std::filesystem::path& path);
void write_embedding_file(const std::filesystem::path& path, const Tensor& matrix);

}  // namespace itsr
