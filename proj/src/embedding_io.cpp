#include "itsr/embedding_io.hpp"

#include <fstream>

#include "itsr/binary_io.hpp"
#include "itsr/errors.hpp"

namespace itsr::inline ITSR_ABI {

Tensor read_embedding_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding file " + path.string());
  const std::string ctx = path.string();

  char magic[4];
  if (!in.read(magic, 4)) throw IoError(ctx + ": unexpected end of file");
  if (std::string(magic, 4) != "TSRE") throw FormatError(ctx + ": bad magic");
  const auto version = binary::read_le<std::uint16_t>(in, ctx);
  if (version != kTsreVersion) {
    throw FormatError(ctx + ": unsupported version " + std::to_string(version));
  }
  const auto dtype = binary::read_le<std::uint8_t>(in, ctx);
  if (dtype != 0) throw FormatError(ctx + ": unsupported dtype " + std::to_string(dtype));
  const auto reserved = binary::read_le<std::uint8_t>(in, ctx);
  if (reserved != 0) throw FormatError(ctx + ": reserved byte must be 0");
  const auto rows = binary::read_le<std::uint32_t>(in, ctx);
  const auto cols = binary::read_le<std::uint32_t>(in, ctx);
  if (rows == 0 || cols == 0) {
    throw FormatError(ctx + ": empty sequence (" + std::to_string(rows) + "x" +
                      std::to_string(cols) + ")");
  }

  const auto header_end = in.tellg();
  in.seekg(0, std::ios::end);
  const auto remaining = static_cast<std::uint64_t>(in.tellg() - header_end);
  in.seekg(header_end);
  const std::uint64_t needed = std::uint64_t{rows} * cols * 4;
  if (needed > remaining) {
    throw IoError(ctx + ": truncated payload, header promises " +
                  std::to_string(needed) + " bytes, file holds " +
                  std::to_string(remaining));
  }

  std::vector<Real> values(std::size_t{rows} * cols);
  for (auto& v : values) v = static_cast<Real>(binary::read_le<float>(in, ctx));
  return Tensor({rows, cols}, std::move(values));
}

void write_embedding_file(const std::filesystem::path& path, const Tensor& matrix) {
  if (matrix.rank() != 2) {
    throw ShapeError("embedding files hold matrices, got " +
                     shape_string(matrix.shape()));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write embedding file " + path.string());
  out.write("TSRE", 4);
  binary::write_le<std::uint16_t>(out, kTsreVersion);
  binary::write_le<std::uint8_t>(out, 0);
  binary::write_le<std::uint8_t>(out, 0);
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(matrix.dim(0)));
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(matrix.dim(1)));
  for (Real v : matrix.data()) binary::write_le<float>(out, static_cast<float>(v));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace itsr
