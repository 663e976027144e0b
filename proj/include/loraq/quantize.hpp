#pragma once

#include <cstdint>
#include <vector>

#include "loraq/format.hpp"
#include "loraq/matrix.hpp"

namespace loraq {

/// Packed blockwise encoding of a matrix.
///
/// Each row is split into ceil(cols / block_size) blocks, the last one zero-padded.
/// Codes are packed LSB-first into bytes; every row starts on a fresh byte. Scales hold
/// one entry per block in row-major block order: the e8m0 byte or the fp16 bit pattern.
struct QuantizedTensor {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  FormatSpec format;
  std::vector<std::uint8_t> codes;
  std::vector<std::uint16_t> scales;

  Eigen::Index blocks_per_row() const;
  Eigen::Index pad_count() const;
  std::size_t bytes_per_row() const;
  std::size_t expected_code_bytes() const;
  std::size_t expected_scale_count() const;

  /// Code of element (r, c), padding included (c < blocks_per_row * block_size).
  std::uint64_t code_at(Eigen::Index r, Eigen::Index c) const;
  /// Decoded scale of the block holding element (r, c).
  double scale_at(Eigen::Index r, Eigen::Index c) const;

  friend bool operator==(const QuantizedTensor &, const QuantizedTensor &) = default;
};

QuantizedTensor quantize_blockwise(const Matrix &m, const FormatSpec &spec);
Matrix dequantize(const QuantizedTensor &t);

/// dequantize(quantize_blockwise(m, spec)) without materializing the packed codes.
Matrix fake_quant(const Matrix &m, const FormatSpec &spec);

/// Decoded value of an e8m0 scale byte.
double e8m0_to_double(std::uint16_t stored);

} // namespace loraq
