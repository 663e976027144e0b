#include "loraq/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <span>

namespace loraq {
namespace {

constexpr int kE8m0Bias = 127;
constexpr std::uint16_t kSmallestHalf = 0x0001;

// Smallest e in [-127, 127] with cmax * 2^e >= amax.
int e8m0_exponent(double amax, double cmax) {
  if (amax == 0)
    return -kE8m0Bias;
  int e = std::ilogb(amax) - std::ilogb(cmax);
  while (std::ldexp(cmax, e) < amax)
    ++e;
  while (std::ldexp(cmax, e - 1) >= amax)
    --e;
  return std::clamp(e, -kE8m0Bias, kE8m0Bias);
}

std::uint16_t pick_scale(double amax, const FormatSpec &f) {
  switch (f.scale_kind) {
  case ScaleKind::None: return 0;
  case ScaleKind::Fp16: return amax == 0 ? kSmallestHalf : half_ceil(amax / f.codec.max_value);
  case ScaleKind::E8m0:
    return static_cast<std::uint16_t>(e8m0_exponent(amax, f.codec.max_value) + kE8m0Bias);
  }
  return 0;
}

double scale_value(std::uint16_t stored, ScaleKind kind) {
  switch (kind) {
  case ScaleKind::None: return 1.0;
  case ScaleKind::Fp16: return half_to_double(stored);
  case ScaleKind::E8m0: return e8m0_to_double(stored);
  }
  return 1.0;
}

double max_abs(std::span<const double> v) {
  double m = 0;
  for (double x : v)
    m = std::max(m, std::fabs(x));
  return m;
}

// Quantizes one (zero-padded) block. On return `grid` holds the element values in codec
// units and the returned scale byte/bits is the one the scale rule assigns to the
// decoded block itself, so re-quantizing the decoded block reproduces it exactly.
std::uint16_t quantize_block(std::span<const double> in, const FormatSpec &f,
                             std::span<double> grid, std::span<double> work) {
  std::copy(in.begin(), in.end(), work.begin());
  std::uint16_t stored = pick_scale(max_abs(work), f);
  for (int settle = 0; settle < 64; ++settle) {
    const double scale = scale_value(stored, f.scale_kind);
    double decoded_max = 0;
    for (std::size_t i = 0; i < work.size(); ++i) {
      grid[i] = round_to_grid(work[i] / scale, f.codec);
      decoded_max = std::max(decoded_max, std::fabs(grid[i] * scale));
    }
    const std::uint16_t next = pick_scale(decoded_max, f);
    if (next == stored)
      break;
    for (std::size_t i = 0; i < work.size(); ++i)
      work[i] = grid[i] * scale;
    stored = next;
  }
  return stored;
}

class BitWriter {
public:
  explicit BitWriter(std::vector<std::uint8_t> &out) : out_(out) {}
  void put(std::uint64_t code, int bits) {
    for (int b = 0; b < bits; ++b) {
      if (fill_ == 0)
        out_.push_back(0);
      out_.back() |= static_cast<std::uint8_t>(((code >> b) & 1u) << fill_);
      fill_ = (fill_ + 1) % 8;
    }
  }
  void align() { fill_ = 0; }

private:
  std::vector<std::uint8_t> &out_;
  int fill_ = 0;
};

std::uint64_t read_bits(const std::vector<std::uint8_t> &bytes, std::size_t bit_offset, int bits) {
  std::uint64_t code = 0;
  for (int b = 0; b < bits; ++b) {
    const std::size_t pos = bit_offset + static_cast<std::size_t>(b);
    code |= static_cast<std::uint64_t>((bytes[pos / 8] >> (pos % 8)) & 1u) << b;
  }
  return code;
}

std::uint64_t grid_code(double g, const FormatSpec &f) {
  // `g` is already on the grid, so encoding at unit scale is exact.
  return encode_element(g, f.codec, 1.0);
}

template <typename Sink>
void for_each_block(const Matrix &m, const FormatSpec &f, Sink &&sink) {
  const auto bs = static_cast<std::size_t>(f.block_size);
  std::vector<double> block(bs), grid(bs), work(bs);
  const Eigen::Index nblocks = (m.cols() + f.block_size - 1) / f.block_size;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index b = 0; b < nblocks; ++b) {
      const Eigen::Index c0 = b * f.block_size;
      for (std::size_t i = 0; i < bs; ++i) {
        const Eigen::Index c = c0 + static_cast<Eigen::Index>(i);
        block[i] = c < m.cols() ? m(r, c) : 0.0;
      }
      const std::uint16_t stored = quantize_block(block, f, grid, work);
      sink(r, c0, stored, std::span<const double>(grid));
    }
  }
}

} // namespace

double e8m0_to_double(std::uint16_t stored) {
  return std::ldexp(1.0, static_cast<int>(stored & 0xFF) - kE8m0Bias);
}

Eigen::Index QuantizedTensor::blocks_per_row() const {
  return (cols + format.block_size - 1) / format.block_size;
}

Eigen::Index QuantizedTensor::pad_count() const {
  return blocks_per_row() * format.block_size - cols;
}

std::size_t QuantizedTensor::bytes_per_row() const {
  const auto bits = static_cast<std::size_t>(blocks_per_row() * format.block_size) *
                    static_cast<std::size_t>(format.bits_per_value);
  return (bits + 7) / 8;
}

std::size_t QuantizedTensor::expected_code_bytes() const {
  return static_cast<std::size_t>(rows) * bytes_per_row();
}

std::size_t QuantizedTensor::expected_scale_count() const {
  if (format.scale_kind == ScaleKind::None)
    return 0;
  return static_cast<std::size_t>(rows * blocks_per_row());
}

std::uint64_t QuantizedTensor::code_at(Eigen::Index r, Eigen::Index c) const {
  const std::size_t bit = static_cast<std::size_t>(r) * bytes_per_row() * 8 +
                          static_cast<std::size_t>(c) * static_cast<std::size_t>(format.bits_per_value);
  return read_bits(codes, bit, format.bits_per_value);
}

double QuantizedTensor::scale_at(Eigen::Index r, Eigen::Index c) const {
  if (format.scale_kind == ScaleKind::None)
    return 1.0;
  const auto idx = static_cast<std::size_t>(r * blocks_per_row() + c / format.block_size);
  return scale_value(scales[idx], format.scale_kind);
}

QuantizedTensor quantize_blockwise(const Matrix &m, const FormatSpec &spec) {
  require_finite(m, "quantize_blockwise input");
  QuantizedTensor t;
  t.rows = m.rows();
  t.cols = m.cols();
  t.format = spec;
  t.codes.reserve(t.expected_code_bytes());
  t.scales.reserve(t.expected_scale_count());
  BitWriter writer(t.codes);
  Eigen::Index current_row = -1;
  for_each_block(m, spec, [&](Eigen::Index r, Eigen::Index, std::uint16_t stored,
                              std::span<const double> grid) {
    if (r != current_row) {
      writer.align();
      current_row = r;
    }
    if (spec.scale_kind != ScaleKind::None)
      t.scales.push_back(stored);
    for (double g : grid)
      writer.put(grid_code(g, spec), spec.bits_per_value);
  });
  t.codes.resize(t.expected_code_bytes(), 0);
  return t;
}

Matrix dequantize(const QuantizedTensor &t) {
  if (t.rows < 0 || t.cols < 0 || t.format.block_size < 1)
    fail(ErrorCode::Format, "malformed quantized tensor header");
  if (t.codes.size() != t.expected_code_bytes())
    fail(ErrorCode::Format, "code stream holds " + std::to_string(t.codes.size()) +
                                " bytes, expected " + std::to_string(t.expected_code_bytes()));
  if (t.scales.size() != t.expected_scale_count())
    fail(ErrorCode::Format, "scale count " + std::to_string(t.scales.size()) + ", expected " +
                                std::to_string(t.expected_scale_count()));
  if (t.format.scale_kind == ScaleKind::E8m0)
    for (auto s : t.scales)
      if (s > 0xFF)
        fail(ErrorCode::Format, "e8m0 scale does not fit in a byte");
  if (t.format.scale_kind == ScaleKind::Fp16)
    for (auto s : t.scales)
      if (!(half_to_double(s) > 0))
        fail(ErrorCode::Format, "fp16 block scale must be positive");

  Matrix out(t.rows, t.cols);
  const Eigen::Index padded = t.blocks_per_row() * t.format.block_size;
  for (Eigen::Index r = 0; r < t.rows; ++r) {
    for (Eigen::Index c = 0; c < padded; ++c) {
      const double v = decode_element(t.code_at(r, c), t.format.codec, t.scale_at(r, c));
      if (c < t.cols)
        out(r, c) = v;
      else if (v != 0)
        fail(ErrorCode::Format, "non-zero padding element");
    }
  }
  return out;
}

Matrix fake_quant(const Matrix &m, const FormatSpec &spec) {
  require_finite(m, "fake_quant input");
  if (spec.codec.kind == ElementKind::Identity)
    return m;
  Matrix out(m.rows(), m.cols());
  for_each_block(m, spec, [&](Eigen::Index r, Eigen::Index c0, std::uint16_t stored,
                              std::span<const double> grid) {
    const double scale = scale_value(stored, spec.scale_kind);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const Eigen::Index c = c0 + static_cast<Eigen::Index>(i);
      if (c < m.cols())
        out(r, c) = grid[i] * scale;
    }
  });
  return out;
}

} // namespace loraq
