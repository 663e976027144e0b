#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace loraq {

enum class ScaleKind : std::uint8_t {
  None, ///< no per-block scale (passthrough formats)
  Fp16, ///< IEEE half scale stored as its bit pattern
  E8m0, ///< power-of-two scale stored as a biased exponent byte
};

enum class ElementKind : std::uint8_t {
  Int,       ///< symmetric two's-complement integer, code -2^(k-1) unused
  Minifloat, ///< sign + exponent + mantissa, subnormals, no inf/nan emitted
  Float16,   ///< IEEE half, used by the fp16 passthrough branch
  Identity,  ///< raw binary64, exact passthrough
};

struct ElementCodec {
  ElementKind kind = ElementKind::Identity;
  int bits = 64;
  int exp_bits = 0;
  int mant_bits = 0;
  int bias = 0;
  double max_value = 0; ///< largest finite magnitude (qmax for Int)

  friend bool operator==(const ElementCodec &, const ElementCodec &) = default;
};

ElementCodec int_codec(int bits);
ElementCodec minifloat_codec(int exp_bits, int mant_bits, int bias, double max_value);
ElementCodec e2m1_codec();
ElementCodec e2m3_codec();
ElementCodec e4m3_codec();
ElementCodec float16_codec();
ElementCodec identity_codec();

struct FormatSpec {
  std::string name;
  int block_size = 1;
  ScaleKind scale_kind = ScaleKind::None;
  ElementCodec codec;
  int bits_per_value = 64;

  friend bool operator==(const FormatSpec &, const FormatSpec &) = default;

  bool is_passthrough() const { return scale_kind == ScaleKind::None; }
  bool is_float() const {
    return codec.kind == ElementKind::Minifloat || codec.kind == ElementKind::Float16;
  }
};

/// Builds and validates a format. Used directly for hand-checkable test formats.
FormatSpec make_custom_format(std::string name, int block_size, ScaleKind scale_kind,
                              ElementCodec codec);

/// Registry lookup: SINT4, MXINT4, MXINT8, MXFP4e2, MXFP6e2, MXFP8e4, plus the
/// passthrough formats "fp16-passthrough" and "passthrough".
FormatSpec make_format(std::string_view name);

/// The six blockwise formats, in a fixed order.
const std::vector<std::string> &registered_format_names();

// Element codec. `scale` must be positive; codes occupy the low `codec.bits` bits.
std::uint64_t encode_element(double value, const ElementCodec &codec, double scale);
double decode_element(std::uint64_t code, const ElementCodec &codec, double scale);

/// Rounds `x` (already divided by the block scale) to the codec grid: ties to even, saturating.
double round_to_grid(double x, const ElementCodec &codec);

// IEEE binary16 helpers.
std::uint16_t half_from_double(double x); ///< round to nearest even, saturating at 65504
std::uint16_t half_ceil(double x);        ///< smallest half >= x, x > 0, saturating
double half_to_double(std::uint16_t bits);

const char *scale_kind_name(ScaleKind kind);
const char *element_kind_name(ElementKind kind);
ScaleKind parse_scale_kind(std::string_view name);
ElementKind parse_element_kind(std::string_view name);

} // namespace loraq
