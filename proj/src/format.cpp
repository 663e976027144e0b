#include "loraq/format.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "loraq/error.hpp"

namespace loraq {
namespace {

double minifloat_round(double x, const ElementCodec &c) {
  const double ax = std::fabs(x);
  if (ax == 0)
    return 0.0;
  if (ax >= c.max_value)
    return std::copysign(c.max_value, x);
  const int emin = 1 - c.bias;
  const int e = std::max(std::ilogb(ax), emin);
  const double quantum = std::ldexp(1.0, e - c.mant_bits);
  double r = std::nearbyint(ax / quantum) * quantum;
  if (r > c.max_value)
    r = c.max_value;
  return r == 0 ? 0.0 : std::copysign(r, x);
}

std::uint64_t minifloat_bits(double r, const ElementCodec &c) {
  const std::uint64_t sign = std::signbit(r) && r != 0 ? 1 : 0;
  const double a = std::fabs(r);
  std::uint64_t exp_field = 0, mant = 0;
  if (a != 0) {
    const int emin = 1 - c.bias;
    const int e = std::ilogb(a);
    if (e < emin) {
      mant = static_cast<std::uint64_t>(std::ldexp(a, c.mant_bits - emin));
    } else {
      exp_field = static_cast<std::uint64_t>(e + c.bias);
      mant = static_cast<std::uint64_t>(std::ldexp(a, c.mant_bits - e)) - (1ull << c.mant_bits);
    }
  }
  return (sign << (c.bits - 1)) | (exp_field << c.mant_bits) | mant;
}

double minifloat_value(std::uint64_t code, const ElementCodec &c) {
  const std::uint64_t mant_mask = (1ull << c.mant_bits) - 1;
  const std::uint64_t mant = code & mant_mask;
  const int exp_field = static_cast<int>((code >> c.mant_bits) & ((1ull << c.exp_bits) - 1));
  const bool negative = (code >> (c.bits - 1)) & 1;
  double a;
  if (exp_field == 0)
    a = std::ldexp(static_cast<double>(mant), 1 - c.bias - c.mant_bits);
  else
    a = std::ldexp(static_cast<double>((1ull << c.mant_bits) | mant),
                   exp_field - c.bias - c.mant_bits);
  if (a > c.max_value)
    fail(ErrorCode::Format, "code " + std::to_string(code) + " is not a finite value of the codec");
  return negative ? -a : a;
}

double int_round(double x, const ElementCodec &c) {
  const double r = std::nearbyint(x);
  return std::clamp(r, -c.max_value, c.max_value) + 0.0;
}

} // namespace

ElementCodec int_codec(int bits) {
  if (bits < 2 || bits > 16)
    fail(ErrorCode::Parameter, "int codec width must be in [2, 16]");
  ElementCodec c;
  c.kind = ElementKind::Int;
  c.bits = bits;
  c.max_value = static_cast<double>((1 << (bits - 1)) - 1);
  return c;
}

ElementCodec minifloat_codec(int exp_bits, int mant_bits, int bias, double max_value) {
  ElementCodec c;
  c.kind = ElementKind::Minifloat;
  c.bits = 1 + exp_bits + mant_bits;
  c.exp_bits = exp_bits;
  c.mant_bits = mant_bits;
  c.bias = bias;
  c.max_value = max_value;
  return c;
}

ElementCodec e2m1_codec() { return minifloat_codec(2, 1, 1, 6.0); }
ElementCodec e2m3_codec() { return minifloat_codec(2, 3, 1, 7.5); }
ElementCodec e4m3_codec() { return minifloat_codec(4, 3, 7, 448.0); }

ElementCodec float16_codec() {
  ElementCodec c = minifloat_codec(5, 10, 15, 65504.0);
  c.kind = ElementKind::Float16;
  return c;
}

ElementCodec identity_codec() { return ElementCodec{}; }

FormatSpec make_custom_format(std::string name, int block_size, ScaleKind scale_kind,
                              ElementCodec codec) {
  if (block_size < 1)
    fail(ErrorCode::Parameter, "block_size must be at least 1");
  if (codec.kind == ElementKind::Identity && codec.bits != 64)
    fail(ErrorCode::Parameter, "identity codec is 64 bits wide");
  if (codec.kind == ElementKind::Minifloat || codec.kind == ElementKind::Float16) {
    if (codec.bits != 1 + codec.exp_bits + codec.mant_bits || codec.exp_bits < 1 || codec.bits > 16)
      fail(ErrorCode::Parameter, "inconsistent minifloat codec widths");
    if (!(codec.max_value > 0))
      fail(ErrorCode::Parameter, "minifloat codec needs a positive max value");
  }
  if (codec.kind == ElementKind::Int && codec.max_value != int_codec(codec.bits).max_value)
    fail(ErrorCode::Parameter, "int codec range must be symmetric");
  if ((scale_kind == ScaleKind::None) !=
      (codec.kind == ElementKind::Identity || codec.kind == ElementKind::Float16))
    fail(ErrorCode::Parameter, "only passthrough codecs may omit the block scale");
  FormatSpec f;
  f.name = std::move(name);
  f.block_size = block_size;
  f.scale_kind = scale_kind;
  f.codec = codec;
  f.bits_per_value = codec.bits;
  return f;
}

const std::vector<std::string> &registered_format_names() {
  static const std::vector<std::string> names = {"SINT4",   "MXINT4",  "MXINT8",
                                                 "MXFP4e2", "MXFP6e2", "MXFP8e4"};
  return names;
}

FormatSpec make_format(std::string_view name) {
  if (name == "SINT4")
    return make_custom_format("SINT4", 64, ScaleKind::Fp16, int_codec(4));
  if (name == "MXINT4")
    return make_custom_format("MXINT4", 32, ScaleKind::E8m0, int_codec(4));
  if (name == "MXINT8")
    return make_custom_format("MXINT8", 32, ScaleKind::E8m0, int_codec(8));
  if (name == "MXFP4e2")
    return make_custom_format("MXFP4e2", 32, ScaleKind::E8m0, e2m1_codec());
  if (name == "MXFP6e2")
    return make_custom_format("MXFP6e2", 32, ScaleKind::E8m0, e2m3_codec());
  if (name == "MXFP8e4")
    return make_custom_format("MXFP8e4", 32, ScaleKind::E8m0, e4m3_codec());
  if (name == "fp16-passthrough")
    return make_custom_format("fp16-passthrough", 1, ScaleKind::None, float16_codec());
  if (name == "passthrough")
    return make_custom_format("passthrough", 1, ScaleKind::None, identity_codec());
  fail(ErrorCode::Lookup, "unknown format '" + std::string(name) + "'");
}

double round_to_grid(double x, const ElementCodec &codec) {
  switch (codec.kind) {
  case ElementKind::Int: return int_round(x, codec);
  case ElementKind::Minifloat:
  case ElementKind::Float16: return minifloat_round(x, codec);
  case ElementKind::Identity: return x;
  }
  return x;
}

std::uint64_t encode_element(double value, const ElementCodec &codec, double scale) {
  if (!(scale > 0))
    fail(ErrorCode::Parameter, "encode_element: scale must be positive");
  const double r = round_to_grid(value / scale, codec);
  switch (codec.kind) {
  case ElementKind::Int: {
    const auto q = static_cast<std::int64_t>(r);
    return static_cast<std::uint64_t>(q) & ((1ull << codec.bits) - 1);
  }
  case ElementKind::Minifloat:
  case ElementKind::Float16: return minifloat_bits(r, codec);
  case ElementKind::Identity: return std::bit_cast<std::uint64_t>(r == 0 ? 0.0 : r);
  }
  return 0;
}

double decode_element(std::uint64_t code, const ElementCodec &codec, double scale) {
  if (!(scale > 0))
    fail(ErrorCode::Parameter, "decode_element: scale must be positive");
  if (codec.bits < 64 && (code >> codec.bits) != 0)
    fail(ErrorCode::Format, "code has bits above the codec width");
  switch (codec.kind) {
  case ElementKind::Int: {
    const std::uint64_t sign_bit = 1ull << (codec.bits - 1);
    if (code == sign_bit)
      fail(ErrorCode::Format, "reserved integer code -2^(k-1)");
    const auto q = static_cast<std::int64_t>(code & (sign_bit - 1)) -
                   static_cast<std::int64_t>(code & sign_bit);
    return static_cast<double>(q) * scale;
  }
  case ElementKind::Minifloat:
  case ElementKind::Float16: return minifloat_value(code, codec) * scale;
  case ElementKind::Identity: {
    const double v = std::bit_cast<double>(code);
    if (!std::isfinite(v))
      fail(ErrorCode::Format, "non-finite passthrough code");
    return v * scale;
  }
  }
  return 0;
}

std::uint16_t half_from_double(double x) {
  static const ElementCodec h = float16_codec();
  return static_cast<std::uint16_t>(minifloat_bits(minifloat_round(x, h), h));
}

std::uint16_t half_ceil(double x) {
  std::uint16_t bits = half_from_double(x);
  if (half_to_double(bits) < x && bits != 0x7BFF)
    ++bits;
  return bits;
}

double half_to_double(std::uint16_t bits) {
  static const ElementCodec h = float16_codec();
  return minifloat_value(bits, h);
}

const char *scale_kind_name(ScaleKind kind) {
  switch (kind) {
  case ScaleKind::None: return "none";
  case ScaleKind::Fp16: return "fp16";
  case ScaleKind::E8m0: return "e8m0";
  }
  return "?";
}

const char *element_kind_name(ElementKind kind) {
  switch (kind) {
  case ElementKind::Int: return "int";
  case ElementKind::Minifloat: return "minifloat";
  case ElementKind::Float16: return "float16";
  case ElementKind::Identity: return "identity";
  }
  return "?";
}

ScaleKind parse_scale_kind(std::string_view name) {
  for (auto k : {ScaleKind::None, ScaleKind::Fp16, ScaleKind::E8m0})
    if (name == scale_kind_name(k))
      return k;
  fail(ErrorCode::Format, "unknown scale kind '" + std::string(name) + "'");
}

ElementKind parse_element_kind(std::string_view name) {
  for (auto k : {ElementKind::Int, ElementKind::Minifloat, ElementKind::Float16,
                 ElementKind::Identity})
    if (name == element_kind_name(k))
      return k;
  fail(ErrorCode::Format, "unknown element kind '" + std::string(name) + "'");
}

} // namespace loraq
