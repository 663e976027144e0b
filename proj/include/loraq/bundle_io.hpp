#pragma once

// On-disk formats. All integers and floats are little-endian.
//
// LQT1 tensor file
//   [0,4)    magic "LQT1"
//   [4]      element kind: 1 = f32, 2 = f64
//   [5,13)   u64 rows
//   [13,21)  u64 cols
//   [21,..)  rows*cols elements, row-major; no trailing bytes
//
// LQS1 channel statistics file
//   [0,4)    magic "LQS1"
//   [4,12)   u64 sample count
//   [12,20)  u64 channel count d
//   [20,..)  d f64 values (per-channel max |X|); no trailing bytes
//
// LRQB bundle file
//   [0,4)    magic "LRQB"
//   [4,6)    u16 version (currently 1)
//   [6,10)   u32 manifest length m
//   [10,10+m) manifest, UTF-8 JSON: metadata, tensor shapes and formats, and the
//            ordered chunk list with byte lengths
//   then chunks, each: 4-byte tag, u64 payload length, payload. Order:
//     PCOD PSCL  residual codes / scales
//     LCOD LSCL  low-rank left factor codes / scales
//     RCOD RSCL  low-rank right factor codes / scales
//     GAMM       optional smoothing vector, f64 per channel
//   Codes are the packed QuantizedTensor bitstream. Scales are one byte each (e8m0)
//   or two bytes each (fp16 bit pattern); empty for passthrough formats.
//   Chunks with unknown tags are skipped.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "loraq/pipeline.hpp"
#include "loraq/smoothing.hpp"

namespace loraq {

inline constexpr std::uint16_t kBundleVersion = 1;

enum class TensorElement : std::uint8_t { F32 = 1, F64 = 2 };

using Bytes = std::vector<std::uint8_t>;

Bytes encode_tensor(const Matrix &m, TensorElement element = TensorElement::F64);
Matrix decode_tensor(std::span<const std::uint8_t> bytes);

Bytes encode_stats(const ChannelStats &stats);
ChannelStats decode_stats(std::span<const std::uint8_t> bytes);

Bytes encode_bundle(const LayerBundle &b);
LayerBundle decode_bundle(std::span<const std::uint8_t> bytes);

/// The JSON manifest that encode_bundle writes, pretty-printed.
std::string bundle_manifest(const LayerBundle &b);
/// Reads only the header and manifest of an encoded bundle.
std::string read_bundle_manifest(std::span<const std::uint8_t> bytes);

Bytes read_file(const std::filesystem::path &path);
void write_file(const std::filesystem::path &path, std::span<const std::uint8_t> bytes);

void save_tensor(const std::filesystem::path &path, const Matrix &m,
                 TensorElement element = TensorElement::F64);
Matrix load_tensor(const std::filesystem::path &path);
void save_stats(const std::filesystem::path &path, const ChannelStats &stats);
ChannelStats load_stats(const std::filesystem::path &path);
void save_bundle(const std::filesystem::path &path, const LayerBundle &b);
LayerBundle load_bundle(const std::filesystem::path &path);

/// Sniffs the 4-byte magic of a file ("LQT1", "LQS1", "LRQB", or "" if unreadable).
std::string file_magic(const std::filesystem::path &path);

} // namespace loraq
