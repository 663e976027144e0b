#include "loraq/bundle_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

namespace loraq {
namespace {

using json = nlohmann::json;

class ByteWriter {
public:
  explicit ByteWriter(Bytes &out) : out_(out) {}
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void tag(const char (&t)[5]) { raw({reinterpret_cast<const std::uint8_t *>(t), 4}); }
  template <typename U> void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i)
      out_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }

private:
  Bytes &out_;
};

class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return bytes_.size() - pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  std::span<const std::uint8_t> take(std::uint64_t n, const char *what) {
    if (n > remaining())
      throw CorruptFileError(std::string("truncated ") + what, pos_);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename U> U uint(const char *what) {
    auto s = take(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return static_cast<U>(v);
  }
  double f64(const char *what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  float f32(const char *what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  std::string tag(const char *what) {
    auto s = take(4, what);
    return std::string(s.begin(), s.end());
  }

private:
  std::span<const std::uint8_t> bytes_;
  std::uint64_t pos_ = 0;
};

void expect_magic(ByteReader &in, const char *magic) {
  const std::string got = in.tag("magic");
  if (got != magic)
    fail(ErrorCode::Format, std::string("bad magic, expected ") + magic);
}

// --- FormatSpec <-> JSON ------------------------------------------------------

json format_to_json(const FormatSpec &f) {
  return {{"name", f.name},
          {"block_size", f.block_size},
          {"scale_kind", scale_kind_name(f.scale_kind)},
          {"bits_per_value", f.bits_per_value},
          {"element",
           {{"kind", element_kind_name(f.codec.kind)},
            {"bits", f.codec.bits},
            {"exp_bits", f.codec.exp_bits},
            {"mant_bits", f.codec.mant_bits},
            {"bias", f.codec.bias},
            {"max_value", f.codec.max_value}}}};
}

FormatSpec format_from_json(const json &j) {
  const json &e = j.at("element");
  ElementCodec c;
  c.kind = parse_element_kind(e.at("kind").get<std::string>());
  c.bits = e.at("bits").get<int>();
  c.exp_bits = e.at("exp_bits").get<int>();
  c.mant_bits = e.at("mant_bits").get<int>();
  c.bias = e.at("bias").get<int>();
  c.max_value = e.at("max_value").get<double>();
  if (c.bits < 1 || c.bits > 64)
    fail(ErrorCode::Format, "element width out of range");
  FormatSpec f;
  try {
    f = make_custom_format(j.at("name").get<std::string>(), j.at("block_size").get<int>(),
                           parse_scale_kind(j.at("scale_kind").get<std::string>()), c);
  } catch (const Error &err) {
    fail(ErrorCode::Format, std::string("invalid format in manifest: ") + err.what());
  }
  if (f.bits_per_value != j.at("bits_per_value").get<int>())
    fail(ErrorCode::Format, "bits_per_value disagrees with element codec");
  return f;
}

// --- meta <-> JSON -------------------------------------------------------------

json meta_to_json(const BundleMeta &m) {
  return {{"rows", m.rows},
          {"cols", m.cols},
          {"rank", m.rank},
          {"requested_rank", m.requested_rank},
          {"rank_capped", m.rank_capped},
          {"rank_overridden", m.rank_overridden},
          {"budget_bits_per_channel", m.budget_bits_per_channel},
          {"lowrank_bits", m.lowrank_bits},
          {"optimized_lr", m.optimized_lr},
          {"rotations", m.rotations},
          {"absorb",
           {{"learning_rate", m.absorb_learning_rate},
            {"steps", m.absorb_steps},
            {"seed", m.absorb_seed},
            {"keep_best", m.absorb_keep_best},
            {"initial_loss", m.absorb_initial_loss},
            {"best_loss", m.absorb_best_loss},
            {"best_step", m.absorb_best_step}}},
          {"rotation",
           {{"learning_rate", m.rotation_learning_rate},
            {"steps", m.rotation_steps},
            {"seed", m.rotation_seed},
            {"keep_best", m.rotation_keep_best},
            {"identity_loss", m.rotation_identity_loss},
            {"best_loss", m.rotation_best_loss},
            {"best_step", m.rotation_best_step}}},
          {"smoothing",
           {{"applied", m.smoothed},
            {"source", m.smoothing_source},
            {"alpha", m.alpha_mig},
            {"beta", m.beta_mig},
            {"score", m.smoothing_score},
            {"rank", m.smoothing_rank}}}};
}

BundleMeta meta_from_json(const json &j) {
  BundleMeta m;
  m.rows = j.at("rows").get<std::int64_t>();
  m.cols = j.at("cols").get<std::int64_t>();
  m.rank = j.at("rank").get<std::int64_t>();
  m.requested_rank = j.at("requested_rank").get<std::int64_t>();
  m.rank_capped = j.at("rank_capped").get<bool>();
  m.rank_overridden = j.at("rank_overridden").get<bool>();
  m.budget_bits_per_channel = j.at("budget_bits_per_channel").get<int>();
  m.lowrank_bits = j.at("lowrank_bits").get<int>();
  m.optimized_lr = j.at("optimized_lr").get<bool>();
  m.rotations = j.at("rotations").get<bool>();
  const json &a = j.at("absorb");
  m.absorb_learning_rate = a.at("learning_rate").get<double>();
  m.absorb_steps = a.at("steps").get<int>();
  m.absorb_seed = a.at("seed").get<std::uint64_t>();
  m.absorb_keep_best = a.at("keep_best").get<bool>();
  m.absorb_initial_loss = a.at("initial_loss").get<double>();
  m.absorb_best_loss = a.at("best_loss").get<double>();
  m.absorb_best_step = a.at("best_step").get<int>();
  const json &r = j.at("rotation");
  m.rotation_learning_rate = r.at("learning_rate").get<double>();
  m.rotation_steps = r.at("steps").get<int>();
  m.rotation_seed = r.at("seed").get<std::uint64_t>();
  m.rotation_keep_best = r.at("keep_best").get<bool>();
  m.rotation_identity_loss = r.at("identity_loss").get<double>();
  m.rotation_best_loss = r.at("best_loss").get<double>();
  m.rotation_best_step = r.at("best_step").get<int>();
  const json &s = j.at("smoothing");
  m.smoothed = s.at("applied").get<bool>();
  m.smoothing_source = s.at("source").get<std::string>();
  m.alpha_mig = s.at("alpha").get<double>();
  m.beta_mig = s.at("beta").get<double>();
  m.smoothing_score = s.at("score").get<double>();
  m.smoothing_rank = s.at("rank").get<std::int64_t>();
  if (m.rows < 0 || m.cols < 0 || m.rank < 1)
    fail(ErrorCode::Format, "manifest shape fields out of range");
  return m;
}

json tensor_header(const QuantizedTensor &t) {
  return {{"rows", t.rows}, {"cols", t.cols}, {"format", format_to_json(t.format)}};
}

int scale_width(ScaleKind kind) {
  switch (kind) {
  case ScaleKind::None: return 0;
  case ScaleKind::Fp16: return 2;
  case ScaleKind::E8m0: return 1;
  }
  return 0;
}

Bytes scale_bytes(const QuantizedTensor &t) {
  Bytes out;
  ByteWriter w(out);
  const int width = scale_width(t.format.scale_kind);
  for (auto s : t.scales) {
    if (width == 1)
      w.uint(static_cast<std::uint8_t>(s));
    else
      w.uint(s);
  }
  return out;
}

struct Chunk {
  const char *tag;
  Bytes payload;
};

std::vector<Chunk> bundle_chunks(const LayerBundle &b) {
  std::vector<Chunk> chunks = {
      {"PCOD", b.residual.codes},      {"PSCL", scale_bytes(b.residual)},
      {"LCOD", b.lowrank_left.codes},  {"LSCL", scale_bytes(b.lowrank_left)},
      {"RCOD", b.lowrank_right.codes}, {"RSCL", scale_bytes(b.lowrank_right)},
  };
  if (b.gamma) {
    Bytes g;
    ByteWriter w(g);
    for (Eigen::Index i = 0; i < b.gamma->size(); ++i)
      w.f64((*b.gamma)(i));
    chunks.push_back({"GAMM", std::move(g)});
  }
  return chunks;
}

json manifest_json(const LayerBundle &b, const std::vector<Chunk> &chunks) {
  json list = json::array();
  for (const auto &c : chunks)
    list.push_back({{"tag", c.tag}, {"bytes", c.payload.size()}});
  return {{"container", "LRQB"},
          {"version", kBundleVersion},
          {"meta", meta_to_json(b.meta)},
          {"tensors",
           {{"residual", tensor_header(b.residual)},
            {"lowrank_left", tensor_header(b.lowrank_left)},
            {"lowrank_right", tensor_header(b.lowrank_right)}}},
          {"gamma", b.gamma.has_value()},
          {"chunks", list}};
}

struct BundleHeader {
  json manifest;
  std::uint64_t manifest_offset = 0;
};

BundleHeader read_header(ByteReader &in) {
  expect_magic(in, "LRQB");
  const auto version = in.uint<std::uint16_t>("version");
  if (version == 0)
    fail(ErrorCode::Format, "bundle version 0 is invalid");
  if (version > kBundleVersion)
    fail(ErrorCode::Version, "bundle version " + std::to_string(version) +
                                 " is newer than supported version " +
                                 std::to_string(kBundleVersion));
  const auto len = in.uint<std::uint32_t>("manifest length");
  BundleHeader h;
  h.manifest_offset = in.offset();
  auto text = in.take(len, "manifest");
  try {
    h.manifest = json::parse(text.begin(), text.end());
  } catch (const json::exception &e) {
    throw CorruptFileError(std::string("manifest is not valid JSON: ") + e.what(),
                           h.manifest_offset);
  }
  if (!h.manifest.is_object())
    throw CorruptFileError("manifest is not a JSON object", h.manifest_offset);
  return h;
}

QuantizedTensor tensor_from(const json &hdr, const Bytes &codes, const Bytes &scales,
                            const char *name) {
  QuantizedTensor t;
  t.rows = hdr.at("rows").get<std::int64_t>();
  t.cols = hdr.at("cols").get<std::int64_t>();
  if (t.rows < 0 || t.cols < 0 || t.rows > (std::int64_t{1} << 31) ||
      t.cols > (std::int64_t{1} << 31))
    fail(ErrorCode::Format, std::string(name) + ": shape out of range");
  t.format = format_from_json(hdr.at("format"));
  if (codes.size() != t.expected_code_bytes())
    fail(ErrorCode::Format, std::string(name) + ": code chunk has " +
                                std::to_string(codes.size()) + " bytes, expected " +
                                std::to_string(t.expected_code_bytes()));
  t.codes = codes;
  const int width = scale_width(t.format.scale_kind);
  const std::size_t expected = t.expected_scale_count();
  if (scales.size() != expected * static_cast<std::size_t>(width))
    fail(ErrorCode::Format, std::string(name) + ": scale chunk length mismatch");
  ByteReader sr(scales);
  t.scales.reserve(expected);
  for (std::size_t i = 0; i < expected; ++i)
    t.scales.push_back(width == 1 ? sr.uint<std::uint8_t>("scale")
                                  : sr.uint<std::uint16_t>("scale"));
  return t;
}

Matrix checked_matrix(Matrix m) {
  if (!all_finite(m))
    fail(ErrorCode::Format, "tensor file contains NaN or Inf");
  return m;
}

} // namespace

// --- tensors -------------------------------------------------------------------

Bytes encode_tensor(const Matrix &m, TensorElement element) {
  if (element != TensorElement::F32 && element != TensorElement::F64)
    fail(ErrorCode::Parameter, "unknown tensor element kind");
  Bytes out;
  ByteWriter w(out);
  w.tag("LQT1");
  w.uint(static_cast<std::uint8_t>(element));
  w.uint(static_cast<std::uint64_t>(m.rows()));
  w.uint(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (element == TensorElement::F64)
        w.f64(m(r, c));
      else
        w.f32(static_cast<float>(m(r, c)));
    }
  return out;
}

Matrix decode_tensor(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  expect_magic(in, "LQT1");
  const auto kind = in.uint<std::uint8_t>("element kind");
  if (kind != 1 && kind != 2)
    fail(ErrorCode::Format, "unknown element kind " + std::to_string(kind));
  const std::uint64_t width = kind == 1 ? 4 : 8;
  const auto rows = in.uint<std::uint64_t>("rows");
  const auto cols = in.uint<std::uint64_t>("cols");
  const std::uint64_t limit = std::numeric_limits<std::uint32_t>::max();
  if (rows > limit || cols > limit)
    fail(ErrorCode::Format, "tensor shape out of range");
  const std::uint64_t payload = rows * cols * width;
  if (payload > in.remaining())
    throw CorruptFileError("truncated tensor payload", in.offset());
  if (payload < in.remaining())
    throw CorruptFileError("trailing bytes after tensor payload", in.offset() + payload);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = kind == 2 ? in.f64("element") : static_cast<double>(in.f32("element"));
  return checked_matrix(std::move(m));
}

// --- stats ---------------------------------------------------------------------

Bytes encode_stats(const ChannelStats &stats) {
  Bytes out;
  ByteWriter w(out);
  w.tag("LQS1");
  w.uint(stats.sample_count);
  w.uint(static_cast<std::uint64_t>(stats.act_max.size()));
  for (Eigen::Index i = 0; i < stats.act_max.size(); ++i)
    w.f64(stats.act_max(i));
  return out;
}

ChannelStats decode_stats(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  expect_magic(in, "LQS1");
  ChannelStats s;
  s.sample_count = in.uint<std::uint64_t>("sample count");
  const auto d = in.uint<std::uint64_t>("channel count");
  if (d > in.remaining() / 8)
    throw CorruptFileError("truncated statistics payload", in.offset());
  if (d * 8 < in.remaining())
    throw CorruptFileError("trailing bytes after statistics", in.offset() + d * 8);
  s.act_max.resize(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < s.act_max.size(); ++i) {
    s.act_max(i) = in.f64("statistic");
    if (!std::isfinite(s.act_max(i)) || s.act_max(i) < 0)
      fail(ErrorCode::Format, "channel statistic must be finite and non-negative");
  }
  return s;
}

// --- bundles -------------------------------------------------------------------

std::string bundle_manifest(const LayerBundle &b) {
  return manifest_json(b, bundle_chunks(b)).dump(2);
}

Bytes encode_bundle(const LayerBundle &b) {
  validate_bundle(b);
  const auto chunks = bundle_chunks(b);
  const std::string manifest = manifest_json(b, chunks).dump();
  Bytes out;
  ByteWriter w(out);
  w.tag("LRQB");
  w.uint(kBundleVersion);
  w.uint(static_cast<std::uint32_t>(manifest.size()));
  w.raw({reinterpret_cast<const std::uint8_t *>(manifest.data()), manifest.size()});
  for (const auto &c : chunks) {
    w.raw({reinterpret_cast<const std::uint8_t *>(c.tag), 4});
    w.uint(static_cast<std::uint64_t>(c.payload.size()));
    w.raw(c.payload);
  }
  return out;
}

std::string read_bundle_manifest(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  return read_header(in).manifest.dump(2);
}

LayerBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  const BundleHeader header = read_header(in);
  const json &mf = header.manifest;
  try {
    // Declared chunk list, validated against the bytes actually present.
    const json &declared = mf.at("chunks");
    if (!declared.is_array())
      fail(ErrorCode::Format, "manifest chunk list is not an array");
    std::map<std::string, Bytes> found;
    std::size_t index = 0;
    while (!in.done()) {
      const std::uint64_t chunk_offset = in.offset();
      const std::string tag = in.tag("chunk tag");
      const auto len = in.uint<std::uint64_t>("chunk length");
      if (index < declared.size()) {
        const json &d = declared[index];
        if (d.at("tag").get<std::string>() != tag || d.at("bytes").get<std::uint64_t>() != len)
          throw CorruptFileError("chunk " + tag + " disagrees with manifest", chunk_offset);
      }
      auto payload = in.take(len, "chunk payload");
      found[tag] = Bytes(payload.begin(), payload.end());
      ++index;
    }
    if (index < declared.size())
      throw CorruptFileError("missing chunk " + declared[index].at("tag").get<std::string>(),
                             in.offset());

    auto chunk = [&](const char *tag) -> const Bytes & {
      auto it = found.find(tag);
      if (it == found.end())
        throw CorruptFileError(std::string("required chunk ") + tag + " absent", in.offset());
      return it->second;
    };

    LayerBundle b;
    b.meta = meta_from_json(mf.at("meta"));
    const json &tensors = mf.at("tensors");
    b.residual = tensor_from(tensors.at("residual"), chunk("PCOD"), chunk("PSCL"), "residual");
    b.lowrank_left =
        tensor_from(tensors.at("lowrank_left"), chunk("LCOD"), chunk("LSCL"), "lowrank_left");
    b.lowrank_right =
        tensor_from(tensors.at("lowrank_right"), chunk("RCOD"), chunk("RSCL"), "lowrank_right");
    if (mf.at("gamma").get<bool>()) {
      const Bytes &g = chunk("GAMM");
      if (g.size() != static_cast<std::size_t>(b.meta.rows) * 8)
        fail(ErrorCode::Format, "smoothing vector chunk length mismatch");
      ByteReader gr(g);
      Vector gamma(b.meta.rows);
      for (Eigen::Index i = 0; i < gamma.size(); ++i)
        gamma(i) = gr.f64("gamma");
      b.gamma = std::move(gamma);
    }
    validate_bundle(b);
    return b;
  } catch (const json::exception &e) {
    fail(ErrorCode::Format, std::string("manifest is missing or mistypes a field: ") + e.what());
  }
}

// --- files ---------------------------------------------------------------------

Bytes read_file(const std::filesystem::path &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    fail(ErrorCode::Io, "cannot open " + path.string());
  Bytes out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad())
    fail(ErrorCode::Io, "read failed for " + path.string());
  return out;
}

void write_file(const std::filesystem::path &path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f)
    fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f)
    fail(ErrorCode::Io, "write failed for " + path.string());
}

void save_tensor(const std::filesystem::path &path, const Matrix &m, TensorElement element) {
  write_file(path, encode_tensor(m, element));
}
Matrix load_tensor(const std::filesystem::path &path) { return decode_tensor(read_file(path)); }
void save_stats(const std::filesystem::path &path, const ChannelStats &stats) {
  write_file(path, encode_stats(stats));
}
ChannelStats load_stats(const std::filesystem::path &path) { return decode_stats(read_file(path)); }
void save_bundle(const std::filesystem::path &path, const LayerBundle &b) {
  write_file(path, encode_bundle(b));
}
LayerBundle load_bundle(const std::filesystem::path &path) { return decode_bundle(read_file(path)); }

std::string file_magic(const std::filesystem::path &path) {
  std::ifstream f(path, std::ios::binary);
  char buf[4];
  if (!f.read(buf, 4))
    return "";
  return std::string(buf, 4);
}

} // namespace loraq
