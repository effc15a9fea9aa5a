#include "nowcast/tpnn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "binary_io.hpp"

namespace nowcast {

namespace {

constexpr char kMagic[4] = {'T', 'P', 'N', 'N'};

}  // namespace

FormatError::FormatError(Kind kind, std::size_t offset, const std::string& what)
    : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), kind_(kind), offset_(offset) {}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::Io, 0, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, 0, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::Io, 0, "write failed for " + path.string());
}

RasterStack decode_raster_stack(const std::vector<std::uint8_t>& bytes) {
  using K = FormatError::Kind;
  detail::ByteReader rd(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError(K::BadMagic, 0, "bad magic, expected \"TPNN\"");
  rd.skip(4);
  const std::uint32_t version = rd.u32();
  if (version != kTpnnVersion)
    throw FormatError(K::VersionMismatch, 4, "unsupported TPNN version " + std::to_string(version));
  RasterStack s;
  const std::uint32_t frames = rd.u32();
  s.height = rd.u32();
  s.width = rd.u32();
  s.step_seconds = rd.u32();
  if (s.height == 0 || s.width == 0)
    throw FormatError(K::BadDimensions, 12, "zero raster dimension");

  const std::size_t cells = static_cast<std::size_t>(s.height) * s.width;
  const std::size_t expected = kTpnnHeaderBytes + std::size_t{frames} * 8 + std::size_t{frames} * cells * 4;
  if (bytes.size() < expected)
    throw FormatError(K::Truncated, bytes.size(),
                      "truncated payload: expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(bytes.size()));
  if (bytes.size() > expected) throw FormatError(K::TrailingBytes, expected, "trailing bytes after payload");

  s.timestamps.resize(frames);
  for (auto& t : s.timestamps) t = rd.i64();
  s.values.resize(std::size_t{frames} * cells);
  for (auto& v : s.values) v = rd.f32();
  return s;
}

std::vector<std::uint8_t> encode_raster_stack(const RasterStack& s) {
  if (s.height == 0 || s.width == 0) throw InvalidArgument("encode_raster_stack: zero dimension");
  const std::size_t cells = static_cast<std::size_t>(s.height) * s.width;
  if (s.values.size() != s.timestamps.size() * cells)
    throw InvalidArgument("encode_raster_stack: value count does not match frames × H × W");
  detail::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kTpnnVersion);
  w.u32(static_cast<std::uint32_t>(s.timestamps.size()));
  w.u32(s.height);
  w.u32(s.width);
  w.u32(s.step_seconds);
  for (auto t : s.timestamps) w.i64(t);
  for (auto v : s.values) w.f32(v);
  return w.take();
}

RasterStack read_raster_stack(const std::filesystem::path& path) { return decode_raster_stack(read_file_bytes(path)); }

void write_raster_stack(const RasterStack& stack, const std::filesystem::path& path) {
  write_file_bytes(encode_raster_stack(stack), path);
}

FieldSequence decode_sequence(const std::vector<std::uint8_t>& bytes) {
  using K = FormatError::Kind;
  RasterStack s = decode_raster_stack(bytes);
  if (s.height != s.width || !is_valid_side(static_cast<int>(s.height)))
    throw FormatError(K::BadDimensions, 12, "raster must be square with a power-of-two side >= 8");
  if (s.timestamps.size() < 2) throw FormatError(K::BadDimensions, 8, "sequence needs at least 2 frames");
  if (s.step_seconds == 0) throw FormatError(K::Malformed, 20, "step_seconds is zero");

  const int n = static_cast<int>(s.height);
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  const std::size_t ts_base = kTpnnHeaderBytes;
  const std::size_t val_base = ts_base + s.timestamps.size() * 8;

  FieldSequence seq;
  seq.step_seconds = s.step_seconds;
  seq.frames.reserve(s.timestamps.size());
  for (std::size_t k = 0; k < s.timestamps.size(); ++k) {
    if (k > 0 && s.timestamps[k] - s.timestamps[k - 1] != static_cast<std::int64_t>(s.step_seconds))
      throw FormatError(K::NonMonotoneTimestamps, ts_base + k * 8,
                        "timestamp at frame index " + std::to_string(k) + " breaks the " +
                            std::to_string(s.step_seconds) + " s cadence");
    PrecipField f{Grid(n), s.timestamps[k]};
    for (std::size_t i = 0; i < cells; ++i) {
      const float v = s.values[k * cells + i];
      if (!std::isfinite(v) || v < 0.0f)
        throw FormatError(K::InvalidValue, val_base + (k * cells + i) * 4,
                          std::string(std::isnan(v) ? "NaN" : "invalid") + " value in frame " + std::to_string(k));
      f.values[i] = v;
    }
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

std::vector<std::uint8_t> encode_sequence(const FieldSequence& seq) {
  seq.validate();
  const int n = seq.n();
  RasterStack s;
  s.height = s.width = static_cast<std::uint32_t>(n);
  s.step_seconds = static_cast<std::uint32_t>(seq.step_seconds);
  s.timestamps.reserve(seq.size());
  s.values.reserve(seq.size() * static_cast<std::size_t>(n) * n);
  for (const auto& f : seq.frames) {
    s.timestamps.push_back(f.timestamp);
    for (double v : f.values.values()) s.values.push_back(static_cast<float>(v));
  }
  return encode_raster_stack(s);
}

FieldSequence read_sequence(const std::filesystem::path& path) { return decode_sequence(read_file_bytes(path)); }

void write_sequence(const FieldSequence& seq, const std::filesystem::path& path) {
  write_file_bytes(encode_sequence(seq), path);
}

}  // namespace nowcast
