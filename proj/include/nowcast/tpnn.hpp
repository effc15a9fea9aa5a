#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "nowcast/field.hpp"

namespace nowcast {

// TPNN raster sequence layout (all little-endian):
//   0  "TPNN"
//   4  u32 version (1)
//   8  u32 frame count T
//   12 u32 height H
//   16 u32 width W
//   20 u32 step_seconds
//   24 T × i64 timestamps
//   .. T·H·W float32, frame-major then row-major, mm/h

inline constexpr std::uint32_t kTpnnVersion = 1;
inline constexpr std::size_t kTpnnHeaderBytes = 24;

/// Reading or writing a binary container failed. `offset` is the byte
/// position the problem was detected at.
class FormatError : public std::runtime_error {
public:
  enum class Kind {
    Io,
    BadMagic,
    VersionMismatch,
    BadDimensions,
    Truncated,
    TrailingBytes,
    NonMonotoneTimestamps,
    InvalidValue,
    Malformed,
  };

  FormatError(Kind kind, std::size_t offset, const std::string& what);
  Kind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

private:
  Kind kind_;
  std::size_t offset_;
};

/// Raw TPNN contents without the FieldSequence semantics (values may be
/// negative, timestamps unconstrained). Used for the per-lead field dumps.
struct RasterStack {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t step_seconds = 0;
  std::vector<std::int64_t> timestamps;
  std::vector<float> values;
};

RasterStack decode_raster_stack(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_raster_stack(const RasterStack& stack);
RasterStack read_raster_stack(const std::filesystem::path& path);
void write_raster_stack(const RasterStack& stack, const std::filesystem::path& path);

FieldSequence decode_sequence(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_sequence(const FieldSequence& seq);
FieldSequence read_sequence(const std::filesystem::path& path);
void write_sequence(const FieldSequence& seq, const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path);

}  // namespace nowcast
