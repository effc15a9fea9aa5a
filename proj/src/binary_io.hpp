#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "nowcast/tpnn.hpp"

namespace nowcast::detail {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

class ByteReader {
public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::uint32_t u32() { return load<std::uint32_t>(); }
  std::int64_t i64() { return load<std::int64_t>(); }
  float f32() { return load<float>(); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(FormatError::Kind::Truncated, bytes_.size(), "unexpected end of data");
  }
  template <class T>
  T load() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

class ByteWriter {
public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void i64(std::int64_t v) { bytes(&v, sizeof v); }
  void f32(float v) { bytes(&v, sizeof v); }
  void str(const std::string& s) { bytes(s.data(), s.size()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

private:
  std::vector<std::uint8_t> out_;
};

}  // namespace nowcast::detail
