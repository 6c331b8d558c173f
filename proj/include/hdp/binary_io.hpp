#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hdp::io {

/// Append-only little-endian encoder.
class Writer {
 public:
  void bytes(std::string_view raw);
  void u32(std::uint32_t v);
  void f32(float v);
  void f32s(std::span<const float> values);

  const std::vector<std::uint8_t>& data() const { return buf_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian decoder; every overrun raises CorruptFile.
class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> data) : buf_(std::move(data)) {}
  static Reader from_file(const std::filesystem::path& path);

  std::string bytes(std::size_t n);
  std::uint32_t u32();
  float f32();
  std::vector<float> f32s(std::size_t n);

  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const;

  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

}  // namespace hdp::io
