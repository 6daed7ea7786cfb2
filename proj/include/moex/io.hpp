#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace moex::io {

/// Little-endian append-only byte buffer.
class BinaryWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v);
  void f64(double v);
  void bytes(std::string_view b) { buf_.append(b); }
  // u32 length prefix, then the bytes.
  void str(std::string_view s);

  const std::string& data() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int n);
  std::string buf_;
};

/// Bounds-checked reader; every overrun throws FormatError naming the source.
class BinaryReader {
 public:
  BinaryReader(std::string_view data, std::string source) : data_(data), source_(std::move(source)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32();
  double f64();
  std::string_view bytes(std::size_t n);
  std::string str();
  // Rejects anything but the exact magic, naming the source.
  void expect_magic(std::string_view magic);

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }
  const std::string& source() const { return source_; }

 private:
  std::uint64_t get(int n);
  void need(std::size_t n);
  std::string_view data_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
// Writes through a temporary sibling and renames into place.
void write_file(const std::string& path, std::string_view data);

std::string sha1_hex(std::string_view data);
// Same digest as `git hash-object` for a blob with this content.
std::string git_blob_sha1(std::string_view content);

}  // namespace moex::io
