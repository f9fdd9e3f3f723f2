#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uniicl/tensor.hpp"

namespace uniicl::io {

/// Little-endian binary encoder used by every on-disk format.
class BinaryWriter {
 public:
  void bytes(const void* data, std::size_t n);
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  /// u32 length + bytes.
  void str(std::string_view s);
  /// u32 rank, u64 dims, f64 values.
  void tensor(const Tensor& t);
  void f64s(std::span<const double> v) { bytes(v.data(), v.size() * sizeof(double)); }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked decoder; any over-read throws FormatError naming the source.
class BinaryReader {
 public:
  BinaryReader(std::span<const std::uint8_t> data, std::string source);

  void bytes(void* out, std::size_t n);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  Tensor tensor();
  std::vector<double> f64s(std::size_t n);

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  void expect_end() const;

 private:
  std::span<const std::uint8_t> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

class KeyValues {
 public:
  /// Throws FormatError when the key is missing.
  const std::string& at(const std::string& key) const;
  bool contains(const std::string& key) const { return map_.count(key) != 0; }
  void set(std::string key, std::string value) { map_[std::move(key)] = std::move(value); }

 private:
  std::map<std::string, std::string> map_;
};

/// Parses "key=value" lines.
KeyValues parse_key_values(std::string_view text);

}  // namespace uniicl::io
