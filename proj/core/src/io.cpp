#include "uniicl/io.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <system_error>

#include "uniicl/errors.hpp"

namespace uniicl::io {

void BinaryWriter::bytes(const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  buf_.insert(buf_.end(), p, p + n);
}

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void BinaryWriter::tensor(const Tensor& t) {
  u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) u64(d);
  f64s(t.data());
}

BinaryReader::BinaryReader(std::span<const std::uint8_t> data, std::string source)
    : data_(data), source_(std::move(source)) {}

void BinaryReader::bytes(void* out, std::size_t n) {
  if (n > remaining()) {
    throw FormatError(source_ + ": truncated at byte " + std::to_string(pos_) + " (needed " +
                      std::to_string(n) + ", have " + std::to_string(remaining()) + ")");
  }
  std::memcpy(out, data_.data() + pos_, n);
  pos_ += n;
}

std::uint8_t BinaryReader::u8() {
  std::uint8_t v;
  bytes(&v, 1);
  return v;
}

std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  bytes(&v, sizeof v);
  return v;
}

std::uint64_t BinaryReader::u64() {
  std::uint64_t v;
  bytes(&v, sizeof v);
  return v;
}

double BinaryReader::f64() {
  double v;
  bytes(&v, sizeof v);
  return v;
}

std::string BinaryReader::str() {
  auto n = u32();
  if (n > remaining()) throw FormatError(source_ + ": string length exceeds file");
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

std::vector<double> BinaryReader::f64s(std::size_t n) {
  if (n > remaining() / sizeof(double)) throw FormatError(source_ + ": tensor data exceeds file");
  std::vector<double> v(n);
  bytes(v.data(), n * sizeof(double));
  return v;
}

Tensor BinaryReader::tensor() {
  auto rank = u32();
  if (rank > 8) throw FormatError(source_ + ": implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = u64();
  auto values = f64s(shape_numel(shape));
  PrecisionScope exact(Precision::kFloat64);
  return Tensor::from(std::move(shape), std::move(values));
}

void BinaryReader::expect_end() const {
  if (!at_end()) {
    throw FormatError(source_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

const std::string& KeyValues::at(const std::string& key) const {
  auto it = map_.find(key);
  if (it == map_.end()) throw FormatError("missing header field '" + key + "'");
  return it->second;
}

KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    auto eq = line.find('=');
    if (eq != std::string_view::npos)
      kv.set(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
    pos = nl + 1;
  }
  return kv;
}

}  // namespace uniicl::io
