#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace uniicl {

/// SHA-256 digest; the single digest algorithm used for backbone checkpoints,
/// compressor version stamps and bank keys.
using Digest = std::array<std::uint8_t, 32>;

inline constexpr std::string_view kDigestAlgorithm = "sha256";

std::string to_hex(const Digest& d);
Digest digest_from_hex(std::string_view hex);

/// Incremental SHA-256.
class Hasher {
 public:
  Hasher();
  ~Hasher();
  Hasher(const Hasher&) = delete;
  Hasher& operator=(const Hasher&) = delete;

  Hasher& update(std::span<const std::uint8_t> bytes);
  Hasher& update(std::string_view s);
  Hasher& update(std::span<const double> values);
  Hasher& update_u64(std::uint64_t v);
  Digest finish();

 private:
  void* ctx_;
};

Digest sha256(std::string_view s);

}  // namespace uniicl
