#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "uniicl/compressor.hpp"
#include "uniicl/digest.hpp"

namespace uniicl {

/// Content address of a cached compression: digest of (text, ratio, params version).
struct BankKey {
  Digest bytes{};

  static BankKey make(std::string_view text, int ratio, const Digest& version_stamp);
  static BankKey make(const DemonstrationRecord& demo, int ratio, const Digest& version_stamp);

  auto operator<=>(const BankKey&) const = default;
};

struct BankEntry {
  BankKey key;
  Digest version{};
  MemoryTokens value;
  /// Logical clock of the most recent lookup or insert.
  std::uint64_t last_access = 0;
  /// Logical clock at insertion (a tick, not wall time, so reruns are byte-identical).
  std::uint64_t created = 0;
};

struct BankStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t evictions = 0;
  std::uint64_t entries = 0;
  std::uint64_t bytes_on_disk = 0;
  std::uint64_t quarantined = 0;
};

/// Persistent, content-addressed cache of Memory Tokens with LRU eviction.
///
/// On disk a bank is an append-only record log (`<path>`) plus a sidecar
/// index (`<path>.idx`) holding access clocks. The log alone is enough to
/// rebuild the bank. Log layout, all little-endian:
///
///   "UICLBANK" | u32 format version | 32-byte backbone digest
///   repeated:  u32 payload length | u32 crc32(payload) | payload
///   payload:   u8 kind (1 put, 2 remove) | 32-byte key
///              put only: 32-byte version | u64 source_len | u32 ratio |
///              u64 created | u64 last_access | u32 k | u32 d |
///              k*d f64 tokens | d f64 pooled
///
/// Readers and the writer may share one bank across threads: lookups take a
/// shared lock; inserts, evictions and persistence take an exclusive one.
class DemoBank {
 public:
  static constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();
  static constexpr std::uint32_t kFormatVersion = 1;

  /// In-memory bank.
  explicit DemoBank(const Compressor& compressor, std::size_t capacity = kUnbounded);

  /// Opens (or creates) a file-backed bank. Throws FormatError on a
  /// truncated log or a header written for another format version or
  /// backbone; nothing is loaded in that case.
  static std::unique_ptr<DemoBank> open(const std::filesystem::path& path,
                                        const Compressor& compressor,
                                        std::size_t capacity = kUnbounded);

  DemoBank(const DemoBank&) = delete;
  DemoBank& operator=(const DemoBank&) = delete;

  /// Cache hit: zero backbone forwards. Miss: compress, store, return.
  MemoryTokens get_or_compress(const DemonstrationRecord& demo, int ratio,
                               const CompressorParams& params);

  /// Lookup without compressing; counts as a hit or miss.
  std::optional<MemoryTokens> lookup(const BankKey& key);

  /// Removes least-recently-used entries until size() <= capacity.
  std::size_t evict_to_capacity(std::size_t capacity);
  void set_capacity(std::size_t capacity);
  std::size_t capacity() const { return capacity_; }

  /// Drops every entry whose params version differs from `current`.
  std::size_t invalidate_stale(const Digest& current);
  std::size_t invalidate_all();

  /// Rewrites the log with only live entries and refreshes the index.
  /// Requires a file-backed bank.
  void persist();
  /// Same as persist(); returns bytes reclaimed.
  std::uint64_t compact();

  BankStats stats() const;
  std::size_t size() const;
  bool contains(const BankKey& key) const;
  /// Snapshot sorted by key.
  std::vector<BankEntry> entries() const;
  const std::optional<std::filesystem::path>& path() const { return path_; }

 private:
  struct Slot {
    Digest version{};
    MemoryTokens value;
    std::uint64_t created = 0;
    std::atomic<std::uint64_t> last_access{0};
  };

  void insert_locked(const BankKey& key, const Digest& version, MemoryTokens value,
                     std::uint64_t created, std::uint64_t last_access);
  std::size_t evict_locked(std::size_t capacity);
  void append_record_locked(std::span<const std::uint8_t> record);
  void load(const std::filesystem::path& path);
  void write_index_locked() const;
  std::uint64_t disk_bytes() const;
  std::size_t expected_slots(std::size_t source_len, int ratio) const;

  const Compressor* compressor_;
  std::size_t capacity_;
  std::optional<std::filesystem::path> path_;
  Digest backbone_digest_{};

  mutable std::shared_mutex mu_;
  std::map<BankKey, std::unique_ptr<Slot>> slots_;
  std::atomic<std::uint64_t> clock_{0};
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<std::uint64_t> misses_{0};
  std::atomic<std::uint64_t> evictions_{0};
  std::atomic<std::uint64_t> quarantined_{0};
};

}  // namespace uniicl
