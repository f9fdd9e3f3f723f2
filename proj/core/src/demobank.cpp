#include "uniicl/demobank.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>

#include "uniicl/errors.hpp"
#include "uniicl/io.hpp"

namespace uniicl {

namespace {

constexpr char kLogMagic[8] = {'U', 'I', 'C', 'L', 'B', 'A', 'N', 'K'};
constexpr char kIndexMagic[8] = {'U', 'I', 'C', 'L', 'B', 'I', 'D', 'X'};
constexpr std::uint8_t kPut = 1;
constexpr std::uint8_t kRemove = 2;
constexpr std::size_t kHeaderBytes = 8 + 4 + 32;

std::filesystem::path index_path(const std::filesystem::path& p) {
  auto out = p;
  out += ".idx";
  return out;
}

std::filesystem::path quarantine_path(const std::filesystem::path& p) {
  auto out = p;
  out += ".quarantine";
  return out;
}

std::uint32_t crc_of(std::span<const std::uint8_t> payload) {
  return static_cast<std::uint32_t>(
      crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
}

std::vector<std::uint8_t> frame(std::vector<std::uint8_t> payload) {
  io::BinaryWriter w;
  w.u32(static_cast<std::uint32_t>(payload.size()));
  w.u32(crc_of(payload));
  w.bytes(payload.data(), payload.size());
  return w.take();
}

std::vector<std::uint8_t> encode_put(const BankKey& key, const Digest& version,
                                     const MemoryTokens& value, std::uint64_t created,
                                     std::uint64_t last_access) {
  io::BinaryWriter w;
  w.u8(kPut);
  w.bytes(key.bytes.data(), key.bytes.size());
  w.bytes(version.data(), version.size());
  w.u64(value.source_len);
  w.u32(static_cast<std::uint32_t>(value.ratio));
  w.u64(created);
  w.u64(last_access);
  w.u32(static_cast<std::uint32_t>(value.tokens.rows()));
  w.u32(static_cast<std::uint32_t>(value.tokens.cols()));
  w.f64s(value.tokens.data());
  w.f64s(value.pooled.data());
  return frame(w.take());
}

std::vector<std::uint8_t> encode_remove(const BankKey& key) {
  io::BinaryWriter w;
  w.u8(kRemove);
  w.bytes(key.bytes.data(), key.bytes.size());
  return frame(w.take());
}

std::vector<std::uint8_t> encode_header(const Digest& backbone) {
  io::BinaryWriter w;
  w.bytes(kLogMagic, sizeof kLogMagic);
  w.u32(DemoBank::kFormatVersion);
  w.bytes(backbone.data(), backbone.size());
  return w.take();
}

}  // namespace

BankKey BankKey::make(std::string_view text, int ratio, const Digest& version_stamp) {
  Hasher h;
  h.update_u64(text.size()).update(text);
  h.update_u64(static_cast<std::uint64_t>(ratio));
  h.update(std::span<const std::uint8_t>(version_stamp));
  return {h.finish()};
}

BankKey BankKey::make(const DemonstrationRecord& demo, int ratio, const Digest& version_stamp) {
  if (!demo.text.empty()) return make(demo.text, ratio, version_stamp);
  // Token-only records are keyed by their ids.
  std::string ids;
  for (auto id : demo.token_ids) ids += std::to_string(id) + ' ';
  return make("#ids:" + ids, ratio, version_stamp);
}

DemoBank::DemoBank(const Compressor& compressor, std::size_t capacity)
    : compressor_(&compressor),
      capacity_(capacity),
      backbone_digest_(compressor.backbone().digest()) {}

std::unique_ptr<DemoBank> DemoBank::open(const std::filesystem::path& path,
                                         const Compressor& compressor, std::size_t capacity) {
  auto bank = std::make_unique<DemoBank>(compressor, capacity);
  bank->load(path);
  return bank;
}

std::size_t DemoBank::expected_slots(std::size_t source_len, int ratio) const {
  std::size_t k = 0;
  for (auto [b, e] : plan_segments(source_len, compressor_->backbone().max_positions(), ratio))
    k += slot_count(e - b, ratio);
  return k;
}

void DemoBank::load(const std::filesystem::path& path) {
  std::unique_lock lock(mu_);
  path_ = path;
  if (!std::filesystem::exists(path)) {
    io::write_file_atomic(path, encode_header(backbone_digest_));
    return;
  }
  auto buf = io::read_file(path);
  io::BinaryReader r(buf, path.string());
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kLogMagic, sizeof magic) != 0)
    throw FormatError(path.string() + ": not a demonstration bank");
  auto version = r.u32();
  if (version != kFormatVersion) {
    throw FormatError(path.string() + ": bank format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kFormatVersion) + ")");
  }
  Digest stored{};
  r.bytes(stored.data(), stored.size());
  if (stored != backbone_digest_) {
    throw FormatError(path.string() + ": bank was built for backbone " + to_hex(stored) +
                      ", current backbone is " + to_hex(backbone_digest_));
  }

  struct Loaded {
    Digest version;
    MemoryTokens value;
    std::uint64_t created, last_access;
  };
  std::map<BankKey, Loaded> staged;
  std::vector<std::uint8_t> bad;
  std::uint64_t quarantined = 0;

  while (!r.at_end()) {
    auto len = r.u32();
    auto crc = r.u32();
    if (len > r.remaining()) {
      throw FormatError(path.string() + ": truncated record at byte " +
                        std::to_string(r.offset() - 8));
    }
    std::vector<std::uint8_t> payload(len);
    r.bytes(payload.data(), len);
    auto reject = [&] {
      ++quarantined;
      auto framed = frame(payload);
      bad.insert(bad.end(), framed.begin(), framed.end());
    };
    if (crc_of(payload) != crc) {
      reject();
      continue;
    }
    try {
      io::BinaryReader pr(payload, path.string() + " record");
      auto kind = pr.u8();
      BankKey key;
      pr.bytes(key.bytes.data(), key.bytes.size());
      if (kind == kRemove) {
        pr.expect_end();
        staged.erase(key);
        continue;
      }
      if (kind != kPut) throw FormatError("unknown record kind");
      Loaded e;
      pr.bytes(e.version.data(), e.version.size());
      const auto source_len = pr.u64();
      const auto ratio = static_cast<int>(pr.u32());
      e.created = pr.u64();
      e.last_access = pr.u64();
      const auto k = pr.u32();
      const auto d = pr.u32();
      auto tok = pr.f64s(static_cast<std::size_t>(k) * d);
      auto pooled = pr.f64s(d);
      pr.expect_end();
      // MemoryTokens invariants.
      if (ratio < 1 || source_len == 0 || d != compressor_->backbone().embed_dim() ||
          k != expected_slots(source_len, ratio))
        throw FormatError("record violates slot-count invariant");
      for (std::uint32_t j = 0; j < d; ++j) {
        double m = 0.0;
        for (std::uint32_t i = 0; i < k; ++i) m += tok[i * d + j];
        m /= k;
        if (!std::isfinite(pooled[j]) || std::abs(m - pooled[j]) > 1e-6)
          throw FormatError("record pooled vector is not the token mean");
      }
      PrecisionScope exact(Precision::kFloat64);
      e.value.tokens = Tensor::from({k, d}, std::move(tok));
      e.value.pooled = Tensor::from({d}, std::move(pooled));
      e.value.source_len = source_len;
      e.value.ratio = ratio;
      staged[key] = std::move(e);
    } catch (const Error&) {
      reject();
    }
  }

  // Access clocks from the sidecar index, when it describes this exact log.
  std::uint64_t clock = 0;
  bool index_ok = false;
  std::map<BankKey, std::uint64_t> access;
  const auto idx = index_path(path);
  if (std::filesystem::exists(idx)) {
    try {
      auto ibuf = io::read_file(idx);
      io::BinaryReader ir(ibuf, idx.string());
      char im[8];
      ir.bytes(im, sizeof im);
      if (std::memcmp(im, kIndexMagic, sizeof im) == 0 && ir.u32() == kFormatVersion &&
          ir.u64() == buf.size()) {
        clock = ir.u64();
        auto n = ir.u64();
        for (std::uint64_t i = 0; i < n; ++i) {
          BankKey key;
          ir.bytes(key.bytes.data(), key.bytes.size());
          access[key] = ir.u64();
        }
        ir.expect_end();
        index_ok = true;
      }
    } catch (const Error&) {
      index_ok = false;
    }
  }

  for (auto& [key, e] : staged) {
    std::uint64_t la = e.last_access;
    if (index_ok) {
      auto it = access.find(key);
      if (it != access.end()) la = it->second;
    }
    clock = std::max({clock, la, e.created});
    insert_locked(key, e.version, std::move(e.value), e.created, la);
  }
  clock_ = clock;
  quarantined_ += quarantined;
  if (!bad.empty()) {
    std::ofstream q(quarantine_path(path), std::ios::binary | std::ios::app);
    q.write(reinterpret_cast<const char*>(bad.data()), static_cast<std::streamsize>(bad.size()));
  }
}

void DemoBank::insert_locked(const BankKey& key, const Digest& version, MemoryTokens value,
                             std::uint64_t created, std::uint64_t last_access) {
  auto slot = std::make_unique<Slot>();
  slot->version = version;
  slot->value = std::move(value);
  slot->created = created;
  slot->last_access = last_access;
  slots_[key] = std::move(slot);
}

void DemoBank::append_record_locked(std::span<const std::uint8_t> record) {
  if (!path_) return;
  std::ofstream out(*path_, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to bank log " + path_->string());
  out.write(reinterpret_cast<const char*>(record.data()), static_cast<std::streamsize>(record.size()));
  if (!out) throw IoError("short write to bank log " + path_->string());
}

MemoryTokens DemoBank::get_or_compress(const DemonstrationRecord& demo, int ratio,
                                       const CompressorParams& params) {
  const Digest version = params.version_stamp();
  const BankKey key = BankKey::make(demo, ratio, version);
  {
    std::shared_lock lock(mu_);
    auto it = slots_.find(key);
    if (it != slots_.end()) {
      it->second->last_access = clock_.fetch_add(1) + 1;
      hits_.fetch_add(1);
      return it->second->value;
    }
  }
  misses_.fetch_add(1);
  MemoryTokens value;
  {
    NoGradScope no_grad;
    value = compressor_->compress_segmented(demo.token_ids, ratio, params).detach();
  }
  std::unique_lock lock(mu_);
  if (!slots_.count(key)) {
    const auto tick = clock_.fetch_add(1) + 1;
    try {
      append_record_locked(encode_put(key, version, value, tick, tick));
    } catch (const IoError& e) {
      throw IoError(std::string(e.what()) + " (key " + to_hex(key.bytes) + ")");
    }
    insert_locked(key, version, value, tick, tick);
    evict_locked(capacity_);
  }
  return value;
}

std::optional<MemoryTokens> DemoBank::lookup(const BankKey& key) {
  std::shared_lock lock(mu_);
  auto it = slots_.find(key);
  if (it == slots_.end()) {
    misses_.fetch_add(1);
    return std::nullopt;
  }
  it->second->last_access = clock_.fetch_add(1) + 1;
  hits_.fetch_add(1);
  return it->second->value;
}

std::size_t DemoBank::evict_locked(std::size_t capacity) {
  std::size_t evicted = 0;
  while (slots_.size() > capacity) {
    auto victim = std::min_element(slots_.begin(), slots_.end(), [](const auto& a, const auto& b) {
      return a.second->last_access.load() < b.second->last_access.load();
    });
    append_record_locked(encode_remove(victim->first));
    slots_.erase(victim);
    ++evicted;
  }
  evictions_.fetch_add(evicted);
  return evicted;
}

std::size_t DemoBank::evict_to_capacity(std::size_t capacity) {
  std::unique_lock lock(mu_);
  return evict_locked(capacity);
}

void DemoBank::set_capacity(std::size_t capacity) {
  std::unique_lock lock(mu_);
  capacity_ = capacity;
  evict_locked(capacity_);
}

std::size_t DemoBank::invalidate_stale(const Digest& current) {
  std::unique_lock lock(mu_);
  std::size_t removed = 0;
  for (auto it = slots_.begin(); it != slots_.end();) {
    if (it->second->version != current) {
      append_record_locked(encode_remove(it->first));
      it = slots_.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  return removed;
}

std::size_t DemoBank::invalidate_all() {
  std::unique_lock lock(mu_);
  std::size_t removed = slots_.size();
  for (const auto& [key, _] : slots_) append_record_locked(encode_remove(key));
  slots_.clear();
  return removed;
}

void DemoBank::write_index_locked() const {
  io::BinaryWriter w;
  w.bytes(kIndexMagic, sizeof kIndexMagic);
  w.u32(kFormatVersion);
  w.u64(std::filesystem::file_size(*path_));
  w.u64(clock_.load());
  w.u64(slots_.size());
  for (const auto& [key, slot] : slots_) {
    w.bytes(key.bytes.data(), key.bytes.size());
    w.u64(slot->last_access.load());
  }
  io::write_file_atomic(index_path(*path_), w.buffer());
}

void DemoBank::persist() {
  std::unique_lock lock(mu_);
  if (!path_) throw ContractError("persist() on an in-memory bank");
  auto log = encode_header(backbone_digest_);
  for (const auto& [key, slot] : slots_) {
    auto rec = encode_put(key, slot->version, slot->value, slot->created, slot->last_access.load());
    log.insert(log.end(), rec.begin(), rec.end());
  }
  io::write_file_atomic(*path_, log);
  write_index_locked();
}

std::uint64_t DemoBank::compact() {
  const auto before = disk_bytes();
  persist();
  const auto after = disk_bytes();
  return before > after ? before - after : 0;
}

std::uint64_t DemoBank::disk_bytes() const {
  if (!path_) return 0;
  std::uint64_t n = 0;
  std::error_code ec;
  for (const auto& p : {*path_, index_path(*path_)}) {
    auto s = std::filesystem::file_size(p, ec);
    if (!ec) n += s;
  }
  return n;
}

BankStats DemoBank::stats() const {
  BankStats s;
  s.hits = hits_.load();
  s.misses = misses_.load();
  s.evictions = evictions_.load();
  s.quarantined = quarantined_.load();
  {
    std::shared_lock lock(mu_);
    s.entries = slots_.size();
  }
  s.bytes_on_disk = disk_bytes();
  return s;
}

std::size_t DemoBank::size() const {
  std::shared_lock lock(mu_);
  return slots_.size();
}

bool DemoBank::contains(const BankKey& key) const {
  std::shared_lock lock(mu_);
  return slots_.count(key) != 0;
}

std::vector<BankEntry> DemoBank::entries() const {
  std::shared_lock lock(mu_);
  std::vector<BankEntry> out;
  out.reserve(slots_.size());
  for (const auto& [key, slot] : slots_)
    out.push_back({key, slot->version, slot->value, slot->last_access.load(), slot->created});
  return out;
}

}  // namespace uniicl
