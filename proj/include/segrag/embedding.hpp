#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <memory>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <sodium.h>
#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include "error.hpp"
#include "hash.hpp"
#include "io.hpp"
#include "text.hpp"

namespace segrag::embedding {

/// Fixed-dimension sentence vector.
struct Embedding {
  std::vector<float> values;

  std::size_t size() const noexcept { return values.size(); }
  std::span<const float> span() const noexcept { return values; }
  friend bool operator==(const Embedding&, const Embedding&) = default;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; 0 when either vector is zero.
inline double cosine(std::span<const float> a, std::span<const float> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dimension() const noexcept = 0;
  virtual std::string name() const = 0;
  /// Deterministic: equal text gives an equal vector.
  virtual Embedding embed(std::string_view text) const = 0;
};

// ---------------------------------------------------------------------------
// Cache keys

struct TextKey {
  std::array<std::uint8_t, 16> digest{};
  std::uint32_t length = 0;  // byte length of the normalized text

  std::string hex() const {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (auto b : digest) {
      out.push_back(kHex[b >> 4]);
      out.push_back(kHex[b & 0xF]);
    }
    return out;
  }
  friend bool operator==(const TextKey&, const TextKey&) = default;
};

struct DigestHash {
  std::size_t operator()(const std::array<std::uint8_t, 16>& d) const noexcept {
    std::uint64_t h;
    std::memcpy(&h, d.data(), sizeof(h));
    return static_cast<std::size_t>(h);
  }
};

/// NFC normalization followed by whitespace collapse.
inline std::string normalize_key_text(std::string_view text) {
  bool ascii = true;
  for (char c : text)
    if (static_cast<unsigned char>(c) >= 0x80) ascii = false;
  if (ascii) return text::collapse_whitespace(text);

  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw DataError("ICU NFC normalizer unavailable");
  icu::UnicodeString normalized =
      nfc->normalize(icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size()))), status);
  if (U_FAILURE(status)) throw DataError("NFC normalization failed");
  std::string utf8;
  normalized.toUTF8String(utf8);
  return text::collapse_whitespace(utf8);
}

/// BLAKE2b with a 16-byte digest over the normalized UTF-8 text.
inline TextKey text_key(std::string_view text) {
  if (sodium_init() < 0) throw DataError("libsodium initialization failed");
  const std::string norm = normalize_key_text(text);
  TextKey key;
  crypto_generichash(key.digest.data(), key.digest.size(), reinterpret_cast<const unsigned char*>(norm.data()),
                     norm.size(), nullptr, 0);
  key.length = static_cast<std::uint32_t>(norm.size());
  return key;
}

class MissingEmbeddingError : public DataError {
 public:
  explicit MissingEmbeddingError(const TextKey& key)
      : DataError("no cached embedding for text hash " + key.hex()), key_(key) {}
  const TextKey& key() const noexcept { return key_; }

 private:
  TextKey key_;
};

// ---------------------------------------------------------------------------
// Test encoder: seeded bag-of-words random projection.


class TestEncoder final : public EmbeddingProvider {
 public:
  TestEncoder(std::size_t dimension, std::uint64_t seed) : d_(dimension), seed_(seed) {
    if (dimension < 8) throw ConfigError("test encoder dimension must be >= 8, got " + std::to_string(dimension));
  }

  std::size_t dimension() const noexcept override { return d_; }
  std::string name() const override { return "test:" + std::to_string(d_) + ":" + std::to_string(seed_); }

  /// L2-normalized sum of the token vectors. Text without word tokens embeds
  /// as if its whitespace-collapsed form were a single token.
  Embedding embed(std::string_view text) const override {
    auto tokens = text::word_tokens(text);
    if (tokens.empty()) tokens.push_back(text::collapse_whitespace(text));
    std::vector<double> sum(d_, 0.0);
    for (const auto& t : tokens) {
      const auto v = token_vector(t);
      for (std::size_t i = 0; i < d_; ++i) sum[i] += v->at(i);
    }
    double n = 0.0;
    for (double x : sum) n += x * x;
    n = std::sqrt(n);
    Embedding e;
    e.values.resize(d_);
    for (std::size_t i = 0; i < d_; ++i) e.values[i] = static_cast<float>(n > 0 ? sum[i] / n : 0.0);
    return e;
  }

  /// Unit vector assigned to one token.
  std::shared_ptr<const std::vector<double>> token_vector(const std::string& token) const {
    {
      std::shared_lock lock(mu_);
      if (auto it = memo_.find(token); it != memo_.end()) return it->second;
    }
    std::mt19937_64 rng(hash::splitmix64(hash::fnv1a64(token) ^ hash::splitmix64(seed_)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto v = std::make_shared<std::vector<double>>(d_);
    double n = 0.0;
    for (auto& x : *v) {
      x = gauss(rng);
      n += x * x;
    }
    n = std::sqrt(n);
    for (auto& x : *v) x /= n;
    std::unique_lock lock(mu_);
    return memo_.emplace(token, std::move(v)).first->second;
  }

 private:
  std::size_t d_;
  std::uint64_t seed_;
  mutable std::shared_mutex mu_;
  mutable std::unordered_map<std::string, std::shared_ptr<const std::vector<double>>> memo_;
};

// ---------------------------------------------------------------------------
// On-disk cache: "SEGRAGEC", u16 version, u32 d, u64 count, then count records
// of [16-byte key][u32 text length][d x f32], all little-endian.

inline constexpr std::string_view kCacheMagic = "SEGRAGEC";
inline constexpr std::uint16_t kCacheVersion = 1;
inline constexpr std::size_t kCacheHeaderSize = 8 + 2 + 4 + 8;

struct CacheEntry {
  TextKey key;
  Embedding vector;
};

class CacheProvider final : public EmbeddingProvider {
 public:
  CacheProvider(std::size_t dimension, std::vector<CacheEntry> entries, std::string name)
      : d_(dimension), name_(std::move(name)) {
    for (auto& e : entries) {
      if (e.vector.size() != d_) throw DimensionError(d_, e.vector.size());
      map_.try_emplace(e.key.digest, Slot{e.key.length, std::move(e.vector)});
    }
  }

  std::size_t dimension() const noexcept override { return d_; }
  std::string name() const override { return name_; }
  std::size_t size() const noexcept { return map_.size(); }

  Embedding embed(std::string_view text) const override {
    const TextKey key = text_key(text);
    auto it = map_.find(key.digest);
    if (it == map_.end()) throw MissingEmbeddingError(key);
    if (it->second.length != key.length)
      throw DataError("cache key collision for text hash " + key.hex() + ": stored length " +
                      std::to_string(it->second.length) + ", text length " + std::to_string(key.length));
    return it->second.vector;
  }

  bool contains(std::string_view text) const { return map_.count(text_key(text).digest) > 0; }

 private:
  struct Slot {
    std::uint32_t length;
    Embedding vector;
  };
  std::size_t d_;
  std::string name_;
  std::unordered_map<std::array<std::uint8_t, 16>, Slot, DigestHash> map_;
};

/// Serializes entries in the given order; later duplicates of a key are dropped.
inline std::string encode_cache(std::size_t dimension, const std::vector<CacheEntry>& entries) {
  std::vector<const CacheEntry*> unique;
  std::unordered_map<std::array<std::uint8_t, 16>, bool, DigestHash> seen;
  for (const auto& e : entries) {
    if (e.vector.size() != dimension) throw DimensionError(dimension, e.vector.size());
    for (float v : e.vector.values)
      if (!std::isfinite(v)) throw DataError("non-finite value in embedding for text hash " + e.key.hex());
    if (seen.emplace(e.key.digest, true).second) unique.push_back(&e);
  }
  io::ByteWriter w;
  w.put_bytes(kCacheMagic);
  w.put<std::uint16_t>(kCacheVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dimension));
  w.put<std::uint64_t>(unique.size());
  for (const auto* e : unique) {
    w.put_bytes(std::span<const unsigned char>(e->key.digest.data(), e->key.digest.size()));
    w.put<std::uint32_t>(e->key.length);
    for (float v : e->vector.values) w.put<float>(v);
  }
  return w.str();
}

inline CacheProvider decode_cache(std::string_view bytes, std::string name) {
  io::ByteReader r(bytes);
  if (bytes.size() < kCacheHeaderSize) throw FormatError("embedding cache: truncated header");
  if (r.get_bytes(8) != kCacheMagic) throw FormatError("embedding cache: bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kCacheVersion)
    throw FormatError("embedding cache: unsupported version " + std::to_string(version));
  const auto d = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  if (d == 0) throw FormatError("embedding cache: zero dimension");
  const std::uint64_t record = 16 + 4 + 4ULL * d;
  if (count > r.remaining() / record || count * record != r.remaining())
    throw FormatError("embedding cache corrupt: header declares " + std::to_string(count) + " records of dimension " +
                      std::to_string(d) + " but payload is " + std::to_string(r.remaining()) + " bytes");
  std::vector<CacheEntry> entries;
  entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    CacheEntry e;
    const auto digest = r.get_bytes(16);
    std::memcpy(e.key.digest.data(), digest.data(), 16);
    e.key.length = r.get<std::uint32_t>();
    e.vector.values.resize(d);
    for (auto& v : e.vector.values) {
      v = r.get<float>();
      if (!std::isfinite(v)) throw FormatError("embedding cache corrupt: non-finite value in record " + std::to_string(i));
    }
    entries.push_back(std::move(e));
  }
  return CacheProvider(d, std::move(entries), std::move(name));
}

inline CacheProvider open_cache(const std::filesystem::path& path) {
  return decode_cache(io::read_file(path), "cache:" + path.string());
}

inline void write_cache(const std::filesystem::path& path, std::size_t dimension,
                        const std::vector<CacheEntry>& entries) {
  io::write_file_atomic(path, encode_cache(dimension, entries));
}

/// Cache entries for `texts` computed by `provider`.
inline std::vector<CacheEntry> compute_entries(const EmbeddingProvider& provider, const std::vector<std::string>& texts) {
  std::vector<CacheEntry> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back({text_key(t), provider.embed(t)});
  return out;
}

/// "test:<d>:<seed>" or "cache:<path>".
inline std::unique_ptr<EmbeddingProvider> make_provider(std::string_view spec) {
  if (spec.starts_with("cache:")) return std::make_unique<CacheProvider>(open_cache(std::string(spec.substr(6))));
  if (spec.starts_with("test:")) {
    const auto rest = std::string(spec.substr(5));
    const auto colon = rest.find(':');
    try {
      std::size_t pos = 0;
      const std::string d_str = rest.substr(0, colon);
      const auto d = std::stoull(d_str, &pos);
      if (pos != d_str.size()) throw std::invalid_argument("d");
      std::uint64_t seed = 42;
      if (colon != std::string::npos) {
        const std::string s_str = rest.substr(colon + 1);
        seed = std::stoull(s_str, &pos);
        if (pos != s_str.size()) throw std::invalid_argument("seed");
      }
      return std::make_unique<TestEncoder>(d, seed);
    } catch (const std::logic_error&) {
      throw ConfigError("bad provider spec '" + std::string(spec) + "', expected test:<d>:<seed>");
    }
  }
  throw ConfigError("bad provider spec '" + std::string(spec) + "', expected test:<d>:<seed> or cache:<path>");
}

}  // namespace segrag::embedding
