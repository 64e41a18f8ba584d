#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "boundary.hpp"
#include "document.hpp"
#include "embedding.hpp"
#include "error.hpp"
#include "io.hpp"
#include "stats.hpp"
#include "text.hpp"

namespace segrag::chunkers {

enum class Unit { sentence, token, character };

inline std::string_view to_string(Unit u) {
  switch (u) {
    case Unit::sentence: return "sentence";
    case Unit::token: return "token";
    case Unit::character: return "char";
  }
  return "token";
}

inline Unit parse_unit(std::string_view s) {
  if (s == "sentence") return Unit::sentence;
  if (s == "token") return Unit::token;
  if (s == "char") return Unit::character;
  throw ConfigError("unknown unit '" + std::string(s) + "', expected token, char or sentence");
}

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const noexcept { return end - begin; }
  friend bool operator==(const Span&, const Span&) = default;
};

/// Retrieval unit: a half-open span of sentences, tokens or characters of one document.
struct Chunk {
  std::string doc_id;
  std::size_t index = 0;
  Span span;
  Unit unit = Unit::sentence;
  std::string text;

  friend bool operator==(const Chunk&, const Chunk&) = default;
};

enum class Kind { fixed, sentence, recursive, cosine_semantic, model };

inline Kind parse_kind(std::string_view s) {
  if (s == "fixed" || s == "char") return Kind::fixed;
  if (s == "sentence") return Kind::sentence;
  if (s == "recursive") return Kind::recursive;
  if (s == "cosine" || s == "cosine_semantic" || s == "semantic") return Kind::cosine_semantic;
  if (s == "model") return Kind::model;
  throw ConfigError("unknown chunker '" + std::string(s) + "'");
}

struct ChunkerConfig {
  Kind kind = Kind::fixed;
  std::size_t size = 1000;   // fixed/recursive, in `unit`
  std::size_t overlap = 200;
  Unit unit = Unit::token;
  std::size_t window = 3;  // sentence chunker
  std::size_t window_overlap = 1;
  double percentile = 95.0;  // cosine chunker
  double threshold = boundary::kDefaultThreshold;
  std::size_t max_sentences = 0;  // 0: unlimited

  void validate() const {
    if ((kind == Kind::fixed || kind == Kind::recursive)) {
      if (size == 0) throw ConfigError("chunk size must be positive");
      if (overlap >= size) throw ConfigError("overlap must be smaller than size");
      if (unit == Unit::sentence) throw ConfigError("fixed/recursive chunkers count tokens or chars");
    }
    if (kind == Kind::sentence) {
      if (window == 0) throw ConfigError("window must be >= 1");
      if (window_overlap >= window) throw ConfigError("window overlap must be smaller than window");
    }
    if (kind == Kind::cosine_semantic && !(percentile > 0.0 && percentile < 100.0))
      throw ConfigError("percentile must lie in (0,100)");
    if (kind == Kind::model && !(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0,1)");
  }
};

// ---------------------------------------------------------------------------
// Unit geometry over raw text

namespace detail {

/// Byte ranges of the counting units of `text`.
inline std::vector<text::ByteRange> unit_ranges(std::string_view s, Unit unit) {
  if (unit == Unit::token) return text::whitespace_tokens(s);
  const auto offsets = text::codepoint_offsets(s);
  std::vector<text::ByteRange> out;
  out.reserve(offsets.size());
  for (std::size_t i = 0; i < offsets.size(); ++i)
    out.push_back({offsets[i], i + 1 < offsets.size() ? offsets[i + 1] : s.size()});
  return out;
}

class UnitIndex {
 public:
  UnitIndex(std::string_view s, Unit unit) : units_(unit_ranges(s, unit)) {}

  std::size_t size() const noexcept { return units_.size(); }
  const text::ByteRange& operator[](std::size_t i) const { return units_[i]; }

  /// First unit starting at or after byte `b`.
  std::size_t first_at(std::size_t b) const {
    return static_cast<std::size_t>(std::lower_bound(units_.begin(), units_.end(), b,
                                                     [](const text::ByteRange& r, std::size_t x) { return r.begin < x; }) -
                                    units_.begin());
  }
  /// One past the last unit ending at or before byte `e`.
  std::size_t last_before(std::size_t e) const {
    return static_cast<std::size_t>(std::upper_bound(units_.begin(), units_.end(), e,
                                                     [](std::size_t x, const text::ByteRange& r) { return x < r.end; }) -
                                    units_.begin());
  }
  Span span_of(text::ByteRange r) const { return {first_at(r.begin), std::max(first_at(r.begin), last_before(r.end))}; }
  std::size_t length(text::ByteRange r) const { return span_of(r).size(); }

 private:
  std::vector<text::ByteRange> units_;
};

inline Chunk text_chunk(const std::string& doc_id, std::string_view s, const UnitIndex& idx, Span span, Unit unit) {
  const auto b = idx[span.begin].begin, e = idx[span.end - 1].end;
  return {doc_id, 0, span, unit, std::string(s.substr(b, e - b))};
}

inline void number(std::vector<Chunk>& chunks) {
  for (std::size_t i = 0; i < chunks.size(); ++i) chunks[i].index = i;
}

}  // namespace detail

/// Half-open windows of `size` advancing by size - overlap; the last window may
/// be shorter.
inline std::vector<Span> window_spans(std::size_t n, std::size_t size, std::size_t overlap) {
  if (size == 0) throw ConfigError("window size must be positive");
  if (overlap >= size) throw ConfigError("overlap must be smaller than size");
  std::vector<Span> out;
  for (std::size_t start = 0; start < n; start += size - overlap) {
    const std::size_t end = std::min(start + size, n);
    out.push_back({start, end});
    if (end == n) break;
  }
  return out;
}

inline std::vector<Chunk> chunk_fixed(const std::string& doc_id, std::string_view s, std::size_t size = 1000,
                                      std::size_t overlap = 200, Unit unit = Unit::token) {
  if (unit == Unit::sentence) throw ConfigError("fixed chunker counts tokens or chars");
  const detail::UnitIndex idx(s, unit);
  std::vector<Chunk> out;
  for (const auto& span : window_spans(idx.size(), size, overlap)) out.push_back(detail::text_chunk(doc_id, s, idx, span, unit));
  detail::number(out);
  return out;
}

inline std::vector<Chunk> chunk_fixed(const Document& doc, std::size_t size = 1000, std::size_t overlap = 200,
                                      Unit unit = Unit::token) {
  return chunk_fixed(doc.id, doc.text(), size, overlap, unit);
}

/// Chunks made of whole sentences from `[begin,end)` spans.
inline std::vector<Chunk> sentence_chunks(const std::string& doc_id, const std::vector<std::string>& sentences,
                                          const std::vector<Span>& spans) {
  std::vector<Chunk> out;
  for (const auto& sp : spans) {
    std::vector<std::string> part(sentences.begin() + static_cast<std::ptrdiff_t>(sp.begin),
                                  sentences.begin() + static_cast<std::ptrdiff_t>(sp.end));
    out.push_back({doc_id, 0, sp, Unit::sentence, text::join(part, " ")});
  }
  detail::number(out);
  return out;
}

/// Contiguous spans that start a new chunk after every position in `boundaries`
/// (a boundary at i separates sentence i from i+1).
inline std::vector<Span> spans_from_boundaries(std::size_t n, const std::vector<std::size_t>& boundaries) {
  std::vector<Span> out;
  if (n == 0) return out;
  std::size_t start = 0;
  for (auto b : boundaries) {
    out.push_back({start, b + 1});
    start = b + 1;
  }
  out.push_back({start, n});
  return out;
}

inline std::vector<Chunk> chunk_sentences(const Document& doc, std::size_t window = 3, std::size_t overlap = 1) {
  const auto sentences = doc.flat_sentences();
  return sentence_chunks(doc.id, sentences, window_spans(sentences.size(), window, overlap));
}

// ---------------------------------------------------------------------------
// Recursive splitter

namespace detail {

// Separator strength of a whitespace run: 4 blank line, 3 newline,
// 2 after a sentence terminator, 1 plain space.
inline int gap_strength(std::string_view s, std::size_t run_begin, std::size_t run_end) {
  const auto newlines = std::count(s.begin() + static_cast<std::ptrdiff_t>(run_begin),
                                   s.begin() + static_cast<std::ptrdiff_t>(run_end), '\n');
  if (newlines >= 2) return 4;
  if (newlines == 1) return 3;
  std::size_t k = run_begin;
  while (k > 0 && (s[k - 1] == '"' || s[k - 1] == '\'' || s[k - 1] == ')' || s[k - 1] == ']')) --k;
  if (k > 0 && (s[k - 1] == '.' || s[k - 1] == '!' || s[k - 1] == '?')) return 2;
  return 1;
}

inline std::vector<text::ByteRange> split_at(std::string_view s, text::ByteRange r, int min_strength) {
  std::vector<text::ByteRange> pieces;
  std::size_t i = r.begin;
  while (i < r.end && text::is_space(s[i])) ++i;
  std::size_t piece_begin = i;
  while (i < r.end) {
    if (!text::is_space(s[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < r.end && text::is_space(s[j])) ++j;
    if (j == r.end) break;
    if (gap_strength(s, i, j) >= min_strength) {
      pieces.push_back({piece_begin, i});
      piece_begin = j;
    }
    i = j;
  }
  std::size_t end = r.end;
  while (end > piece_begin && text::is_space(s[end - 1])) --end;
  if (end > piece_begin) pieces.push_back({piece_begin, end});
  return pieces;
}

class RecursiveSplitter {
 public:
  RecursiveSplitter(std::string_view s, const UnitIndex& idx, std::size_t size, std::size_t overlap)
      : s_(s), idx_(idx), size_(size), overlap_(overlap) {}

  void run(text::ByteRange r, int strength, std::vector<text::ByteRange>& out) const {
    if (strength < 1) {  // indivisible
      out.push_back(r);
      return;
    }
    const auto pieces = split_at(s_, r, strength);
    if (pieces.size() <= 1) {
      if (!pieces.empty()) run(pieces.front(), strength - 1, out);
      return;
    }
    std::vector<text::ByteRange> good;
    for (const auto& p : pieces) {
      if (idx_.length(p) <= size_) {
        good.push_back(p);
        continue;
      }
      merge(good, out);
      good.clear();
      run(p, strength - 1, out);
    }
    merge(good, out);
  }

 private:
  std::size_t length(const text::ByteRange& first, const text::ByteRange& last) const {
    return idx_.length({first.begin, last.end});
  }

  // Greedy packing up to size_, carrying up to overlap_ units of trailing
  // pieces into the next chunk.
  void merge(const std::vector<text::ByteRange>& pieces, std::vector<text::ByteRange>& out) const {
    std::deque<text::ByteRange> current;
    for (const auto& p : pieces) {
      if (!current.empty() && length(current.front(), p) > size_) {
        out.push_back({current.front().begin, current.back().end});
        while (!current.empty() &&
               (length(current.front(), current.back()) > overlap_ || length(current.front(), p) > size_))
          current.pop_front();
      }
      current.push_back(p);
    }
    if (!current.empty()) out.push_back({current.front().begin, current.back().end});
  }

  std::string_view s_;
  const UnitIndex& idx_;
  std::size_t size_;
  std::size_t overlap_;
};

}  // namespace detail

/// Splits on blank lines, then newlines, then sentence ends, then spaces,
/// descending only into pieces longer than `size`, and greedily merges
/// neighbouring pieces up to `size` units with up to `overlap` units carried
/// over. Only a single indivisible unit can exceed `size`.
inline std::vector<Chunk> chunk_recursive(const std::string& doc_id, std::string_view s, std::size_t size = 1000,
                                          std::size_t overlap = 200, Unit unit = Unit::token) {
  if (unit == Unit::sentence) throw ConfigError("recursive chunker counts tokens or chars");
  if (size == 0) throw ConfigError("chunk size must be positive");
  if (overlap >= size) throw ConfigError("overlap must be smaller than size");
  const detail::UnitIndex idx(s, unit);
  std::vector<Chunk> out;
  if (idx.size() == 0) return out;
  std::vector<text::ByteRange> ranges;
  detail::RecursiveSplitter(s, idx, size, overlap).run({0, s.size()}, 4, ranges);
  for (const auto& r : ranges) {
    const Span sp = idx.span_of(r);
    if (sp.size() == 0) continue;
    out.push_back({doc_id, 0, sp, unit, std::string(s.substr(r.begin, r.end - r.begin))});
  }
  detail::number(out);
  return out;
}

inline std::vector<Chunk> chunk_recursive(const Document& doc, std::size_t size = 1000, std::size_t overlap = 200,
                                          Unit unit = Unit::token) {
  return chunk_recursive(doc.id, doc.text(), size, overlap, unit);
}

// ---------------------------------------------------------------------------
// Embedding-driven chunkers

inline std::vector<embedding::Embedding> embed_all(const std::vector<std::string>& sentences,
                                                   const embedding::EmbeddingProvider& provider) {
  std::vector<embedding::Embedding> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(provider.embed(s));
  return out;
}

/// Cosine distance between each adjacent sentence pair.
inline std::vector<double> adjacent_distances(const std::vector<embedding::Embedding>& vectors) {
  std::vector<double> out;
  for (std::size_t i = 0; i + 1 < vectors.size(); ++i)
    out.push_back(1.0 - embedding::cosine(vectors[i].span(), vectors[i + 1].span()));
  return out;
}

/// Boundaries where the adjacent distance strictly exceeds the given
/// percentile of all adjacent distances in the document.
inline std::vector<std::size_t> cosine_boundaries(const std::vector<double>& distances, double pct) {
  std::vector<std::size_t> out;
  if (distances.empty()) return out;
  const double threshold = stats::percentile(distances, pct);
  for (std::size_t i = 0; i < distances.size(); ++i)
    if (distances[i] > threshold) out.push_back(i);
  return out;
}

inline std::vector<Chunk> chunk_cosine(const Document& doc, const embedding::EmbeddingProvider& provider,
                                       double pct = 95.0) {
  if (!(pct > 0.0 && pct < 100.0)) throw ConfigError("percentile must lie in (0,100)");
  const auto sentences = doc.flat_sentences();
  const auto bounds = cosine_boundaries(adjacent_distances(embed_all(sentences, provider)), pct);
  return sentence_chunks(doc.id, sentences, spans_from_boundaries(sentences.size(), bounds));
}

/// Positions i where the model puts sentences i and i+1 in different chunks.
/// `max_sentences` > 0 also forces a boundary once a chunk reaches that length.
inline std::vector<std::size_t> model_boundaries(const std::vector<embedding::Embedding>& vectors,
                                                 const boundary::BoundaryModel& model,
                                                 double threshold = boundary::kDefaultThreshold,
                                                 std::size_t max_sentences = 0) {
  std::vector<std::size_t> out;
  std::size_t run = 1;
  for (std::size_t i = 0; i + 1 < vectors.size(); ++i) {
    const auto p = boundary::score(model, vectors[i], vectors[i + 1], threshold);
    if (!p.same_section || (max_sentences > 0 && run >= max_sentences)) {
      out.push_back(i);
      run = 1;
    } else {
      ++run;
    }
  }
  return out;
}

inline std::vector<Chunk> chunk_model(const Document& doc, const boundary::BoundaryModel& model,
                                      const embedding::EmbeddingProvider& provider,
                                      double threshold = boundary::kDefaultThreshold, std::size_t max_sentences = 0) {
  if (model.d != provider.dimension()) throw DimensionError(model.d, provider.dimension());
  const auto sentences = doc.flat_sentences();
  const auto bounds = model_boundaries(embed_all(sentences, provider), model, threshold, max_sentences);
  return sentence_chunks(doc.id, sentences, spans_from_boundaries(sentences.size(), bounds));
}

/// Runtime dependencies of the embedding-driven chunkers.
struct ChunkContext {
  const embedding::EmbeddingProvider* provider = nullptr;
  const boundary::BoundaryModel* model = nullptr;
};

inline std::vector<Chunk> chunk_document(const Document& doc, const ChunkerConfig& cfg, const ChunkContext& ctx = {}) {
  switch (cfg.kind) {
    case Kind::fixed: return chunk_fixed(doc, cfg.size, cfg.overlap, cfg.unit);
    case Kind::sentence: return chunk_sentences(doc, cfg.window, cfg.window_overlap);
    case Kind::recursive: return chunk_recursive(doc, cfg.size, cfg.overlap, cfg.unit);
    case Kind::cosine_semantic:
      if (!ctx.provider) throw ConfigError("cosine chunker needs an embedding provider");
      return chunk_cosine(doc, *ctx.provider, cfg.percentile);
    case Kind::model:
      if (!ctx.provider || !ctx.model) throw ConfigError("model chunker needs a provider and a model");
      return chunk_model(doc, *ctx.model, *ctx.provider, cfg.threshold, cfg.max_sentences);
  }
  return {};
}

/// Mean whitespace-token length of the chunks.
inline double mean_token_length(const std::vector<Chunk>& chunks) {
  if (chunks.empty()) return 0.0;
  double total = 0.0;
  for (const auto& c : chunks) total += static_cast<double>(text::whitespace_tokens(c.text).size());
  return total / static_cast<double>(chunks.size());
}

inline nlohmann::ordered_json to_json(const Chunk& c) {
  nlohmann::ordered_json j;
  j["doc_id"] = c.doc_id;
  j["index"] = c.index;
  j["span"] = {c.span.begin, c.span.end};
  j["unit"] = to_string(c.unit);
  j["text"] = c.text;
  return j;
}

inline std::string serialize_chunks(const std::vector<Chunk>& chunks) {
  std::string out;
  for (const auto& c : chunks) {
    out += to_json(c).dump();
    out += '\n';
  }
  return out;
}

inline void save_chunks(const std::vector<Chunk>& chunks, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_chunks(chunks));
}

inline std::vector<Chunk> load_chunks(const std::filesystem::path& path) {
  std::vector<Chunk> out;
  io::for_each_line(io::read_file(path), [&](std::string_view line, std::size_t n) {
    const std::string where = "chunk record " + std::to_string(out.size()) + " (line " + std::to_string(n) + ")";
    const auto j = corpus::detail::parse_line(line, where);
    Chunk c;
    c.doc_id = corpus::detail::string_field(j, "doc_id", where);
    const auto& index = corpus::detail::field(j, "index", where);
    if (!index.is_number_unsigned()) throw ValidationError(where + ": field 'index' must be a non-negative integer");
    c.index = index.get<std::size_t>();
    const auto& span = corpus::detail::field(j, "span", where);
    if (!span.is_array() || span.size() != 2 || !span[0].is_number_unsigned() || !span[1].is_number_unsigned() ||
        span[0].get<std::size_t>() >= span[1].get<std::size_t>())
      throw ValidationError(where + ": field 'span' must be [start, end) with start < end");
    c.span = {span[0].get<std::size_t>(), span[1].get<std::size_t>()};
    try {
      c.unit = parse_unit(corpus::detail::string_field(j, "unit", where));
    } catch (const ConfigError&) {
      throw ValidationError(where + ": field 'unit' must be sentence, token or char");
    }
    c.text = corpus::detail::string_field(j, "text", where);
    out.push_back(std::move(c));
  });
  return out;
}

}  // namespace segrag::chunkers
