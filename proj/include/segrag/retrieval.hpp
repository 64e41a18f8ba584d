#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "chunkers.hpp"
#include "document.hpp"
#include "embedding.hpp"
#include "error.hpp"
#include "stats.hpp"
#include "text.hpp"

namespace segrag::retrieval {

struct ChunkRef {
  std::string doc_id;
  std::size_t index = 0;
  friend bool operator==(const ChunkRef&, const ChunkRef&) = default;
};

/// Exact (brute-force) cosine index over chunk embeddings.
class ChunkIndex {
 public:
  struct Entry {
    ChunkRef ref;
    std::string text;
    embedding::Embedding vector;
    double norm = 0.0;
  };

  explicit ChunkIndex(std::size_t d) : d_(d) {}

  void add(ChunkRef ref, std::string text, embedding::Embedding v) {
    if (v.size() != d_) throw DimensionError(d_, v.size());
    const double n = embedding::norm(v.span());
    entries_.push_back({std::move(ref), std::move(text), std::move(v), n});
  }

  std::size_t dimension() const noexcept { return d_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

 private:
  std::size_t d_;
  std::vector<Entry> entries_;
};

inline ChunkIndex build_index(const std::vector<chunkers::Chunk>& chunks, const embedding::EmbeddingProvider& provider) {
  ChunkIndex index(provider.dimension());
  for (const auto& c : chunks) {
    embedding::Embedding v;
    try {
      v = provider.embed(c.text);
    } catch (const embedding::MissingEmbeddingError& e) {
      throw DataError("no embedding for chunk " + c.doc_id + "#" + std::to_string(c.index) + " (text hash " +
                      e.key().hex() + ")");
    }
    index.add({c.doc_id, c.index}, c.text, std::move(v));
  }
  return index;
}

struct Hit {
  std::size_t entry = 0;  // position in the index
  double score = 0.0;
};

/// Top-k entries by cosine similarity to `q`, ties broken by lower entry
/// position. `keep` restricts the candidate set when given.
inline std::vector<Hit> rank(const ChunkIndex& index, std::span<const float> q, std::size_t k,
                             const std::function<bool(const ChunkIndex::Entry&)>& keep = {}) {
  if (k == 0) throw ConfigError("k must be >= 1");
  if (q.size() != index.dimension()) throw DimensionError(index.dimension(), q.size());
  const double qn = embedding::norm(q);
  std::vector<Hit> hits;
  hits.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& e = index[i];
    if (keep && !keep(e)) continue;
    const double s = (qn == 0.0 || e.norm == 0.0) ? 0.0 : embedding::dot(q, e.vector.span()) / (qn * e.norm);
    hits.push_back({i, s});
  }
  const auto better = [](const Hit& a, const Hit& b) { return a.score > b.score || (a.score == b.score && a.entry < b.entry); };
  const std::size_t top = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(top), hits.end(), better);
  hits.resize(top);
  return hits;
}

struct RetrievalResult {
  std::string qid;
  std::vector<Hit> ranked;
  std::optional<std::size_t> first_relevant_rank;  // 1-based
  double query_time_s = 0.0;
};

/// Embeds the question and ranks the index; query_time_s covers both steps.
inline RetrievalResult query(const ChunkIndex& index, std::string_view question,
                             const embedding::EmbeddingProvider& provider, std::size_t k,
                             const std::function<bool(const ChunkIndex::Entry&)>& keep = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto q = provider.embed(question);
  RetrievalResult r;
  r.ranked = rank(index, q.span(), k, keep);
  r.query_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Relevance

struct RelevanceConfig {
  bool substring = true;
  bool overlap = true;
  double min_overlap_f1 = 0.8;
};

/// Case-fold, collapse whitespace, strip trailing punctuation.
inline std::string normalize_for_match(std::string_view s) {
  std::string out = text::to_lower(text::collapse_whitespace(s));
  while (!out.empty() && std::string_view(".!?;:,").find(out.back()) != std::string_view::npos) {
    out.pop_back();
    while (!out.empty() && out.back() == ' ') out.pop_back();
  }
  return out;
}

/// Highest token-overlap F1 between `gold` and any window of the chunk with
/// the same token count. 0 when the chunk is shorter than the gold sentence.
inline double best_window_f1(const std::vector<std::string>& chunk, const std::vector<std::string>& gold) {
  const std::size_t m = gold.size();
  if (m == 0 || chunk.size() < m) return 0.0;
  std::unordered_map<std::string_view, long> need, have;
  for (const auto& t : gold) ++need[t];
  long overlap = 0, best = 0;
  auto add = [&](std::string_view t) {
    auto it = need.find(t);
    if (it == need.end()) return;
    if (have[t]++ < it->second) ++overlap;
  };
  auto remove = [&](std::string_view t) {
    auto it = need.find(t);
    if (it == need.end()) return;
    if (--have[t] < it->second) --overlap;
  };
  for (std::size_t i = 0; i < chunk.size(); ++i) {
    add(chunk[i]);
    if (i >= m) remove(chunk[i - m]);
    if (i + 1 >= m) best = std::max(best, overlap);
  }
  return static_cast<double>(best) / static_cast<double>(m);
}

inline bool judge_relevant(std::string_view chunk_text, const std::vector<std::string>& gold_context,
                           const RelevanceConfig& cfg = {}) {
  const std::string chunk_norm = text::to_lower(text::collapse_whitespace(chunk_text));
  std::optional<std::vector<std::string>> chunk_tokens;
  for (const auto& g : gold_context) {
    const std::string gold_norm = normalize_for_match(g);
    if (gold_norm.empty()) continue;
    if (cfg.substring && chunk_norm.find(gold_norm) != std::string::npos) return true;
    if (cfg.overlap) {
      if (!chunk_tokens) chunk_tokens = text::word_tokens(chunk_text);
      if (best_window_f1(*chunk_tokens, text::word_tokens(g)) >= cfg.min_overlap_f1) return true;
    }
  }
  return false;
}

/// 1-based rank of the first relevant hit.
inline std::optional<std::size_t> first_relevant(const ChunkIndex& index, const std::vector<Hit>& ranked,
                                                 const std::vector<std::string>& gold, const RelevanceConfig& cfg = {}) {
  for (std::size_t r = 0; r < ranked.size(); ++r)
    if (judge_relevant(index[ranked[r].entry].text, gold, cfg)) return r + 1;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Summary {
  std::size_t num_queries = 0;
  std::map<std::size_t, double> hits;  // k -> Hits@k
  double mrr = 0.0;
  double mean_query_time_s = 0.0;
  double median_query_time_s = 0.0;
  double p95_query_time_s = 0.0;
};

/// MRR uses 0 for queries with no relevant hit; Hits@k counts first relevant
/// rank <= k.
inline Summary evaluate(const std::vector<std::optional<std::size_t>>& first_ranks, const std::vector<double>& times,
                        const std::vector<std::size_t>& ks = {3, 5}) {
  Summary s;
  s.num_queries = first_ranks.size();
  for (auto k : ks) s.hits[k] = 0.0;
  if (first_ranks.empty()) return s;
  const double n = static_cast<double>(first_ranks.size());
  for (const auto& r : first_ranks) {
    if (!r) continue;
    s.mrr += 1.0 / static_cast<double>(*r);
    for (auto k : ks)
      if (*r <= k) s.hits[k] += 1.0;
  }
  s.mrr /= n;
  for (auto& [k, v] : s.hits) v /= n;
  if (!times.empty()) {
    s.mean_query_time_s = stats::mean(times);
    s.median_query_time_s = stats::percentile(times, 50.0);
    s.p95_query_time_s = stats::percentile(times, 95.0);
  }
  return s;
}

inline Summary evaluate(const std::vector<RetrievalResult>& results, const std::vector<std::size_t>& ks = {3, 5}) {
  std::vector<std::optional<std::size_t>> ranks;
  std::vector<double> times;
  for (const auto& r : results) {
    ranks.push_back(r.first_relevant_rank);
    times.push_back(r.query_time_s);
  }
  return evaluate(ranks, times, ks);
}

enum class Scope { corpus, document };

inline Scope parse_scope(std::string_view s) {
  if (s == "corpus") return Scope::corpus;
  if (s == "document") return Scope::document;
  throw ConfigError("unknown scope '" + std::string(s) + "', expected corpus or document");
}

struct RunConfig {
  std::size_t k = 5;
  Scope scope = Scope::corpus;
  RelevanceConfig relevance;
};

/// One query per QA record (qid = pubid). With Scope::document only chunks of
/// the record's own document are candidates.
inline std::vector<RetrievalResult> run_queries(const ChunkIndex& index, const std::vector<QARecord>& qa,
                                                const embedding::EmbeddingProvider& provider, const RunConfig& cfg) {
  std::vector<RetrievalResult> out;
  out.reserve(qa.size());
  for (const auto& rec : qa) {
    std::function<bool(const ChunkIndex::Entry&)> keep;
    if (cfg.scope == Scope::document) keep = [&](const ChunkIndex::Entry& e) { return e.ref.doc_id == rec.pubid; };
    auto r = query(index, rec.question, provider, cfg.k, keep);
    r.qid = rec.pubid;
    r.first_relevant_rank = first_relevant(index, r.ranked, rec.gold_context, cfg.relevance);
    out.push_back(std::move(r));
  }
  return out;
}

inline nlohmann::ordered_json to_json(const ChunkIndex& index, const RetrievalResult& r, bool timing = true) {
  nlohmann::ordered_json j;
  j["qid"] = r.qid;
  auto ranks = nlohmann::ordered_json::array();
  for (const auto& h : r.ranked) {
    nlohmann::ordered_json e;
    e["doc_id"] = index[h.entry].ref.doc_id;
    e["index"] = index[h.entry].ref.index;
    e["score"] = h.score;
    ranks.push_back(std::move(e));
  }
  j["ranks"] = std::move(ranks);
  j["first_relevant_rank"] = r.first_relevant_rank ? nlohmann::ordered_json(*r.first_relevant_rank) : nlohmann::ordered_json(nullptr);
  if (timing) j["query_time_s"] = r.query_time_s;
  return j;
}

/// Frozen key names: num_queries, hits_at_<k>..., mrr, then timing keys.
inline nlohmann::ordered_json to_json(const Summary& s, bool timing = true) {
  nlohmann::ordered_json j;
  j["num_queries"] = s.num_queries;
  for (const auto& [k, v] : s.hits) j["hits_at_" + std::to_string(k)] = v;
  j["mrr"] = s.mrr;
  if (timing) {
    j["mean_query_time_s"] = s.mean_query_time_s;
    j["median_query_time_s"] = s.median_query_time_s;
    j["p95_query_time_s"] = s.p95_query_time_s;
  }
  return j;
}

}  // namespace segrag::retrieval
