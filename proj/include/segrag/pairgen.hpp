#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "document.hpp"
#include "error.hpp"
#include "hash.hpp"
#include "io.hpp"

namespace segrag::pairgen {

/// Label 1: adjacent sentences of one section. Label 0: sentences from
/// different sections that never share a section anywhere in the document.
struct SentencePair {
  std::string doc_id;
  std::string a;
  std::string b;
  int label = 0;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

class InsufficientSectionsError : public DataError {
 public:
  using DataError::DataError;
};

inline std::vector<SentencePair> positive_pairs(const Document& doc) {
  std::vector<SentencePair> out;
  for (const auto& sec : doc.sections)
    for (std::size_t i = 0; i + 1 < sec.sentences.size(); ++i)
      out.push_back({doc.id, sec.sentences[i], sec.sentences[i + 1], 1});
  return out;
}

/// Unordered cross-section sentence pairs whose texts never co-occur in a
/// section, one per distinct text pair, in document order (a precedes b).
inline std::vector<std::pair<std::size_t, std::size_t>> negative_candidates(const Document& doc,
                                                                            std::vector<std::string>* flat = nullptr) {
  std::vector<std::string> sentences;
  std::vector<std::size_t> section_of;
  for (std::size_t s = 0; s < doc.sections.size(); ++s)
    for (const auto& sent : doc.sections[s].sentences) {
      sentences.push_back(sent);
      section_of.push_back(s);
    }

  std::map<std::string, std::set<std::size_t>> sections_with;
  for (std::size_t p = 0; p < sentences.size(); ++p) sections_with[sentences[p]].insert(section_of[p]);
  auto co_occur = [&](const std::string& x, const std::string& y) {
    const auto& sx = sections_with.at(x);
    const auto& sy = sections_with.at(y);
    for (auto s : sx)
      if (sy.count(s)) return true;
    return false;
  };

  std::vector<std::pair<std::size_t, std::size_t>> pool;
  std::set<std::pair<std::string_view, std::string_view>> seen;
  for (std::size_t p = 0; p < sentences.size(); ++p)
    for (std::size_t q = p + 1; q < sentences.size(); ++q) {
      if (section_of[p] == section_of[q] || co_occur(sentences[p], sentences[q])) continue;
      std::string_view x = sentences[p], y = sentences[q];
      if (y < x) std::swap(x, y);
      if (seen.emplace(x, y).second) pool.emplace_back(p, q);
    }
  if (flat) *flat = std::move(sentences);
  return pool;
}

/// Uniform draws from the candidate pool, without replacement until the pool
/// is exhausted and with replacement afterwards.
inline std::vector<SentencePair> negative_pairs(const Document& doc, std::size_t count, std::uint64_t seed) {
  if (doc.sections.size() < 2)
    throw InsufficientSectionsError("document '" + doc.id + "' has " + std::to_string(doc.sections.size()) +
                                    " section(s); negative pairs need at least 2");
  std::vector<std::string> flat;
  const auto pool = negative_candidates(doc, &flat);
  if (count == 0) return {};
  if (pool.empty()) throw InsufficientSectionsError("document '" + doc.id + "' has no cross-section candidate pairs");

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t distinct = std::min(count, pool.size());
  for (std::size_t i = 0; i < distinct; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<SentencePair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < distinct; ++i) {
    const auto [p, q] = pool[order[i]];
    out.push_back({doc.id, flat[p], flat[q], 0});
  }
  std::uniform_int_distribution<std::size_t> any(0, pool.size() - 1);
  while (out.size() < count) {
    const auto [p, q] = pool[any(rng)];
    out.push_back({doc.id, flat[p], flat[q], 0});
  }
  return out;
}

struct Dataset {
  std::vector<SentencePair> pairs;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::vector<std::string> warnings;

  double positive_fraction() const {
    return pairs.empty() ? 0.0 : static_cast<double>(positives) / static_cast<double>(pairs.size());
  }
};

/// Positives of every document plus round(neg_ratio * positives) negatives per
/// document that can supply them, shuffled by `seed`.
inline Dataset build_dataset(const std::vector<Document>& docs, std::uint64_t seed, double neg_ratio = 1.0) {
  if (docs.empty()) throw DataError("build_dataset: empty document list");
  if (!(neg_ratio >= 0.0) || !std::isfinite(neg_ratio)) throw ConfigError("neg-ratio must be finite and >= 0");
  Dataset ds;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    auto pos = positive_pairs(docs[i]);
    const auto want = static_cast<std::size_t>(std::llround(neg_ratio * static_cast<double>(pos.size())));
    std::vector<SentencePair> neg;
    if (want > 0) {
      try {
        neg = negative_pairs(docs[i], want, hash::derive_seed(seed, i));
      } catch (const InsufficientSectionsError&) {
        ++skipped;
      }
    }
    ds.positives += pos.size();
    ds.negatives += neg.size();
    ds.pairs.insert(ds.pairs.end(), std::make_move_iterator(pos.begin()), std::make_move_iterator(pos.end()));
    ds.pairs.insert(ds.pairs.end(), std::make_move_iterator(neg.begin()), std::make_move_iterator(neg.end()));
  }
  if (ds.pairs.empty()) throw DataError("build_dataset: corpus produced zero sentence pairs");
  if (skipped > 0)
    ds.warnings.push_back(std::to_string(skipped) + " of " + std::to_string(docs.size()) +
                          " document(s) could not supply negative pairs");
  std::mt19937_64 rng(seed);
  std::shuffle(ds.pairs.begin(), ds.pairs.end(), rng);
  return ds;
}

inline std::string serialize_pairs(const std::vector<SentencePair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["doc_id"] = p.doc_id;
    j["a"] = p.a;
    j["b"] = p.b;
    j["label"] = p.label;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void save_pairs(const std::vector<SentencePair>& pairs, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_pairs(pairs));
}

inline std::vector<SentencePair> load_pairs(const std::filesystem::path& path) {
  std::vector<SentencePair> out;
  io::for_each_line(io::read_file(path), [&](std::string_view line, std::size_t n) {
    const std::string where = "pair record " + std::to_string(out.size()) + " (line " + std::to_string(n) + ")";
    const auto j = corpus::detail::parse_line(line, where);
    SentencePair p;
    p.doc_id = corpus::detail::string_field(j, "doc_id", where);
    p.a = corpus::detail::string_field(j, "a", where);
    p.b = corpus::detail::string_field(j, "b", where);
    const auto& label = corpus::detail::field(j, "label", where);
    if (!label.is_number_integer() || (label.get<int>() != 0 && label.get<int>() != 1))
      throw ValidationError(where + ": field 'label' must be 0 or 1");
    p.label = label.get<int>();
    out.push_back(std::move(p));
  });
  return out;
}

}  // namespace segrag::pairgen
