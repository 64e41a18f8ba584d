#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "text.hpp"

namespace segrag::segmenter {

struct SentenceSpan {
  std::size_t start = 0;  // byte offset
  std::size_t end = 0;    // byte offset, exclusive
  std::string text;

  friend bool operator==(const SentenceSpan&, const SentenceSpan&) = default;
};

inline constexpr std::size_t kMinSentenceLength = 2;

namespace detail {

// Words that end in '.' without ending a sentence. "al" only counts after "et".
inline constexpr std::array<std::string_view, 22> kAbbreviations = {
    "Dr", "Mr", "Mrs", "Ms", "Prof", "Fig", "Figs", "fig", "figs", "No", "Nos", "vs",
    "e.g", "i.e", "cf", "approx", "Eq", "Eqs", "Ref", "Refs", "St", "ca"};

inline bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }
inline bool is_opener(char c) { return c == '"' || c == '\'' || c == '(' || c == '['; }
inline bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

inline std::string_view word_before(std::string_view s, std::size_t floor, std::size_t pos) {
  std::size_t b = pos;
  while (b > floor && !text::is_space(s[b - 1])) --b;
  std::string_view w = s.substr(b, pos - b);
  while (!w.empty() && is_opener(w.front())) w.remove_prefix(1);
  return w;
}

inline bool is_abbreviation(std::string_view s, std::size_t sentence_start, std::size_t dot) {
  const std::string_view w = word_before(s, sentence_start, dot);
  if (w.empty()) return false;
  if (w == "al") {
    std::size_t b = dot - w.size();
    while (b > sentence_start && text::is_space(s[b - 1])) --b;
    return word_before(s, sentence_start, b) == "et";
  }
  return std::find(kAbbreviations.begin(), kAbbreviations.end(), w) != kAbbreviations.end();
}

// Next sentence must open with an uppercase letter or digit, optionally
// preceded by one opening quote or bracket.
inline bool starts_sentence(std::string_view s, std::size_t k) {
  if (k < s.size() && is_opener(s[k])) ++k;
  return k < s.size() && (text::is_upper(s[k]) || text::is_digit(s[k]));
}

}  // namespace detail

/// Rule-based sentence splitter for scientific prose. A sentence ends at '.',
/// '!' or '?' (plus trailing quotes/brackets) when followed by whitespace and
/// an uppercase letter or digit, outside parentheses/brackets, and not after a
/// listed abbreviation. Fragments shorter than kMinSentenceLength merge into
/// the previous sentence.
inline std::vector<SentenceSpan> split_sentences(std::string_view paragraph) {
  const std::string_view s = paragraph;
  const std::size_t n = s.size();
  std::vector<std::pair<std::size_t, std::size_t>> raw;

  std::size_t i = 0;
  while (i < n && text::is_space(s[i])) ++i;
  std::size_t start = i;
  int depth = 0;
  while (i < n) {
    const char c = s[i];
    if (c == '(' || c == '[') {
      ++depth;
    } else if (c == ')' || c == ']') {
      depth = std::max(0, depth - 1);
    } else if (depth == 0 && detail::is_terminator(c) &&
               !(c == '.' && detail::is_abbreviation(s, start, i))) {
      std::size_t j = i + 1;
      while (j < n && (detail::is_terminator(s[j]) || detail::is_closer(s[j]))) ++j;
      if (j < n && text::is_space(s[j])) {
        std::size_t k = j;
        while (k < n && text::is_space(s[k])) ++k;
        if (detail::starts_sentence(s, k)) {
          raw.emplace_back(start, j);
          start = k;
          i = k;
          continue;
        }
      }
      i = j;
      continue;
    }
    ++i;
  }
  if (start < n) {
    std::size_t end = n;
    while (end > start && text::is_space(s[end - 1])) --end;
    if (end > start) raw.emplace_back(start, end);
  }

  std::vector<SentenceSpan> out;
  std::size_t pending = std::string_view::npos;
  for (auto [b, e] : raw) {
    if (pending != std::string_view::npos) {
      b = pending;
      pending = std::string_view::npos;
    }
    if (e - b < kMinSentenceLength) {
      if (!out.empty()) {
        out.back().end = e;
        out.back().text = std::string(s.substr(out.back().start, e - out.back().start));
      } else {
        pending = b;
      }
      continue;
    }
    out.push_back({b, e, std::string(s.substr(b, e - b))});
  }
  if (pending != std::string_view::npos) {
    const std::size_t e = raw.back().second;
    out.push_back({pending, e, std::string(s.substr(pending, e - pending))});
  }
  return out;
}

inline std::vector<std::string> sentence_texts(std::string_view paragraph) {
  std::vector<std::string> out;
  for (auto& span : split_sentences(paragraph)) out.push_back(std::move(span.text));
  return out;
}

}  // namespace segrag::segmenter
