#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "document.hpp"
#include "error.hpp"
#include "io.hpp"
#include "stats.hpp"
#include "text.hpp"

namespace segrag::metrics {

using Tokens = std::vector<std::string>;

/// Metric tokenization: ASCII case-fold, split on non-alphanumeric runs.
inline Tokens tokenize(std::string_view s) { return text::word_tokens(s); }

namespace detail {

inline std::map<std::vector<std::string_view>, long> ngram_counts(const Tokens& toks, std::size_t n) {
  std::map<std::vector<std::string_view>, long> out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::vector<std::string_view> g(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                    toks.begin() + static_cast<std::ptrdiff_t>(i + n));
    ++out[std::move(g)];
  }
  return out;
}

}  // namespace detail

struct NgramPrecision {
  long clipped = 0;  // candidate n-grams matched, clipped by the max reference count
  long total = 0;    // candidate n-grams
};

/// Modified n-gram precision counts of `candidate` against `references`.
inline NgramPrecision ngram_precision(const Tokens& candidate, const std::vector<Tokens>& references, std::size_t n) {
  const auto cand = detail::ngram_counts(candidate, n);
  std::map<std::vector<std::string_view>, long> max_ref;
  for (const auto& ref : references)
    for (const auto& [g, c] : detail::ngram_counts(ref, n)) max_ref[g] = std::max(max_ref[g], c);
  NgramPrecision p;
  for (const auto& [g, c] : cand) {
    p.total += c;
    if (auto it = max_ref.find(g); it != max_ref.end()) p.clipped += std::min(c, it->second);
  }
  return p;
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions for n = 1..max_n
/// times the brevity penalty exp(1 - r/c) (c < r), r being the closest
/// reference length (shorter on ties). Orders above 1 with no clipped match
/// use add-one smoothing. An empty candidate scores 0.
inline double bleu(const Tokens& candidate, const std::vector<Tokens>& references, std::size_t max_n = 4) {
  if (candidate.empty() || references.empty() || max_n == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto [clipped, total] = ngram_precision(candidate, references, n);
    double p;
    if (clipped > 0) {
      p = static_cast<double>(clipped) / static_cast<double>(total);
    } else if (n == 1) {
      return 0.0;
    } else {
      p = 1.0 / static_cast<double>(total + 1);
    }
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(candidate.size());
  double r = static_cast<double>(references.front().size());
  for (const auto& ref : references) {
    const double len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline PRF make_prf(double overlap, double cand_total, double ref_total) {
  PRF r;
  r.precision = cand_total > 0 ? overlap / cand_total : 0.0;
  r.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

inline PRF rouge_n(const Tokens& candidate, const Tokens& reference, std::size_t n) {
  if (n == 0) throw ConfigError("rouge_n needs n >= 1");
  const auto cand = detail::ngram_counts(candidate, n);
  const auto ref = detail::ngram_counts(reference, n);
  long overlap = 0, cand_total = 0, ref_total = 0;
  for (const auto& [g, c] : cand) {
    cand_total += c;
    if (auto it = ref.find(g); it != ref.end()) overlap += std::min(c, it->second);
  }
  for (const auto& [g, c] : ref) ref_total += c;
  return make_prf(static_cast<double>(overlap), static_cast<double>(cand_total), static_cast<double>(ref_total));
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline PRF rouge_l(const Tokens& candidate, const Tokens& reference) {
  return make_prf(static_cast<double>(lcs_length(candidate, reference)), static_cast<double>(candidate.size()),
                  static_cast<double>(reference.size()));
}

// ---------------------------------------------------------------------------
// Welch's t-test

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0) || !(x >= 0.0 && x <= 1.0)) throw DataError("incomplete_beta: argument out of range");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

/// Two-tailed p-value of Student's t with `df` degrees of freedom.
inline double t_two_tailed_p(double t, double df) {
  if (std::isinf(t)) return 0.0;
  return std::clamp(incomplete_beta(df / 2.0, 0.5, df / (df + t * t)), 0.0, 1.0);
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

/// Two-tailed independent-samples t-test with unequal variances (Welch) and
/// Welch-Satterthwaite degrees of freedom.
inline TTestResult ttest_independent(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2)
    throw DataError("t-test needs at least 2 observations per sample, got " + std::to_string(a.size()) + " and " +
                    std::to_string(b.size()));
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = stats::sample_variance(a) / na, vb = stats::sample_variance(b) / nb;
  const double diff = stats::mean(a) - stats::mean(b);
  TTestResult r;
  if (va + vb == 0.0) {
    r.df = na + nb - 2.0;
    if (diff == 0.0) return {0.0, 1.0, r.df};
    return {diff > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity(), 0.0, r.df};
  }
  r.t = diff / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p = t_two_tailed_p(r.t, r.df);
  return r;
}

// ---------------------------------------------------------------------------
// Answer scoring

struct MetricRow {
  std::string qid;
  double bleu = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
};

struct Aggregate {
  double bleu = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
};

struct AnswerReport {
  std::vector<MetricRow> rows;
  Aggregate aggregate;
  std::vector<std::string> missing_answers;     // qids in the QA file without an answer
  std::vector<std::string> unknown_answers;     // answered qids absent from the QA file
};

inline MetricRow score_answer(std::string qid, std::string_view answer, std::string_view reference) {
  const auto cand = tokenize(answer);
  const auto ref = tokenize(reference);
  return {std::move(qid), bleu(cand, {ref}), rouge_n(cand, ref, 1).f1, rouge_n(cand, ref, 2).f1, rouge_l(cand, ref).f1};
}

/// One row per qid present in both inputs, in QA-file order.
inline AnswerReport score_answers(const std::vector<std::pair<std::string, std::string>>& answers,
                                  const std::vector<QARecord>& references) {
  std::unordered_map<std::string, const std::string*> by_qid;
  for (const auto& [qid, a] : answers) by_qid.try_emplace(qid, &a);
  std::set<std::string> known;
  AnswerReport rep;
  for (const auto& ref : references) {
    known.insert(ref.pubid);
    auto it = by_qid.find(ref.pubid);
    if (it == by_qid.end()) {
      rep.missing_answers.push_back(ref.pubid);
      continue;
    }
    rep.rows.push_back(score_answer(ref.pubid, *it->second, ref.long_answer));
  }
  for (const auto& [qid, a] : answers)
    if (!known.count(qid)) rep.unknown_answers.push_back(qid);
  if (rep.rows.empty())
    throw DataError("no qid shared between answers (" + std::to_string(by_qid.size()) + " ids) and references (" +
                    std::to_string(references.size()) + " ids)");
  const double n = static_cast<double>(rep.rows.size());
  for (const auto& r : rep.rows) {
    rep.aggregate.bleu += r.bleu / n;
    rep.aggregate.rouge1 += r.rouge1 / n;
    rep.aggregate.rouge2 += r.rouge2 / n;
    rep.aggregate.rougeL += r.rougeL / n;
  }
  return rep;
}

inline std::vector<std::pair<std::string, std::string>> load_answers(const std::filesystem::path& path) {
  std::vector<std::pair<std::string, std::string>> out;
  io::for_each_line(io::read_file(path), [&](std::string_view line, std::size_t n) {
    const std::string where = "answer record " + std::to_string(out.size()) + " (line " + std::to_string(n) + ")";
    const auto j = corpus::detail::parse_line(line, where);
    out.emplace_back(corpus::detail::string_field(j, "qid", where), corpus::detail::string_field(j, "answer", where));
  });
  return out;
}

inline nlohmann::ordered_json to_json(const MetricRow& r) {
  nlohmann::ordered_json j;
  j["qid"] = r.qid;
  j["bleu"] = r.bleu;
  j["rouge1"] = r.rouge1;
  j["rouge2"] = r.rouge2;
  j["rougeL"] = r.rougeL;
  return j;
}

inline nlohmann::ordered_json to_json(const AnswerReport& rep) {
  nlohmann::ordered_json j;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : rep.rows) rows.push_back(to_json(r));
  j["per_query"] = std::move(rows);
  nlohmann::ordered_json agg;
  agg["bleu"] = rep.aggregate.bleu;
  agg["rouge1"] = rep.aggregate.rouge1;
  agg["rouge2"] = rep.aggregate.rouge2;
  agg["rougeL"] = rep.aggregate.rougeL;
  j["aggregate"] = std::move(agg);
  j["missing_answers"] = rep.missing_answers;
  j["unknown_answers"] = rep.unknown_answers;
  return j;
}

}  // namespace segrag::metrics
