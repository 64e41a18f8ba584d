#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "embedding.hpp"
#include "error.hpp"
#include "hash.hpp"
#include "io.hpp"
#include "pairgen.hpp"

namespace segrag::boundary {

/// PSC scores the dot product of the projected pair. MFC feeds
/// [dot, euclidean, manhattan] of the projected pair through a 3->1 layer.
enum class Variant : std::uint8_t { psc = 0, mfc = 1 };

inline std::string_view to_string(Variant v) { return v == Variant::psc ? "psc" : "mfc"; }

inline Variant parse_variant(std::string_view s) {
  if (s == "psc" || s == "PSC") return Variant::psc;
  if (s == "mfc" || s == "MFC") return Variant::mfc;
  throw ConfigError("unknown variant '" + std::string(s) + "', expected psc or mfc");
}

/// Shared projection u = W e + c applied to both sentences. Fusion parameters
/// are zero and unused for PSC.
template <std::floating_point T>
struct BasicBoundaryModel {
  Variant variant = Variant::psc;
  std::size_t d = 0;
  std::vector<T> W;  // row-major d x d
  std::vector<T> c;
  std::array<T, 3> fusion_w{};
  T fusion_b{};

  template <std::floating_point U>
  BasicBoundaryModel<U> cast() const {
    BasicBoundaryModel<U> m;
    m.variant = variant;
    m.d = d;
    m.W.assign(W.begin(), W.end());
    m.c.assign(c.begin(), c.end());
    for (std::size_t k = 0; k < 3; ++k) m.fusion_w[k] = static_cast<U>(fusion_w[k]);
    m.fusion_b = static_cast<U>(fusion_b);
    return m;
  }

  bool finite() const {
    auto ok = [](T x) { return std::isfinite(x); };
    return std::all_of(W.begin(), W.end(), ok) && std::all_of(c.begin(), c.end(), ok) &&
           std::all_of(fusion_w.begin(), fusion_w.end(), ok) && ok(fusion_b);
  }

  friend bool operator==(const BasicBoundaryModel&, const BasicBoundaryModel&) = default;
};

using BoundaryModel = BasicBoundaryModel<float>;

/// W = I + N(0, (0.01/sqrt(d))^2), c = 0, fusion weights 1/3 each, bias 0.
inline BoundaryModel initial_model(Variant variant, std::size_t d, std::uint64_t seed) {
  if (d == 0) throw ConfigError("model dimension must be positive");
  BoundaryModel m;
  m.variant = variant;
  m.d = d;
  m.W.assign(d * d, 0.0f);
  m.c.assign(d, 0.0f);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.01 / std::sqrt(static_cast<double>(d)));
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t k = 0; k < d; ++k) m.W[r * d + k] = static_cast<float>((r == k ? 1.0 : 0.0) + noise(rng));
  if (variant == Variant::mfc) {
    m.fusion_w = {1.0f / 3.0f, 1.0f / 3.0f, 1.0f / 3.0f};
    m.fusion_b = 0.0f;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Scoring

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Prediction {
  double raw = 0.0;
  double probability = 0.5;
  bool same_section = true;
};

inline constexpr double kDefaultThreshold = 0.5;

/// Probability/decision pair that stays consistent at the rounding edges:
/// same_section <=> raw >= logit(threshold) <=> probability >= threshold.
inline Prediction make_prediction(double raw, double threshold = kDefaultThreshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0,1)");
  const double cut = std::log(threshold / (1.0 - threshold));
  Prediction p;
  p.raw = raw;
  p.same_section = raw >= cut;
  p.probability = std::clamp(sigmoid(raw), std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0));
  if (p.same_section && p.probability < threshold) p.probability = threshold;
  if (!p.same_section && p.probability >= threshold) p.probability = std::nextafter(threshold, 0.0);
  return p;
}

/// Intermediate values of one forward pass, kept for backprop.
struct Forward {
  std::vector<double> u, v;
  std::array<double, 3> features{};  // dot, euclidean, manhattan
  double raw = 0.0;
};

template <std::floating_point T>
Forward forward(const BasicBoundaryModel<T>& m, std::span<const float> a, std::span<const float> b) {
  if (a.size() != m.d) throw DimensionError(m.d, a.size());
  if (b.size() != m.d) throw DimensionError(m.d, b.size());
  const std::size_t d = m.d;
  Forward f;
  f.u.assign(d, 0.0);
  f.v.assign(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    const T* row = m.W.data() + r * d;
    double su = 0.0, sv = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      su += static_cast<double>(row[k]) * a[k];
      sv += static_cast<double>(row[k]) * b[k];
    }
    f.u[r] = su + static_cast<double>(m.c[r]);
    f.v[r] = sv + static_cast<double>(m.c[r]);
  }
  double dotp = 0.0, l2 = 0.0, l1 = 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    dotp += f.u[r] * f.v[r];
    const double delta = f.u[r] - f.v[r];
    l2 += delta * delta;
    l1 += std::abs(delta);
  }
  f.features = {dotp, std::sqrt(l2), l1};
  if (m.variant == Variant::psc) {
    f.raw = dotp;
  } else {
    f.raw = static_cast<double>(m.fusion_w[0]) * f.features[0] + static_cast<double>(m.fusion_w[1]) * f.features[1] +
            static_cast<double>(m.fusion_w[2]) * f.features[2] + static_cast<double>(m.fusion_b);
  }
  return f;
}

template <std::floating_point T>
double raw_score(const BasicBoundaryModel<T>& m, std::span<const float> a, std::span<const float> b) {
  return forward(m, a, b).raw;
}

template <std::floating_point T>
Prediction score(const BasicBoundaryModel<T>& m, std::span<const float> a, std::span<const float> b,
                 double threshold = kDefaultThreshold) {
  return make_prediction(raw_score(m, a, b), threshold);
}

inline Prediction score(const BoundaryModel& m, const embedding::Embedding& a, const embedding::Embedding& b,
                        double threshold = kDefaultThreshold) {
  return score(m, a.span(), b.span(), threshold);
}

// ---------------------------------------------------------------------------
// Loss and gradients

struct LossGrad {
  double loss = 0.0;
  double grad = 0.0;  // dL/draw
};

/// Binary cross-entropy on a logit, in the overflow-free form
/// max(x,0) - x*y + log1p(exp(-|x|)).
inline LossGrad bce_loss(double raw, int label) {
  const double y = label ? 1.0 : 0.0;
  return {std::max(raw, 0.0) - raw * y + std::log1p(std::exp(-std::abs(raw))), sigmoid(raw) - y};
}

/// Parameter-shaped accumulator for dL/dtheta.
struct Gradient {
  std::vector<double> W, c;
  std::array<double, 3> fusion_w{};
  double fusion_b = 0.0;

  explicit Gradient(std::size_t d = 0) : W(d * d, 0.0), c(d, 0.0) {}
  void clear() {
    std::fill(W.begin(), W.end(), 0.0);
    std::fill(c.begin(), c.end(), 0.0);
    fusion_w = {};
    fusion_b = 0.0;
  }
};

namespace detail {
inline double sign(double x) { return (x > 0) - (x < 0); }
}  // namespace detail

/// Adds dL/dtheta for one labelled pair into `g` and returns the loss.
template <std::floating_point T>
double accumulate_gradient(const BasicBoundaryModel<T>& m, std::span<const float> a, std::span<const float> b,
                           int label, Gradient& g) {
  const Forward f = forward(m, a, b);
  const auto [loss, draw] = bce_loss(f.raw, label);
  const std::size_t d = m.d;

  // draw/du and draw/dv.
  std::vector<double> du(d), dv(d);
  if (m.variant == Variant::psc) {
    for (std::size_t r = 0; r < d; ++r) {
      du[r] = f.v[r];
      dv[r] = f.u[r];
    }
  } else {
    const double w0 = m.fusion_w[0], w1 = m.fusion_w[1], w2 = m.fusion_w[2];
    const double l2 = f.features[1];
    for (std::size_t r = 0; r < d; ++r) {
      const double delta = f.u[r] - f.v[r];
      const double dist = (l2 > 0 ? w1 * delta / l2 : 0.0) + w2 * detail::sign(delta);
      du[r] = w0 * f.v[r] + dist;
      dv[r] = w0 * f.u[r] - dist;
    }
    for (std::size_t k = 0; k < 3; ++k) g.fusion_w[k] += draw * f.features[k];
    g.fusion_b += draw;
  }
  for (std::size_t r = 0; r < d; ++r) {
    const double gu = draw * du[r], gv = draw * dv[r];
    double* row = g.W.data() + r * d;
    for (std::size_t k = 0; k < d; ++k) row[k] += gu * a[k] + gv * b[k];
    g.c[r] += gu + gv;
  }
  return loss;
}

/// BCE loss of one labelled pair.
template <std::floating_point T>
double loss(const BasicBoundaryModel<T>& m, std::span<const float> a, std::span<const float> b, int label) {
  return bce_loss(raw_score(m, a, b), label).loss;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 5;
  std::size_t batch = 256;
  double lr = 1e-3;
  std::uint64_t seed = 42;
  double holdout_fraction = 0.02;
  double threshold = kDefaultThreshold;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> holdout_acc;
};

struct TrainResult {
  BoundaryModel model;
  int best_epoch = 0;  // 0 when no epoch ran
  std::vector<EpochLog> log;
};

/// Pairs with their sentence embeddings resolved once up front.
struct EmbeddedPairs {
  std::vector<embedding::Embedding> vectors;
  std::vector<std::array<std::size_t, 2>> index;
  std::vector<int> labels;
  std::size_t size() const noexcept { return labels.size(); }
};

inline EmbeddedPairs embed_pairs(const std::vector<pairgen::SentencePair>& pairs,
                                 const embedding::EmbeddingProvider& provider) {
  EmbeddedPairs out;
  std::unordered_map<std::string, std::size_t> slot;
  auto lookup = [&](const std::string& s) {
    auto [it, inserted] = slot.try_emplace(s, out.vectors.size());
    if (inserted) {
      out.vectors.push_back(provider.embed(s));
      if (out.vectors.back().size() != provider.dimension())
        throw DimensionError(provider.dimension(), out.vectors.back().size());
    }
    return it->second;
  };
  for (const auto& p : pairs) {
    out.index.push_back({lookup(p.a), lookup(p.b)});
    out.labels.push_back(p.label);
  }
  return out;
}

template <std::floating_point T>
double accuracy(const BasicBoundaryModel<T>& m, const EmbeddedPairs& data, std::span<const std::size_t> which,
                double threshold = kDefaultThreshold) {
  if (which.empty()) return 0.0;
  std::size_t correct = 0;
  for (auto i : which) {
    const auto p = score(m, data.vectors[data.index[i][0]].span(), data.vectors[data.index[i][1]].span(), threshold);
    correct += (p.same_section == (data.labels[i] == 1));
  }
  return static_cast<double>(correct) / static_cast<double>(which.size());
}

/// Mini-batch SGD on mean BCE over every parameter. A deterministic holdout of
/// `holdout_fraction` of the pairs scores each epoch; the epoch with the best
/// holdout accuracy (earliest on ties) is returned, or the last epoch when the
/// holdout is empty, or the initialization when `epochs` is 0.
inline TrainResult train(Variant variant, const EmbeddedPairs& data, std::size_t d, const TrainConfig& cfg) {
  if (data.size() == 0) throw DataError("train: no sentence pairs");
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.batch == 0) throw ConfigError("batch must be positive");
  if (!std::isfinite(cfg.lr) || cfg.lr < 0) throw ConfigError("lr must be finite and >= 0");
  if (!(cfg.holdout_fraction >= 0.0 && cfg.holdout_fraction < 1.0)) throw ConfigError("holdout fraction must lie in [0,1)");
  for (const auto& v : data.vectors)
    if (v.size() != d) throw DimensionError(d, v.size());

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(hash::derive_seed(cfg.seed, 0));
  std::shuffle(order.begin(), order.end(), split_rng);
  std::size_t n_hold = 0;
  if (cfg.holdout_fraction > 0.0 && n >= 2)
    n_hold = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(cfg.holdout_fraction * n)), 1, n - 1);
  std::vector<std::size_t> holdout(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::sort(holdout.begin(), holdout.end());
  std::sort(train_idx.begin(), train_idx.end());

  TrainResult result;
  result.model = initial_model(variant, d, hash::derive_seed(cfg.seed, 1));
  BasicBoundaryModel<double> work = result.model.cast<double>();
  double best_acc = -1.0;
  Gradient g(d);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 rng(hash::derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(epoch)));
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch, ++batch_no) {
      const std::size_t stop = std::min(start + cfg.batch, train_idx.size());
      g.clear();
      double batch_loss = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        const auto i = train_idx[k];
        batch_loss += accumulate_gradient(work, data.vectors[data.index[i][0]].span(),
                                          data.vectors[data.index[i][1]].span(), data.labels[i], g);
      }
      if (!std::isfinite(batch_loss)) throw DivergenceError(epoch, batch_no);
      epoch_loss += batch_loss;
      const double step = cfg.lr / static_cast<double>(stop - start);
      for (std::size_t k = 0; k < work.W.size(); ++k) work.W[k] -= step * g.W[k];
      for (std::size_t k = 0; k < d; ++k) work.c[k] -= step * g.c[k];
      if (variant == Variant::mfc) {
        for (std::size_t k = 0; k < 3; ++k) work.fusion_w[k] -= step * g.fusion_w[k];
        work.fusion_b -= step * g.fusion_b;
      }
    }
    if (!work.finite()) throw DivergenceError(epoch, batch_no);

    BoundaryModel snapshot = work.cast<float>();
    EpochLog entry{epoch, train_idx.empty() ? 0.0 : epoch_loss / static_cast<double>(train_idx.size()), std::nullopt};
    if (!holdout.empty()) entry.holdout_acc = accuracy(snapshot, data, holdout, cfg.threshold);
    result.log.push_back(entry);
    const double acc = entry.holdout_acc.value_or(0.0);
    if (holdout.empty() || acc > best_acc) {
      best_acc = acc;
      result.model = std::move(snapshot);
      result.best_epoch = epoch;
    }
  }
  return result;
}

inline TrainResult train(Variant variant, const std::vector<pairgen::SentencePair>& pairs,
                         const embedding::EmbeddingProvider& provider, const TrainConfig& cfg) {
  if (pairs.empty()) throw DataError("train: no sentence pairs");
  return train(variant, embed_pairs(pairs, provider), provider.dimension(), cfg);
}

inline std::string serialize_log(const std::vector<EpochLog>& log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["holdout_acc"] = e.holdout_acc ? nlohmann::ordered_json(*e.holdout_acc) : nlohmann::ordered_json(nullptr);
    out += j.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model file: "SEGRAGBM", u16 version, u8 variant, u32 d, W (row-major f32),
// c (f32), and for MFC fusion_w (3 x f32) + fusion_b (f32). Little-endian.

inline constexpr std::string_view kModelMagic = "SEGRAGBM";
inline constexpr std::uint16_t kModelVersion = 1;

inline std::string encode_model(const BoundaryModel& m) {
  if (m.W.size() != m.d * m.d || m.c.size() != m.d) throw DataError("model parameter shapes do not match d");
  if (!m.finite()) throw DataError("model has non-finite parameters");
  io::ByteWriter w;
  w.put_bytes(kModelMagic);
  w.put<std::uint16_t>(kModelVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(m.variant));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.d));
  for (float x : m.W) w.put<float>(x);
  for (float x : m.c) w.put<float>(x);
  if (m.variant == Variant::mfc) {
    for (float x : m.fusion_w) w.put<float>(x);
    w.put<float>(m.fusion_b);
  }
  return w.str();
}

inline BoundaryModel decode_model(std::string_view bytes, std::optional<Variant> expected = std::nullopt) {
  io::ByteReader r(bytes);
  if (r.get_bytes(8) != kModelMagic) throw FormatError("model file: bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kModelVersion) throw FormatError("model file: unsupported version " + std::to_string(version));
  const auto tag = r.get<std::uint8_t>();
  if (tag > 1) throw FormatError("model file: unknown variant tag " + std::to_string(tag));
  BoundaryModel m;
  m.variant = static_cast<Variant>(tag);
  if (expected && *expected != m.variant)
    throw FormatError("model file: variant mismatch, expected " + std::string(to_string(*expected)) + ", file holds " +
                      std::string(to_string(m.variant)));
  m.d = r.get<std::uint32_t>();
  if (m.d == 0) throw FormatError("model file: zero dimension");
  const std::uint64_t floats = static_cast<std::uint64_t>(m.d) * m.d + m.d + (m.variant == Variant::mfc ? 4 : 0);
  if (r.remaining() != floats * 4)
    throw FormatError("model file: expected " + std::to_string(floats * 4) + " parameter bytes for d=" +
                      std::to_string(m.d) + ", found " + std::to_string(r.remaining()));
  m.W.resize(m.d * m.d);
  m.c.resize(m.d);
  for (auto& x : m.W) x = r.get<float>();
  for (auto& x : m.c) x = r.get<float>();
  if (m.variant == Variant::mfc) {
    for (auto& x : m.fusion_w) x = r.get<float>();
    m.fusion_b = r.get<float>();
  }
  if (!m.finite()) throw FormatError("model file: non-finite parameter");
  return m;
}

inline void save_model(const BoundaryModel& m, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_model(m));
}

inline BoundaryModel load_model(const std::filesystem::path& path, std::optional<Variant> expected = std::nullopt) {
  return decode_model(io::read_file(path), expected);
}

}  // namespace segrag::boundary
