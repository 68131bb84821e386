#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "histmap/errors.hpp"

namespace histmap {

/// Dense row-major N x D matrix of fp64 features. The universal currency
/// between modules.
struct EmbeddingMatrix {
  std::vector<double> data;  // row-major, n * d entries
  std::size_t n = 0;
  std::size_t d = 0;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows, std::size_t cols)
      : data(rows * cols, 0.0), n(rows), d(cols) {}

  double& at(std::size_t i, std::size_t j) { return data[i * d + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * d + j]; }
  const double* row(std::size_t i) const { return data.data() + i * d; }
  double* row(std::size_t i) { return data.data() + i * d; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

enum class SetRole { Train, Query, Gallery };

/// Embeddings plus per-row identity / camera / clothing labels.
struct LabeledSet {
  EmbeddingMatrix embeddings;
  std::vector<std::uint32_t> identity;
  std::vector<std::uint32_t> camera;
  std::vector<std::uint32_t> clothing;
  SetRole role = SetRole::Train;
  // Dense remap applied at ingestion: original_identity[k] is the source id
  // of dense class k. Empty when labels were already dense.
  std::vector<std::uint32_t> original_identity;

  std::size_t size() const { return embeddings.n; }

  std::size_t num_identities() const {
    std::uint32_t m = 0;
    for (auto id : identity) m = std::max(m, id + 1);
    return identity.empty() ? 0 : m;
  }
};

/// Q x G cosine similarities with match and self-match masks.
struct SimilarityMatrix {
  std::vector<double> values;  // row-major, q * g
  std::vector<char> match;     // same identity
  std::vector<char> self_mask; // gallery row is the identical sample
  std::size_t q = 0;
  std::size_t g = 0;

  double value(std::size_t i, std::size_t j) const { return values[i * g + j]; }
  bool is_match(std::size_t i, std::size_t j) const { return match[i * g + j] != 0; }
  bool is_self(std::size_t i, std::size_t j) const { return self_mask[i * g + j] != 0; }
};

inline double row_norm(const EmbeddingMatrix& e, std::size_t i) {
  double s = 0.0;
  const double* r = e.row(i);
  for (std::size_t j = 0; j < e.d; ++j) s += r[j] * r[j];
  return std::sqrt(s);
}

/// Row-wise L2 normalization. Rejects rows with norm <= 1e-12.
inline EmbeddingMatrix l2_normalize(const EmbeddingMatrix& e) {
  EmbeddingMatrix out(e.n, e.d);
  for (std::size_t i = 0; i < e.n; ++i) {
    double nrm = row_norm(e, i);
    if (nrm <= 1e-12) throw ZeroNormRow(i);
    const double* src = e.row(i);
    double* dst = out.row(i);
    for (std::size_t j = 0; j < e.d; ++j) dst[j] = src[j] / nrm;
  }
  return out;
}

/// Provenance for self-match detection: sample_id[i] of a query equals
/// sample_id[j] of a gallery row iff they are the identical sample.
/// Empty vectors mean disjoint query/gallery (self_mask all false).
struct Provenance {
  std::vector<std::uint32_t> query_sample;
  std::vector<std::uint32_t> gallery_sample;
};

/// Dense Q x G cosine similarity. Both inputs must already be unit-norm
/// (checked to 1e-6).
inline SimilarityMatrix cosine_similarity(
    const EmbeddingMatrix& q, const EmbeddingMatrix& g,
    const std::vector<std::uint32_t>& q_labels,
    const std::vector<std::uint32_t>& g_labels,
    const Provenance& provenance = {}) {
  if (q.d != g.d) throw DimensionMismatch("cosine_similarity");
  if (q_labels.size() != q.n || g_labels.size() != g.n)
    throw DimensionMismatch("cosine_similarity (labels)");
  for (std::size_t i = 0; i < q.n; ++i)
    if (std::abs(row_norm(q, i) - 1.0) > 1e-6)
      throw NotNormalized("cosine_similarity (query)");
  for (std::size_t j = 0; j < g.n; ++j)
    if (std::abs(row_norm(g, j) - 1.0) > 1e-6)
      throw NotNormalized("cosine_similarity (gallery)");

  const bool has_prov =
      !provenance.query_sample.empty() && !provenance.gallery_sample.empty();
  if (has_prov && (provenance.query_sample.size() != q.n ||
                   provenance.gallery_sample.size() != g.n))
    throw DimensionMismatch("cosine_similarity (provenance)");

  SimilarityMatrix sim;
  sim.q = q.n;
  sim.g = g.n;
  sim.values.resize(q.n * g.n);
  sim.match.resize(q.n * g.n);
  sim.self_mask.assign(q.n * g.n, 0);
  for (std::size_t i = 0; i < q.n; ++i) {
    const double* qi = q.row(i);
    for (std::size_t j = 0; j < g.n; ++j) {
      const double* gj = g.row(j);
      double dot = 0.0;
      for (std::size_t t = 0; t < q.d; ++t) dot += qi[t] * gj[t];
      sim.values[i * g.n + j] = dot;
      sim.match[i * g.n + j] = (q_labels[i] == g_labels[j]) ? 1 : 0;
      if (has_prov)
        sim.self_mask[i * g.n + j] =
            (provenance.query_sample[i] == provenance.gallery_sample[j]) ? 1 : 0;
    }
  }
  return sim;
}

/// Pairwise Euclidean distances, computed per pair for stability (negative
/// radicands from rounding clamped to zero).
inline std::vector<double> euclidean_distance_matrix(const EmbeddingMatrix& a,
                                                     const EmbeddingMatrix& b) {
  if (a.d != b.d) throw DimensionMismatch("euclidean_distance_matrix");
  std::vector<double> out(a.n * b.n);
  for (std::size_t i = 0; i < a.n; ++i) {
    const double* ai = a.row(i);
    for (std::size_t j = 0; j < b.n; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (std::size_t t = 0; t < a.d; ++t) {
        double dlt = ai[t] - bj[t];
        s += dlt * dlt;
      }
      out[i * b.n + j] = std::sqrt(std::max(s, 0.0));
    }
  }
  return out;
}

}  // namespace histmap
