#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>
#include <vector>

#include "histmap/core.hpp"
#include "histmap/errors.hpp"

namespace histmap {

/// Dense C-way classifier head producing identity logits W x + b.
struct ClassifierHead {
  EmbeddingMatrix weights;  // C x D
  std::vector<double> bias; // C
  std::size_t num_classes = 0;

  ClassifierHead() = default;
  ClassifierHead(std::size_t classes, std::size_t dim)
      : weights(classes, dim), bias(classes, 0.0), num_classes(classes) {}
};

struct ClassifierGrad {
  EmbeddingMatrix d_weights;
  std::vector<double> d_bias;
};

struct CrossEntropyResult {
  double loss;
  EmbeddingMatrix d_features;
  ClassifierGrad d_head;
};

/// Mean softmax cross-entropy over identity logits, with log-sum-exp
/// stabilization and exact gradients for features, weights and bias.
inline CrossEntropyResult cross_entropy_loss(
    const EmbeddingMatrix& features, const std::vector<std::uint32_t>& labels,
    const ClassifierHead& head) {
  if (labels.size() != features.n || head.weights.d != features.d)
    throw DimensionMismatch("cross_entropy_loss");
  for (auto y : labels)
    if (y >= head.num_classes) throw LabelOutOfRange("cross_entropy_loss");

  const std::size_t B = features.n, C = head.num_classes, D = features.d;
  CrossEntropyResult res;
  res.loss = 0.0;
  res.d_features = EmbeddingMatrix(B, D);
  res.d_head.d_weights = EmbeddingMatrix(C, D);
  res.d_head.d_bias.assign(C, 0.0);

  std::vector<double> logits(C), prob(C);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t i = 0; i < B; ++i) {
    const double* x = features.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      double z = head.bias[c];
      const double* w = head.weights.row(c);
      for (std::size_t t = 0; t < D; ++t) z += w[t] * x[t];
      logits[c] = z;
      mx = std::max(mx, z);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      prob[c] = std::exp(logits[c] - mx);
      sum += prob[c];
    }
    for (std::size_t c = 0; c < C; ++c) prob[c] /= sum;
    res.loss -= inv_b * (logits[labels[i]] - mx - std::log(sum));

    for (std::size_t c = 0; c < C; ++c) {
      double dz = inv_b * (prob[c] - (c == labels[i] ? 1.0 : 0.0));
      if (dz == 0.0) continue;
      const double* w = head.weights.row(c);
      double* dw = res.d_head.d_weights.row(c);
      double* dx = res.d_features.row(i);
      res.d_head.d_bias[c] += dz;
      for (std::size_t t = 0; t < D; ++t) {
        dw[t] += dz * x[t];
        dx[t] += dz * w[t];
      }
    }
  }
  return res;
}

struct TripletResult {
  double loss;
  EmbeddingMatrix d_features;
  std::size_t active_triplets;  // anchors with a positive hinge
};

/// Batch-hard triplet loss: per anchor, hinge on (margin + hardest positive
/// distance - hardest negative distance), mean over anchors. Hard selection
/// is treated as locally constant; ties break to the lowest index.
inline TripletResult batch_hard_triplet_loss(
    const EmbeddingMatrix& features, const std::vector<std::uint32_t>& labels,
    double margin) {
  if (labels.size() != features.n)
    throw DimensionMismatch("batch_hard_triplet_loss");
  const std::size_t B = features.n, D = features.d;
  auto dist = euclidean_distance_matrix(features, features);

  TripletResult res;
  res.loss = 0.0;
  res.active_triplets = 0;
  res.d_features = EmbeddingMatrix(B, D);
  const double inv_b = 1.0 / static_cast<double>(B);

  for (std::size_t a = 0; a < B; ++a) {
    std::ptrdiff_t hard_p = -1, hard_n = -1;
    double dp = -1.0, dn = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < B; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (dist[a * B + j] > dp) {
          dp = dist[a * B + j];
          hard_p = static_cast<std::ptrdiff_t>(j);
        }
      } else if (dist[a * B + j] < dn) {
        dn = dist[a * B + j];
        hard_n = static_cast<std::ptrdiff_t>(j);
      }
    }
    if (hard_p < 0) throw DegenerateBatch("anchor " + std::to_string(a) + " has no positive");
    if (hard_n < 0) throw DegenerateBatch("anchor " + std::to_string(a) + " has no negative");

    double hinge = margin + dp - dn;
    if (hinge <= 0.0) continue;
    res.loss += inv_b * hinge;
    ++res.active_triplets;

    const double* xa = features.row(a);
    const double* xp = features.row(static_cast<std::size_t>(hard_p));
    const double* xn = features.row(static_cast<std::size_t>(hard_n));
    double* ga = res.d_features.row(a);
    double* gp = res.d_features.row(static_cast<std::size_t>(hard_p));
    double* gn = res.d_features.row(static_cast<std::size_t>(hard_n));
    // d||a-p||/da = (a-p)/||a-p||; zero-distance pairs get subgradient 0
    for (std::size_t t = 0; t < D; ++t) {
      if (dp > 0.0) {
        double u = (xa[t] - xp[t]) / dp;
        ga[t] += inv_b * u;
        gp[t] -= inv_b * u;
      }
      if (dn > 0.0) {
        double v = (xa[t] - xn[t]) / dn;
        ga[t] -= inv_b * v;
        gn[t] += inv_b * v;
      }
    }
  }
  return res;
}

struct LossReport {
  double l_id = 0.0;
  double l_triplet = 0.0;
  double l_map = 0.0;
  double l_total = 0.0;  // unit-weight sum
  double l_weighted = 0.0;
  std::size_t active_triplets = 0;
};

struct LossWeights {
  double id = 1.0;
  double triplet = 1.0;
  double map = 1.0;
};

/// Weighted combination of the three loss terms; unit weights reproduce the
/// plain sum.
inline LossReport combine_losses(double l_id, double l_triplet, double l_map,
                                 const LossWeights& w = {}) {
  if (!std::isfinite(l_id) || !std::isfinite(l_triplet) || !std::isfinite(l_map))
    throw NonFiniteLoss();
  LossReport r;
  r.l_id = l_id;
  r.l_triplet = l_triplet;
  r.l_map = l_map;
  r.l_total = l_id + l_triplet + l_map;
  r.l_weighted = w.id * l_id + w.triplet * l_triplet + w.map * l_map;
  return r;
}

}  // namespace histmap
