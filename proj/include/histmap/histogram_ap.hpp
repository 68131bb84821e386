#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "histmap/core.hpp"
#include "histmap/errors.hpp"

namespace histmap {

/// Uniform histogram grid with centers stored in descending order, so
/// cumulative sums over bin index walk the ranking from the most similar
/// bin downward.
struct BinGrid {
  std::size_t m_bins;
  double lo, hi;
  std::vector<double> centers;  // centers[0] = hi ... centers[M-1] = lo
  double epsilon;

  BinGrid(std::size_t m, double lo_, double hi_)
      : m_bins(m), lo(lo_), hi(hi_) {
    if (m < 2 || !(hi > lo)) throw InvalidSpec("BinGrid requires M >= 2 and hi > lo");
    epsilon = (hi - lo) / static_cast<double>(m - 1);
    centers.resize(m);
    for (std::size_t k = 0; k < m; ++k)
      centers[k] = hi - static_cast<double>(k) * epsilon;
    centers.back() = lo;
  }
};

/// Soft assignment of one similarity to all M bins. Out-of-range values are
/// clamped so the triangular partition of unity holds on the full line.
inline std::vector<double> triangular_kernel(double s, const BinGrid& grid) {
  std::vector<double> out(grid.m_bins, 0.0);
  double sc = std::clamp(s, grid.lo, grid.hi);
  for (std::size_t m = 0; m < grid.m_bins; ++m)
    out[m] = std::max(1.0 - std::abs(sc - grid.centers[m]) / grid.epsilon, 0.0);
  return out;
}

/// Per-query soft bin counts plus everything the analytic backward needs.
struct HistogramApState {
  std::size_t q = 0, g = 0, m_bins = 0;
  std::vector<double> pos_counts;  // h+  : q * m
  std::vector<double> all_counts;  // h   : q * m
  std::vector<double> cum_pos;     // H+  : q * m, cumulative over bin index
  std::vector<double> cum_all;     // H   : q * m
  std::vector<double> n_pos;       // per-query true positive count
  double loss = 0.0;

  double hp(std::size_t i, std::size_t m) const { return pos_counts[i * m_bins + m]; }
  double h(std::size_t i, std::size_t m) const { return all_counts[i * m_bins + m]; }
};

namespace detail {

// Bin index k such that s lies in [centers[k+1], centers[k]] (descending
// centers). Returns the left (higher-similarity) bin of the pair sharing
// kernel support at s.
inline std::size_t bracket_bin(double s, const BinGrid& grid) {
  double t = (grid.hi - s) / grid.epsilon;
  auto k = static_cast<std::ptrdiff_t>(std::floor(t));
  k = std::clamp<std::ptrdiff_t>(k, 0,
                                 static_cast<std::ptrdiff_t>(grid.m_bins) - 2);
  return static_cast<std::size_t>(k);
}

}  // namespace detail

/// Soft histograms of one similarity matrix: positive and total bin masses
/// per query, with cumulative sums from the top-similarity bin down.
/// Self-masked entries contribute nothing.
inline HistogramApState soft_histograms(const SimilarityMatrix& sim,
                                        const BinGrid& grid) {
  HistogramApState st;
  st.q = sim.q;
  st.g = sim.g;
  st.m_bins = grid.m_bins;
  st.pos_counts.assign(sim.q * grid.m_bins, 0.0);
  st.all_counts.assign(sim.q * grid.m_bins, 0.0);
  st.n_pos.assign(sim.q, 0.0);

  for (std::size_t i = 0; i < sim.q; ++i) {
    double* hp = st.pos_counts.data() + i * grid.m_bins;
    double* h = st.all_counts.data() + i * grid.m_bins;
    for (std::size_t j = 0; j < sim.g; ++j) {
      if (sim.is_self(i, j)) continue;
      double s = std::clamp(sim.value(i, j), grid.lo, grid.hi);
      std::size_t k = detail::bracket_bin(s, grid);
      double wk = 1.0 - std::abs(s - grid.centers[k]) / grid.epsilon;
      double wk1 = 1.0 - wk;
      bool pos = sim.is_match(i, j);
      h[k] += wk;
      h[k + 1] += wk1;
      if (pos) {
        hp[k] += wk;
        hp[k + 1] += wk1;
        st.n_pos[i] += 1.0;
      }
    }
  }

  st.cum_pos.resize(st.pos_counts.size());
  st.cum_all.resize(st.all_counts.size());
  for (std::size_t i = 0; i < sim.q; ++i) {
    double cp = 0.0, ca = 0.0;
    for (std::size_t m = 0; m < grid.m_bins; ++m) {
      cp += st.pos_counts[i * grid.m_bins + m];
      ca += st.all_counts[i * grid.m_bins + m];
      st.cum_pos[i * grid.m_bins + m] = cp;
      st.cum_all[i * grid.m_bins + m] = ca;
    }
  }
  return st;
}

/// Histogram-approximated mAP: per query, the recall increment of bin m is
/// its positive mass over the true positive count, and precision treats the
/// bin's own mass as tied, evaluating the cumulative ratio at the expected
/// tied rank:
///
///   P_m = (H+_{m-1} + (h+_m + 1)/2) / (H_{m-1} + (h_m + 1)/2)
///
/// Evaluating at the tie midpoint instead of the full-bin cumulative kills
/// the first-order error from an item's kernel mass splitting across two
/// bins. The remaining second-order split error for a lone item with mass
/// w / 1-w across two bins is -(D-C) w(1-w) / (4 (D+1)^3), with C and D
/// the positive and total counts above it; both factors are recoverable
/// from bin-local quantities (den - num = D - C exactly on such bins, and
/// h+_m (1 - h_m) sums to 2 w(1-w) over the pair), so a per-bin term
/// cancels it:
///
///   AP += h+_m max(1 - h_m, 0) (den_m - num_m) / (8 den_m^3 n_pos)
///
/// The max() clamp switches the term off in crowded bins where the tie
/// midpoint already is the right model. AP is the inner product of P and
/// dR over bins plus the correction; the result is the mean over queries
/// with at least one positive.
inline double soft_map(const HistogramApState& state, double tau = 1e-12) {
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < state.q; ++i) {
    if (state.n_pos[i] <= 0.0) continue;
    double ap = 0.0;
    for (std::size_t m = 0; m < state.m_bins; ++m) {
      double hp = state.pos_counts[i * state.m_bins + m];
      double h = state.all_counts[i * state.m_bins + m];
      double num = state.cum_pos[i * state.m_bins + m] - 0.5 * hp + 0.5;
      double den =
          std::max(state.cum_all[i * state.m_bins + m] - 0.5 * h + 0.5, tau);
      ap += (num / den) * (hp / state.n_pos[i]);
      ap += hp * std::max(1.0 - h, 0.0) * (den - num) /
            (8.0 * den * den * den * state.n_pos[i]);
    }
    sum += ap;
    ++counted;
  }
  if (counted == 0) throw NoPositiveQueries();
  return sum / static_cast<double>(counted);
}

/// Forward pass of the mAP loss: 1 - soft_map. The returned state is the
/// cache for map_loss_backward.
inline std::pair<double, HistogramApState> map_loss_forward(
    const SimilarityMatrix& sim, const BinGrid& grid, double tau = 1e-12) {
  HistogramApState st = soft_histograms(sim, grid);
  st.loss = 1.0 - soft_map(st, tau);
  return {st.loss, std::move(st)};
}

/// Analytic gradient of the forward loss with respect to every similarity.
/// Self-masked and clamped-out-of-range entries get zero gradient;
/// subgradient at kernel kinks is zero.
inline std::vector<double> map_loss_backward(const HistogramApState& state,
                                             const SimilarityMatrix& sim,
                                             const BinGrid& grid,
                                             double tau = 1e-12) {
  if (state.q != sim.q || state.g != sim.g || state.m_bins != grid.m_bins)
    throw StateMismatch("map_loss_backward");

  std::size_t counted = 0;
  for (std::size_t i = 0; i < state.q; ++i)
    if (state.n_pos[i] > 0.0) ++counted;
  if (counted == 0) throw NoPositiveQueries();
  const double scale = -1.0 / static_cast<double>(counted);  // d loss / d AP_i

  std::vector<double> grad(sim.q * sim.g, 0.0);
  const std::size_t M = grid.m_bins;
  std::vector<double> d_hp(M), d_h(M);

  for (std::size_t i = 0; i < state.q; ++i) {
    if (state.n_pos[i] <= 0.0) continue;
    const double np = state.n_pos[i];

    // Per-bin-count sensitivities via suffix sums. For the main term, with
    // A_m = dR_m/den_m and B_m = dR_m*num_m/den_m^2:
    //   dAP/dhp_k = P_k/np + sum_{m>k} A_m + A_k/2
    //   dAP/dh_k  = -(sum_{m>k} B_m + B_k/2)
    // The half weights come from hp_k, h_k entering their own bin's tie
    // midpoint with coefficient 1/2. The split correction
    // c_m = hp_m r_m u_m / np with r_m = max(1-h_m, 0) and
    // u_m = (den_m-num_m)/(8 den_m^3) contributes its own direct terms at
    // m = k plus suffix sums through num_m and den_m, with the same half
    // weight at m = k.
    double suf_a = 0.0, suf_b = 0.0, suf_pa = 0.0, suf_pb = 0.0;
    for (std::size_t m = M; m-- > 0;) {
      double hpm = state.pos_counts[i * M + m];
      double hm = state.all_counts[i * M + m];
      double num = state.cum_pos[i * M + m] - 0.5 * hpm + 0.5;
      double den = std::max(state.cum_all[i * M + m] - 0.5 * hm + 0.5, tau);
      double dr = hpm / np;
      double a = dr / den;
      double b = dr * num / (den * den);
      double r = std::max(1.0 - hm, 0.0);
      double den3 = 8.0 * den * den * den;
      double u = (den - num) / den3;
      double pa = hpm * r / (den3 * np);
      double pb = hpm * r * (1.0 - 3.0 * (den - num) / den) / (den3 * np);
      d_hp[m] = (num / den) / np + suf_a + 0.5 * a + r * u / np -
                (suf_pa + 0.5 * pa);
      d_h[m] = -(suf_b + 0.5 * b) + (hm < 1.0 ? -hpm * u / np : 0.0) +
               suf_pb + 0.5 * pb;
      suf_a += a;
      suf_b += b;
      suf_pa += pa;
      suf_pb += pb;
    }

    for (std::size_t j = 0; j < sim.g; ++j) {
      if (sim.is_self(i, j)) continue;
      double s = sim.value(i, j);
      if (s <= grid.lo || s >= grid.hi) continue;  // clamp is flat
      std::size_t k = detail::bracket_bin(s, grid);
      bool pos = sim.is_match(i, j);
      double dap_ds = 0.0;
      // kernel k covers [centers[k]-eps, centers[k]+eps]; only bins k and
      // k+1 have s on their open support here
      for (std::size_t m : {k, k + 1}) {
        double diff = s - grid.centers[m];
        if (std::abs(diff) >= grid.epsilon || diff == 0.0) continue;
        double dkernel = -(diff > 0 ? 1.0 : -1.0) / grid.epsilon;
        dap_ds += d_h[m] * dkernel;
        if (pos) dap_ds += d_hp[m] * dkernel;
      }
      grad[i * sim.g + j] = scale * dap_ds;
    }
  }
  return grad;
}

/// Backprop through s_ij = dot(q_i, g_j): gradients with respect to the
/// normalized query and gallery embeddings.
inline std::pair<EmbeddingMatrix, EmbeddingMatrix> chain_to_embeddings(
    const std::vector<double>& dloss_dsim, const EmbeddingMatrix& q_norm,
    const EmbeddingMatrix& g_norm) {
  if (q_norm.d != g_norm.d || dloss_dsim.size() != q_norm.n * g_norm.n)
    throw DimensionMismatch("chain_to_embeddings");
  EmbeddingMatrix dq(q_norm.n, q_norm.d), dg(g_norm.n, g_norm.d);
  for (std::size_t i = 0; i < q_norm.n; ++i) {
    for (std::size_t j = 0; j < g_norm.n; ++j) {
      double c = dloss_dsim[i * g_norm.n + j];
      if (c == 0.0) continue;
      const double* gj = g_norm.row(j);
      const double* qi = q_norm.row(i);
      double* dqi = dq.row(i);
      double* dgj = dg.row(j);
      for (std::size_t t = 0; t < q_norm.d; ++t) {
        dqi[t] += c * gj[t];
        dgj[t] += c * qi[t];
      }
    }
  }
  return {std::move(dq), std::move(dg)};
}

}  // namespace histmap
