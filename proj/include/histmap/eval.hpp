#pragma once

#include <algorithm>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "histmap/core.hpp"
#include "histmap/errors.hpp"

namespace histmap {

struct EvalResult {
  double map = 0.0;
  std::vector<double> cmc;           // cmc[r-1] for rank r = 1..R
  std::vector<double> per_query_ap;  // NaN for skipped queries
  std::vector<std::size_t> skipped_queries;
};

namespace detail {

// Indices of valid entries sorted by similarity descending, ties broken by
// ascending gallery index.
inline std::vector<std::size_t> ranked_valid(
    const std::vector<double>& similarities, const std::vector<char>& valid) {
  std::vector<std::size_t> order;
  order.reserve(similarities.size());
  for (std::size_t j = 0; j < similarities.size(); ++j)
    if (valid[j]) order.push_back(j);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     if (similarities[a] != similarities[b])
                       return similarities[a] > similarities[b];
                     return a < b;
                   });
  return order;
}

}  // namespace detail

/// Exact average precision over the valid entries of one query.
inline double exact_ap(const std::vector<double>& similarities,
                       const std::vector<char>& matches,
                       const std::vector<char>& valid) {
  if (similarities.size() != matches.size() ||
      similarities.size() != valid.size())
    throw DimensionMismatch("exact_ap");
  auto order = detail::ranked_valid(similarities, valid);
  std::size_t positives = 0;
  for (std::size_t j : order)
    if (matches[j]) ++positives;
  if (positives == 0) throw NoPositives();

  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (matches[order[r]]) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return ap / static_cast<double>(positives);
}

/// Exact mAP + CMC over a similarity matrix. Self-masked entries, and when
/// camera_filter is on same-identity-same-camera entries, are excluded from
/// ranking and positives. Queries without a valid positive are skipped.
inline EvalResult evaluate(const SimilarityMatrix& sim, std::size_t max_rank,
                           bool camera_filter = false,
                           const std::vector<std::uint32_t>& q_cameras = {},
                           const std::vector<std::uint32_t>& g_cameras = {}) {
  if (sim.g == 0) throw EmptyGallery();
  max_rank = std::min(max_rank, sim.g);
  if (camera_filter &&
      (q_cameras.size() != sim.q || g_cameras.size() != sim.g))
    throw DimensionMismatch("evaluate (cameras)");

  EvalResult res;
  res.per_query_ap.assign(sim.q, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::size_t> first_match_rank;  // 1-based, per non-skipped query
  double ap_sum = 0.0;
  std::size_t counted = 0;

  std::vector<double> s(sim.g);
  std::vector<char> m(sim.g), valid(sim.g);
  for (std::size_t i = 0; i < sim.q; ++i) {
    for (std::size_t j = 0; j < sim.g; ++j) {
      s[j] = sim.value(i, j);
      m[j] = sim.is_match(i, j) ? 1 : 0;
      bool v = !sim.is_self(i, j);
      if (v && camera_filter && m[j] && q_cameras[i] == g_cameras[j]) v = false;
      valid[j] = v ? 1 : 0;
    }
    std::size_t positives = 0;
    for (std::size_t j = 0; j < sim.g; ++j)
      if (valid[j] && m[j]) ++positives;
    if (positives == 0) {
      res.skipped_queries.push_back(i);
      continue;
    }
    res.per_query_ap[i] = exact_ap(s, m, valid);
    ap_sum += res.per_query_ap[i];
    ++counted;

    auto order = detail::ranked_valid(s, valid);
    std::size_t fm = 0;
    for (std::size_t r = 0; r < order.size(); ++r)
      if (m[order[r]]) {
        fm = r + 1;
        break;
      }
    first_match_rank.push_back(fm);
  }
  if (counted == 0) throw AllQueriesSkipped();

  res.map = ap_sum / static_cast<double>(counted);
  res.cmc.assign(max_rank, 0.0);
  for (std::size_t fm : first_match_rank)
    for (std::size_t r = fm; r <= max_rank && r >= 1; ++r)
      res.cmc[r - 1] += 1.0;
  for (double& c : res.cmc) c /= static_cast<double>(counted);
  return res;
}

struct RankEntry {
  std::size_t gallery_index;
  double similarity;
  bool is_match;
};

/// Top-k valid gallery entries for one query, best first.
inline std::vector<RankEntry> ranking_list(const SimilarityMatrix& sim,
                                           std::size_t query_index,
                                           std::size_t top_k) {
  if (query_index >= sim.q) throw IndexOutOfRange("ranking_list");
  if (top_k < 1) throw IndexOutOfRange("ranking_list (top_k)");
  std::vector<double> s(sim.g);
  std::vector<char> valid(sim.g);
  for (std::size_t j = 0; j < sim.g; ++j) {
    s[j] = sim.value(query_index, j);
    valid[j] = sim.is_self(query_index, j) ? 0 : 1;
  }
  auto order = detail::ranked_valid(s, valid);
  std::vector<RankEntry> out;
  for (std::size_t r = 0; r < order.size() && r < top_k; ++r)
    out.push_back({order[r], s[order[r]], sim.is_match(query_index, order[r])});
  return out;
}

/// Machine-readable key-value report: map, cmc.1, cmc.5, cmc.10, cmc.20,
/// skipped. Missing ranks (gallery smaller than the rank) are omitted.
inline std::string report_key_value(const EvalResult& res) {
  char buf[64];
  std::string out;
  std::snprintf(buf, sizeof(buf), "map\t%.10f\n", res.map);
  out += buf;
  for (std::size_t r : {std::size_t{1}, std::size_t{5}, std::size_t{10},
                        std::size_t{20}}) {
    if (r <= res.cmc.size()) {
      std::snprintf(buf, sizeof(buf), "cmc.%zu\t%.10f\n", r, res.cmc[r - 1]);
      out += buf;
    }
  }
  std::snprintf(buf, sizeof(buf), "skipped\t%zu\n", res.skipped_queries.size());
  out += buf;
  return out;
}

/// Human-readable table matching the R1/R5/R10/R20 reporting convention.
inline std::string report_table(const EvalResult& res) {
  char buf[160];
  auto at = [&](std::size_t r) {
    return r <= res.cmc.size() ? res.cmc[r - 1] * 100.0 : -1.0;
  };
  std::string out = "  R1     R5     R10    R20    mAP\n";
  std::snprintf(buf, sizeof(buf), "  %-6.1f %-6.1f %-6.1f %-6.1f %-6.1f\n",
                at(1), at(5), at(10), at(20), res.map * 100.0);
  out += buf;
  return out;
}

}  // namespace histmap
