#include <random>

#include "doctest.h"
#include "histmap/eval.hpp"
#include "histmap/histogram_ap.hpp"

using namespace histmap;

namespace {

SimilarityMatrix random_sim(std::size_t q, std::size_t g, std::mt19937_64& rng,
                            double lo = -0.95, double hi = 0.95) {
  std::uniform_real_distribution<double> val(lo, hi);
  std::bernoulli_distribution pos(0.35);
  SimilarityMatrix sim;
  sim.q = q;
  sim.g = g;
  sim.values.resize(q * g);
  sim.match.resize(q * g);
  sim.self_mask.assign(q * g, 0);
  for (std::size_t i = 0; i < q; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < g; ++j) {
      sim.values[i * g + j] = val(rng);
      sim.match[i * g + j] = pos(rng) ? 1 : 0;
      any |= sim.match[i * g + j] != 0;
    }
    if (!any) sim.match[i * g + rng() % g] = 1;
  }
  return sim;
}

double forward_loss(const SimilarityMatrix& sim, const BinGrid& grid) {
  return map_loss_forward(sim, grid).first;
}

// true when s +- step stays inside the same kernel segment for every bin
bool non_kink(double s, const BinGrid& grid, double step) {
  if (s - step <= grid.lo || s + step >= grid.hi) return false;
  for (double c : grid.centers)
    if (std::abs(s - c) < 2.0 * step) return false;
  return true;
}

}  // namespace

TEST_CASE("BinGrid spacing and ordering") {
  BinGrid grid(41, -1.0, 1.0);
  CHECK(grid.epsilon == doctest::Approx(2.0 / 40.0).epsilon(1e-15));
  CHECK(grid.centers.front() == doctest::Approx(1.0));
  CHECK(grid.centers.back() == doctest::Approx(-1.0));
  for (std::size_t k = 0; k + 1 < grid.centers.size(); ++k)
    CHECK(std::abs(grid.centers[k] - grid.centers[k + 1] - grid.epsilon) <= 1e-12);
  CHECK_THROWS_AS(BinGrid(1, 0.0, 1.0), InvalidSpec);
}

TEST_CASE("triangular_kernel peaks, midpoints, support edge") {
  BinGrid grid(11, -1.0, 1.0);
  auto at_center = triangular_kernel(grid.centers[4], grid);
  for (std::size_t m = 0; m < 11; ++m)
    CHECK(at_center[m] == doctest::Approx(m == 4 ? 1.0 : 0.0));

  double mid = 0.5 * (grid.centers[4] + grid.centers[5]);
  auto at_mid = triangular_kernel(mid, grid);
  CHECK(at_mid[4] == doctest::Approx(0.5));
  CHECK(at_mid[5] == doctest::Approx(0.5));

  auto at_edge = triangular_kernel(grid.centers[4] + grid.epsilon, grid);
  CHECK(at_edge[4] == doctest::Approx(0.0));
}

TEST_CASE("partition of unity on the interior") {
  std::mt19937_64 rng(5);
  for (std::size_t m_bins : {5, 40, 301}) {
    BinGrid grid(m_bins, -1.0, 1.0);
    std::uniform_real_distribution<double> val(-1.0, 1.0);
    for (int rep = 0; rep < 500; ++rep) {
      double s = val(rng);
      auto k = triangular_kernel(s, grid);
      double sum = 0.0;
      for (double v : k) sum += v;
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
    // out-of-range values clamp instead of losing mass
    auto k = triangular_kernel(1.7, grid);
    double sum = 0.0;
    for (double v : k) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("soft_histograms places mass and conserves counts") {
  BinGrid grid(11, -1.0, 1.0);
  SimilarityMatrix sim;
  sim.q = 1;
  sim.g = 1;
  sim.values = {grid.centers[3]};
  sim.match = {1};
  sim.self_mask = {0};
  auto st = soft_histograms(sim, grid);
  CHECK(st.hp(0, 3) == doctest::Approx(1.0));
  CHECK(st.h(0, 3) == doctest::Approx(1.0));
  for (std::size_t m = 0; m < 11; ++m)
    if (m != 3) CHECK(st.h(0, m) == doctest::Approx(0.0));
  CHECK(st.n_pos[0] == doctest::Approx(1.0));

  // two items sharing one bin add up
  sim.g = 2;
  sim.values = {grid.centers[3], grid.centers[3]};
  sim.match = {1, 0};
  sim.self_mask = {0, 0};
  st = soft_histograms(sim, grid);
  CHECK(st.h(0, 3) == doctest::Approx(2.0));
  CHECK(st.hp(0, 3) == doctest::Approx(1.0));

  // count conservation on random instances
  std::mt19937_64 rng(9);
  auto rs = random_sim(4, 10, rng);
  auto state = soft_histograms(rs, grid);
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0.0;
    for (std::size_t m = 0; m < 11; ++m) total += state.h(i, m);
    CHECK(std::abs(total - 10.0) <= 1e-9);
  }
}

TEST_CASE("soft_map on separated and all-positive instances") {
  BinGrid grid(201, -1.0, 1.0);
  SimilarityMatrix sim;
  sim.q = 2;
  sim.g = 6;
  sim.values.assign(12, -0.9);
  sim.match.assign(12, 0);
  sim.self_mask.assign(12, 0);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      sim.values[i * 6 + j] = 0.9;
      sim.match[i * 6 + j] = 1;
    }
  auto st = soft_histograms(sim, grid);
  CHECK(soft_map(st) == doctest::Approx(1.0).epsilon(1e-9));

  // all items positive -> precision 1 in every occupied bin
  std::mt19937_64 rng(21);
  auto rs = random_sim(3, 8, rng);
  std::fill(rs.match.begin(), rs.match.end(), 1);
  CHECK(soft_map(soft_histograms(rs, grid)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("soft_map converges to exact mAP") {
  std::mt19937_64 rng(33);
  auto rs = random_sim(4, 10, rng);
  BinGrid grid(2001, -1.0, 1.0);
  double approx = soft_map(soft_histograms(rs, grid));
  double exact = evaluate(rs, 10).map;
  CHECK(std::abs(approx - exact) <= 0.01);
}

TEST_CASE("soft_map error without positives") {
  SimilarityMatrix sim;
  sim.q = 1;
  sim.g = 2;
  sim.values = {0.1, 0.2};
  sim.match = {0, 0};
  sim.self_mask = {0, 0};
  BinGrid grid(11, -1.0, 1.0);
  CHECK_THROWS_AS(soft_map(soft_histograms(sim, grid)), NoPositiveQueries);
}

TEST_CASE("map_loss_forward bounds") {
  BinGrid grid(401, -1.0, 1.0);
  // perfectly separated
  SimilarityMatrix sim;
  sim.q = 1;
  sim.g = 4;
  sim.values = {0.9, 0.9, -0.9, -0.9};
  sim.match = {1, 1, 0, 0};
  sim.self_mask = {0, 0, 0, 0};
  CHECK(forward_loss(sim, grid) <= 1e-6);

  // inverted: negatives above all positives
  sim.values = {-0.9, -0.9, 0.9, 0.9};
  double exact_loss = 1.0 - evaluate(sim, 4).map;
  double soft_loss = forward_loss(sim, grid);
  CHECK(soft_loss >= 0.5);
  CHECK(soft_loss == doctest::Approx(exact_loss).epsilon(0.05));

  // loss stays within [0, 1 + 2/M] over random instances
  std::mt19937_64 rng(41);
  BinGrid coarse(40, -1.0, 1.0);
  for (int rep = 0; rep < 100; ++rep) {
    auto rs = random_sim(3, 9, rng);
    double loss = forward_loss(rs, coarse);
    CHECK(loss >= -1e-12);
    CHECK(loss <= 1.0 + 2.0 / 40.0);
  }
}

TEST_CASE("soft_map invariant under gallery permutation") {
  std::mt19937_64 rng(55);
  auto rs = random_sim(3, 8, rng);
  BinGrid grid(40, -1.0, 1.0);
  double base = soft_map(soft_histograms(rs, grid));

  std::vector<std::size_t> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  SimilarityMatrix sh = rs;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      sh.values[i * 8 + j] = rs.values[i * 8 + perm[j]];
      sh.match[i * 8 + j] = rs.match[i * 8 + perm[j]];
    }
  CHECK(soft_map(soft_histograms(sh, grid)) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("map_loss_backward matches finite differences") {
  std::mt19937_64 rng(77);
  BinGrid grid(25, -1.0, 1.0);
  const double step = 1e-6;
  for (int rep = 0; rep < 30; ++rep) {
    auto sim = random_sim(3, 8, rng);
    auto [loss, state] = map_loss_forward(sim, grid);
    auto grad = map_loss_backward(state, sim, grid);
    for (std::size_t t = 0; t < sim.values.size(); ++t) {
      if (!non_kink(sim.values[t], grid, step)) continue;
      SimilarityMatrix plus = sim, minus = sim;
      plus.values[t] += step;
      minus.values[t] -= step;
      double numeric =
          (forward_loss(plus, grid) - forward_loss(minus, grid)) / (2 * step);
      double denom = std::max(1.0, std::abs(numeric));
      CHECK(std::abs(grad[t] - numeric) / denom <= 1e-5);
    }
  }
}

TEST_CASE("map_loss_backward zeroes outside kernel support and on self entries") {
  BinGrid grid(11, -0.5, 0.5);
  SimilarityMatrix sim;
  sim.q = 1;
  sim.g = 3;
  sim.values = {0.9, 0.2, -0.2};  // first value beyond hi: clamped, flat
  sim.match = {0, 1, 0};
  sim.self_mask = {0, 0, 0};
  auto [loss, state] = map_loss_forward(sim, grid);
  auto grad = map_loss_backward(state, sim, grid);
  CHECK(grad[0] == 0.0);

  sim.self_mask = {0, 0, 1};
  auto [loss2, state2] = map_loss_forward(sim, grid);
  auto grad2 = map_loss_backward(state2, sim, grid);
  CHECK(grad2[2] == 0.0);
}

// The pointwise gradient sign is not a usable monotonicity check here: exact
// AP is piecewise constant in any single similarity, so between rank
// crossings the soft loss's local slope is entirely discretization wiggle
// and takes both signs. The rank-level statement does hold: promoting a
// positive past a negative never hurts.
TEST_CASE("swapping a positive with a higher-ranked negative never raises the loss") {
  std::mt19937_64 rng(91);
  for (std::size_t m_bins : {11, 31, 301}) {
    BinGrid grid(m_bins, -1.0, 1.0);
    for (int rep = 0; rep < 30; ++rep) {
      auto sim = random_sim(2, 8, rng);
      double base = forward_loss(sim, grid);
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t a = 0; a < 8; ++a)
          for (std::size_t b = 0; b < 8; ++b) {
            if (!sim.match[i * 8 + a] || sim.match[i * 8 + b]) continue;
            if (sim.values[i * 8 + b] <= sim.values[i * 8 + a]) continue;
            SimilarityMatrix sw = sim;
            std::swap(sw.values[i * 8 + a], sw.values[i * 8 + b]);
            CHECK(forward_loss(sw, grid) <= base + 1e-9);
          }
    }
  }
}

TEST_CASE("self-masked duplicate changes nothing") {
  std::mt19937_64 rng(101);
  auto sim = random_sim(3, 6, rng);
  BinGrid grid(40, -1.0, 1.0);
  auto [loss, state] = map_loss_forward(sim, grid);
  auto grad = map_loss_backward(state, sim, grid);

  // append a copy of gallery column 2, self-masked everywhere
  SimilarityMatrix ext;
  ext.q = 3;
  ext.g = 7;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      ext.values.push_back(sim.values[i * 6 + j]);
      ext.match.push_back(sim.match[i * 6 + j]);
      ext.self_mask.push_back(0);
    }
    ext.values.push_back(sim.values[i * 6 + 2]);
    ext.match.push_back(sim.match[i * 6 + 2]);
    ext.self_mask.push_back(1);
  }
  auto [loss2, state2] = map_loss_forward(ext, grid);
  auto grad2 = map_loss_backward(state2, ext, grid);
  CHECK(std::abs(loss2 - loss) <= 1e-12);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(std::abs(grad2[i * 7 + j] - grad[i * 6 + j]) <= 1e-12);
}

TEST_CASE("map_loss_backward rejects mismatched state") {
  std::mt19937_64 rng(111);
  auto sim = random_sim(2, 5, rng);
  BinGrid grid(21, -1.0, 1.0);
  auto [loss, state] = map_loss_forward(sim, grid);
  BinGrid other(31, -1.0, 1.0);
  CHECK_THROWS_AS(map_loss_backward(state, sim, other), StateMismatch);
}

TEST_CASE("chain_to_embeddings") {
  EmbeddingMatrix q(2, 3), g(2, 3);
  std::mt19937_64 rng(123);
  std::normal_distribution<double> dist;
  for (double& v : q.data) v = dist(rng);
  for (double& v : g.data) v = dist(rng);

  // all-zero upstream gradient
  std::vector<double> zeros(4, 0.0);
  auto [dq0, dg0] = chain_to_embeddings(zeros, q, g);
  for (double v : dq0.data) CHECK(v == 0.0);
  for (double v : dg0.data) CHECK(v == 0.0);

  // single nonzero entry
  std::vector<double> one = {0.0, 2.5, 0.0, 0.0};  // (i=0, j=1)
  auto [dq, dg] = chain_to_embeddings(one, q, g);
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(dq.at(0, t) == doctest::Approx(2.5 * g.at(1, t)));
    CHECK(dq.at(1, t) == 0.0);
    CHECK(dg.at(1, t) == doctest::Approx(2.5 * q.at(0, t)));
    CHECK(dg.at(0, t) == 0.0);
  }
}

TEST_CASE("full similarity chain matches finite differences on embeddings") {
  std::mt19937_64 rng(131);
  std::normal_distribution<double> dist;
  EmbeddingMatrix qraw(3, 4), graw(5, 4);
  for (double& v : qraw.data) v = dist(rng);
  for (double& v : graw.data) v = dist(rng);
  auto q = l2_normalize(qraw);
  auto g = l2_normalize(graw);
  std::vector<std::uint32_t> ql = {0, 1, 2}, gl = {0, 1, 2, 0, 1};
  BinGrid grid(25, -1.0, 1.0);

  auto loss_of = [&](const EmbeddingMatrix& qu, const EmbeddingMatrix& gu) {
    SimilarityMatrix sim;
    sim.q = qu.n;
    sim.g = gu.n;
    sim.values.resize(qu.n * gu.n);
    sim.match.resize(qu.n * gu.n);
    sim.self_mask.assign(qu.n * gu.n, 0);
    for (std::size_t i = 0; i < qu.n; ++i)
      for (std::size_t j = 0; j < gu.n; ++j) {
        double dot = 0;
        for (std::size_t t = 0; t < qu.d; ++t) dot += qu.at(i, t) * gu.at(j, t);
        sim.values[i * gu.n + j] = dot;
        sim.match[i * gu.n + j] = (ql[i] == gl[j]) ? 1 : 0;
      }
    return map_loss_forward(sim, grid).first;
  };

  auto sim = cosine_similarity(q, g, ql, gl);
  auto [loss, state] = map_loss_forward(sim, grid);
  auto d_sim = map_loss_backward(state, sim, grid);
  auto [dq, dg] = chain_to_embeddings(d_sim, q, g);

  const double step = 1e-6;
  bool probe_ok = true;
  for (std::size_t t = 0; t < sim.values.size(); ++t) {
    if (sim.values[t] - 2e-6 <= grid.lo || sim.values[t] + 2e-6 >= grid.hi)
      probe_ok = false;
    for (double c : grid.centers)
      if (std::abs(sim.values[t] - c) < 1e-5) probe_ok = false;
  }
  REQUIRE(probe_ok);  // rng seed chosen to land off the kinks

  for (std::size_t t = 0; t < q.data.size(); ++t) {
    EmbeddingMatrix plus = q, minus = q;
    plus.data[t] += step;
    minus.data[t] -= step;
    double numeric = (loss_of(plus, g) - loss_of(minus, g)) / (2 * step);
    CHECK(std::abs(dq.data[t] - numeric) / std::max(1.0, std::abs(numeric)) <= 1e-5);
  }
  for (std::size_t t = 0; t < g.data.size(); ++t) {
    EmbeddingMatrix plus = g, minus = g;
    plus.data[t] += step;
    minus.data[t] -= step;
    double numeric = (loss_of(q, plus) - loss_of(q, minus)) / (2 * step);
    CHECK(std::abs(dg.data[t] - numeric) / std::max(1.0, std::abs(numeric)) <= 1e-5);
  }
}
