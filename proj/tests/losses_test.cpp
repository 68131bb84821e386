#include <random>

#include "doctest.h"
#include "histmap/losses.hpp"

using namespace histmap;

namespace {

EmbeddingMatrix random_matrix(std::size_t n, std::size_t d, std::mt19937_64& rng,
                              double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  EmbeddingMatrix m(n, d);
  for (double& v : m.data) v = dist(rng);
  return m;
}

}  // namespace

TEST_CASE("cross_entropy uniform logits give ln C") {
  std::size_t C = 5, D = 3;
  ClassifierHead head(C, D);  // zero weights and bias -> uniform
  EmbeddingMatrix x(2, D);
  x.at(0, 0) = 1.0;
  x.at(1, 1) = -2.0;
  auto res = cross_entropy_loss(x, {0, 3}, head);
  CHECK(res.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("cross_entropy vanishes for dominant true logit") {
  ClassifierHead head(3, 2);
  head.weights.at(0, 0) = 100.0;  // class 0 wins when x = (1, 0)
  EmbeddingMatrix x(1, 2);
  x.at(0, 0) = 1.0;
  auto res = cross_entropy_loss(x, {0}, head);
  CHECK(res.loss <= 1e-12);
}

TEST_CASE("cross_entropy rejects bad labels") {
  ClassifierHead head(3, 2);
  EmbeddingMatrix x(1, 2);
  CHECK_THROWS_AS(cross_entropy_loss(x, {3}, head), LabelOutOfRange);
}

TEST_CASE("cross_entropy shift invariance") {
  std::mt19937_64 rng(1);
  ClassifierHead head(4, 3);
  for (double& w : head.weights.data) w = std::normal_distribution<double>()(rng);
  auto x = random_matrix(5, 3, rng);
  auto base = cross_entropy_loss(x, {0, 1, 2, 3, 0}, head);
  ClassifierHead shifted = head;
  for (double& b : shifted.bias) b += 7.5;
  auto res = cross_entropy_loss(x, {0, 1, 2, 3, 0}, shifted);
  CHECK(res.loss == doctest::Approx(base.loss).epsilon(1e-12));
}

TEST_CASE("cross_entropy gradients match finite differences") {
  std::mt19937_64 rng(2);
  std::size_t B = 8, C = 5, D = 4;
  ClassifierHead head(C, D);
  for (double& w : head.weights.data) w = std::normal_distribution<double>()(rng);
  for (double& b : head.bias) b = std::normal_distribution<double>()(rng);
  auto x = random_matrix(B, D, rng);
  std::vector<std::uint32_t> labels(B);
  for (auto& y : labels) y = rng() % C;

  auto res = cross_entropy_loss(x, labels, head);
  const double step = 1e-6;
  auto check = [&](double analytic, double numeric) {
    CHECK(std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)) <= 1e-6);
  };
  for (std::size_t t = 0; t < x.data.size(); ++t) {
    auto plus = x, minus = x;
    plus.data[t] += step;
    minus.data[t] -= step;
    double numeric = (cross_entropy_loss(plus, labels, head).loss -
                      cross_entropy_loss(minus, labels, head).loss) /
                     (2 * step);
    check(res.d_features.data[t], numeric);
  }
  for (std::size_t t = 0; t < head.weights.data.size(); ++t) {
    auto plus = head, minus = head;
    plus.weights.data[t] += step;
    minus.weights.data[t] -= step;
    double numeric = (cross_entropy_loss(x, labels, plus).loss -
                      cross_entropy_loss(x, labels, minus).loss) /
                     (2 * step);
    check(res.d_head.d_weights.data[t], numeric);
  }
  for (std::size_t t = 0; t < head.bias.size(); ++t) {
    auto plus = head, minus = head;
    plus.bias[t] += step;
    minus.bias[t] -= step;
    double numeric = (cross_entropy_loss(x, labels, plus).loss -
                      cross_entropy_loss(x, labels, minus).loss) /
                     (2 * step);
    check(res.d_head.d_bias[t], numeric);
  }
}

TEST_CASE("triplet loss zero on separated clusters") {
  // two identities far apart, margin easily satisfied
  EmbeddingMatrix x(4, 2);
  x.at(0, 0) = 0.0;
  x.at(1, 0) = 0.1;
  x.at(2, 0) = 100.0;
  x.at(3, 0) = 100.1;
  auto res = batch_hard_triplet_loss(x, {0, 0, 1, 1}, 0.3);
  CHECK(res.loss == 0.0);
  CHECK(res.active_triplets == 0);
  for (double v : res.d_features.data) CHECK(v == 0.0);
}

TEST_CASE("triplet loss at least margin for coincident negatives") {
  EmbeddingMatrix x(4, 2);
  // rows 0,1 identity 0 at the origin; rows 2,3 identity 1 also at the origin
  auto res = batch_hard_triplet_loss(x, {0, 0, 1, 1}, 0.3);
  CHECK(res.loss >= 0.3 - 1e-12);
}

TEST_CASE("triplet loss degenerate batches") {
  EmbeddingMatrix x(3, 2);
  CHECK_THROWS_AS(batch_hard_triplet_loss(x, {0, 1, 2}, 0.3), DegenerateBatch);
  CHECK_THROWS_AS(batch_hard_triplet_loss(x, {0, 0, 0}, 0.3), DegenerateBatch);
}

TEST_CASE("triplet loss equals exhaustive oracle and passes gradient check") {
  std::mt19937_64 rng(3);
  const double margin = 0.3;
  for (int rep = 0; rep < 25; ++rep) {
    std::size_t P = 4, K = 4, B = P * K, D = 5;
    auto x = random_matrix(B, D, rng);
    std::vector<std::uint32_t> labels(B);
    for (std::size_t i = 0; i < B; ++i) labels[i] = static_cast<std::uint32_t>(i / K);

    auto res = batch_hard_triplet_loss(x, labels, margin);

    // exhaustive per-anchor max/min reimplementation
    auto dist = euclidean_distance_matrix(x, x);
    double expected = 0.0;
    for (std::size_t a = 0; a < B; ++a) {
      double dp = -1.0, dn = 1e300;
      for (std::size_t j = 0; j < B; ++j) {
        if (j == a) continue;
        if (labels[j] == labels[a])
          dp = std::max(dp, dist[a * B + j]);
        else
          dn = std::min(dn, dist[a * B + j]);
      }
      expected += std::max(margin + dp - dn, 0.0) / static_cast<double>(B);
    }
    CHECK(res.loss == doctest::Approx(expected).epsilon(1e-15));

    // finite differences where selections are unique (random fp64 ties are
    // measure-zero) and hinges are strictly active or inactive
    const double step = 1e-6;
    for (std::size_t t = 0; t < x.data.size(); t += 7) {
      auto plus = x, minus = x;
      plus.data[t] += step;
      minus.data[t] -= step;
      double numeric = (batch_hard_triplet_loss(plus, labels, margin).loss -
                        batch_hard_triplet_loss(minus, labels, margin).loss) /
                       (2 * step);
      CHECK(std::abs(res.d_features.data[t] - numeric) /
                std::max(1.0, std::abs(numeric)) <=
            1e-5);
    }
  }
}

TEST_CASE("triplet loss rotation invariance and gradient translation") {
  std::mt19937_64 rng(5);
  std::size_t B = 8, D = 3;
  auto x = random_matrix(B, D, rng);
  std::vector<std::uint32_t> labels = {0, 0, 1, 1, 2, 2, 3, 3};
  auto base = batch_hard_triplet_loss(x, labels, 0.5);

  // rigid rotation about the z axis
  double c = std::cos(0.7), s = std::sin(0.7);
  EmbeddingMatrix rot(B, D);
  for (std::size_t i = 0; i < B; ++i) {
    rot.at(i, 0) = c * x.at(i, 0) - s * x.at(i, 1);
    rot.at(i, 1) = s * x.at(i, 0) + c * x.at(i, 1);
    rot.at(i, 2) = x.at(i, 2);
  }
  auto rotated = batch_hard_triplet_loss(rot, labels, 0.5);
  CHECK(rotated.loss == doctest::Approx(base.loss).epsilon(1e-9));

  // pairwise distances ignore translation, so gradients sum to zero
  for (std::size_t t = 0; t < D; ++t) {
    double sum = 0.0;
    for (std::size_t i = 0; i < B; ++i) sum += base.d_features.at(i, t);
    CHECK(std::abs(sum) <= 1e-12);
  }
}

TEST_CASE("combine_losses weighting") {
  auto r = combine_losses(1.5, 0.25, 0.75);
  CHECK(r.l_total == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(r.l_weighted == doctest::Approx(2.5).epsilon(1e-12));

  auto metric_only = combine_losses(1.5, 0.25, 0.75, {1.0, 1.0, 0.0});
  CHECK(metric_only.l_weighted == doctest::Approx(1.75));
  auto map_only = combine_losses(1.5, 0.25, 0.75, {0.0, 0.0, 1.0});
  CHECK(map_only.l_weighted == doctest::Approx(0.75));
  auto zero = combine_losses(0.0, 0.0, 0.0);
  CHECK(zero.l_total == 0.0);

  // linear in each component
  auto a = combine_losses(2.0, 0.25, 0.75, {0.5, 2.0, 3.0});
  auto b = combine_losses(1.5, 0.25, 0.75, {0.5, 2.0, 3.0});
  CHECK(a.l_weighted - b.l_weighted == doctest::Approx(0.5 * 0.5).epsilon(1e-12));

  CHECK_THROWS_AS(combine_losses(std::nan(""), 0.0, 0.0), NonFiniteLoss);
}
