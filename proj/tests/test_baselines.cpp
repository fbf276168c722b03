#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "dkm/baselines.hpp"
#include "support.hpp"

using namespace dkm;
using dkm::testing::random_matrix;
using TapeD = ad::Tape<double>;

namespace {

DkmConfig make_config(int bits, int dim, double tau, int iters = 5, double eps = 1e-4) {
  DkmConfig c;
  c.bits = bits;
  c.dim = dim;
  c.temperature = tau;
  c.max_iterations = iters;
  c.epsilon = eps;
  return c;
}

double sum_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

// Minimum k-means objective over every assignment of n points to k labels.
double exhaustive_objective(const std::vector<double>& x, std::size_t k) {
  const std::size_t n = x.size();
  std::vector<std::size_t> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<double> sum(k, 0), count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sum[label[i]] += x[i];
      count[label[i]] += 1;
    }
    double obj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double mean = sum[label[i]] / count[label[i]];
      obj += (x[i] - mean) * (x[i] - mean);
    }
    best = std::min(best, obj);
    std::size_t pos = 0;
    while (pos < n && ++label[pos] == k) label[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

// Minimum over partitions of the sorted points into k contiguous runs.
double contiguous_objective(std::vector<double> x, std::size_t k) {
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();
  auto cost = [&](std::size_t lo, std::size_t hi) {
    double mean = 0;
    for (std::size_t i = lo; i < hi; ++i) mean += x[i];
    mean /= static_cast<double>(hi - lo);
    double s = 0;
    for (std::size_t i = lo; i < hi; ++i) s += (x[i] - mean) * (x[i] - mean);
    return s;
  };
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, std::size_t, double)> rec = [&](std::size_t start, std::size_t left,
                                                                  double acc) {
    if (left == 1) {
      best = std::min(best, acc + cost(start, n));
      return;
    }
    for (std::size_t end = start + 1; end + left - 1 <= n; ++end) rec(end, left - 1, acc + cost(start, end));
  };
  rec(0, k, 0.0);
  return best;
}

// Gaussian mixture likelihood with densities evaluated directly (no log-space).
double direct_log_likelihood(const MatrixD& w, const MatrixD& c, double var) {
  const double d = static_cast<double>(w.cols());
  double ll = 0;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double p = 0;
    for (std::size_t j = 0; j < c.rows(); ++j) {
      double sq = 0;
      for (std::size_t t = 0; t < w.cols(); ++t) sq += (w(i, t) - c(j, t)) * (w(i, t) - c(j, t));
      p += std::exp(-sq / (2 * var)) / std::pow(2 * std::numbers::pi * var, d / 2) / c.rows();
    }
    ll += std::log(p);
  }
  return ll;
}

}  // namespace

// ---------------------------------------------------------------------------
// Hard assignment
// ---------------------------------------------------------------------------

TEST(HardAttention, PicksNearestLowestIndexOnTies) {
  EXPECT_EQ(hard_attention(MatrixD{{-1, -4}}), (MatrixD{{1, 0}}));
  EXPECT_EQ(hard_attention(MatrixD{{-2, -2}}), (MatrixD{{1, 0}}));
  EXPECT_EQ(hard_attention(MatrixD{{-5, -2, -2}}), (MatrixD{{0, 1, 0}}));
}

TEST(HardAttention, MatchesLloydAssignmentStep) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixD w = random_matrix(25, 2, rng), c = random_matrix(4, 2, rng);
    TapeD tape;
    const auto dist = distance_matrix(tape.constant(w), tape.constant(c), Metric::kSquaredEuclidean).value();
    const auto one_hot = hard_attention(dist);
    const auto assign = nearest_centroids(w, c);
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < c.rows(); ++j) EXPECT_EQ(one_hot(i, j), assign[i] == j ? 1.0 : 0.0);
  }
}

TEST(HardAttention, IsTheZeroTemperatureLimit) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixD w = random_matrix(30, 1, rng), c = random_matrix(4, 1, rng);
    TapeD tape;
    const auto dist = distance_matrix(tape.constant(w), tape.constant(c), Metric::kSquaredEuclidean).value();
    std::vector<double> mags;
    for (double v : dist.data()) mags.push_back(std::abs(v));
    std::nth_element(mags.begin(), mags.begin() + mags.size() / 2, mags.end());
    const double tau = 1e-6 * mags[mags.size() / 2];
    const auto soft = ad::row_softmax(dist, tau);
    const auto hard = hard_attention(dist);
    for (std::size_t i = 0; i < dist.rows(); ++i) {
      std::vector<double> row(dist.row(i).begin(), dist.row(i).end());
      std::sort(row.rbegin(), row.rend());
      if (row[0] - row[1] <= 1e-9) continue;
      for (std::size_t j = 0; j < dist.cols(); ++j) EXPECT_NEAR(soft(i, j), hard(i, j), 1e-6);
    }
  }
}

TEST(HardForward, CentroidsFollowLloydIterations) {
  Rng rng(3);
  const MatrixD w = random_matrix(40, 1, rng);
  const MatrixD c0 = random_matrix(4, 1, rng);
  TapeD tape;
  const auto r = hard_forward(tape.constant(w), std::optional(Codebook<double>(c0, 2)),
                              make_config(2, 1, 1.0, 3, 0.0), 0);
  MatrixD c = c0;
  for (int it = 0; it < 3; ++it) c = cluster_means(w, nearest_centroids(w, c), c);
  EXPECT_EQ(r.codebook.centroids(), c);
  EXPECT_EQ(r.telemetry.iterations_used, 3);
}

TEST(HardForward, GradientOfCentroidGoesToEveryMember) {
  Rng rng(4);
  const MatrixD w0 = random_matrix(20, 1, rng);
  const MatrixD weights = random_matrix(20, 1, rng);
  TapeD tape;
  auto w = tape.variable(w0);
  auto r = hard_forward(w, std::optional<Codebook<double>>{}, make_config(2, 1, 1.0), 7);
  tape.backward(ad::sum(ad::mul(r.w_tilde, tape.constant(weights))));
  const auto assign = nearest_centroids(w0, r.codebook.centroids());
  std::vector<double> centroid_grad(4, 0.0);
  for (std::size_t i = 0; i < 20; ++i) centroid_grad[assign[i]] += weights[i];
  for (std::size_t i = 0; i < 20; ++i) EXPECT_DOUBLE_EQ(w.grad()[i], centroid_grad[assign[i]]);
}

TEST(HardForward, EmptyClusterPassesNoGradient) {
  TapeD tape;
  auto w = tape.variable(MatrixD{{0.0}, {0.1}, {5.0}, {5.1}});
  const Codebook<double> warm(MatrixD{{0.0}, {5.0}, {100.0}, {-100.0}}, 2);
  auto r = hard_forward(w, std::optional(warm), make_config(2, 1, 1.0, 2), 0);
  EXPECT_EQ(r.codebook.centroids()(2, 0), 100.0);
  auto centroid = shared_centroid_gradient(w, r.codebook.centroids(), {0, 0, 1, 1});
  tape.backward(ad::sum(centroid));
  // Each sub-vector receives exactly its own centroid's gradient (1 per element of the sum).
  EXPECT_EQ(w.grad(), (MatrixD{{1}, {1}, {1}, {1}}));
}

// ---------------------------------------------------------------------------
// Gumbel-softmax
// ---------------------------------------------------------------------------

TEST(GumbelAttention, RowsSumToOneForEveryDrawCount) {
  Rng rng(5);
  const MatrixD d = random_matrix(10, 4, rng, -3, 0);
  for (int draws : {1, 2, 5, 16, 64}) {
    const auto a = gumbel_attention(d, 0.5, 11, draws);
    for (std::size_t i = 0; i < a.rows(); ++i) EXPECT_NEAR(sum_of(a.row(i)), 1.0, 1e-6);
  }
}

TEST(GumbelAttention, ZeroTemperatureSamplesAreOneHot) {
  Rng rng(6);
  const MatrixD d = random_matrix(50, 4, rng, -2, 0);
  const auto a = gumbel_attention(d, 1e-9, 3, 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const std::size_t j = argmax(a.row(i));
    EXPECT_GE(a(i, j), 1 - 1e-6);
  }
}

TEST(GumbelAttention, MonteCarloMeanOfHardSamplesIsSoftmax) {
  // Gumbel-max: argmax(d + g) is distributed as softmax(d). Averaging hard
  // samples over 10^4 draws estimates softmax(d) at temperature 1.
  const MatrixD d{{-0.2, -1.0, -1.7, -0.5}, {0.0, -3.0, -0.1, -2.0}};
  const int draws = 10000;
  const auto mean = gumbel_attention(d, 1e-9, 42, draws);
  const auto target = ad::row_softmax(d, 1.0);
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t j = 0; j < d.cols(); ++j) {
      const double p = target(i, j);
      const double sigma = std::sqrt(p * (1 - p) / draws);
      EXPECT_NEAR(mean(i, j), p, 3 * sigma) << i << "," << j;
    }
}

TEST(GumbelAttention, MoreDrawsLowerVariance) {
  const MatrixD d{{-0.3, -0.6, -1.2, -0.1}};
  auto variance_of = [&](int draws) {
    std::vector<double> xs;
    for (std::uint64_t s = 0; s < 400; ++s) xs.push_back(gumbel_attention(d, 0.5, s, draws)(0, 0));
    const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    double v = 0;
    for (double x : xs) v += (x - m) * (x - m);
    return v / (xs.size() - 1);
  };
  EXPECT_LT(variance_of(16), variance_of(1));
}

TEST(GumbelAttention, RejectsBadParameters) {
  EXPECT_THROW(gumbel_attention(MatrixD{{0, 0}}, 0.0, 1, 1), Error);
  EXPECT_THROW(gumbel_attention(MatrixD{{0, 0}}, 1.0, 1, 0), Error);
}

TEST(GumbelForward, DeterministicAndDifferentiable) {
  Rng rng(7);
  const MatrixD w0 = random_matrix(24, 1, rng);
  auto run = [&] {
    TapeD tape;
    auto w = tape.variable(w0);
    auto r = gumbel_forward(w, std::optional<Codebook<double>>{}, make_config(2, 1, 0.05), 9, 4);
    tape.backward(ad::sum(ad::square(r.w_tilde)));
    return std::pair{r.w_tilde.value(), w.grad()};
  };
  const auto [a, ga] = run();
  const auto [b, gb] = run();
  EXPECT_EQ(a, b);
  EXPECT_EQ(ga, gb);
  EXPECT_TRUE(ga.all_finite());
}

// ---------------------------------------------------------------------------
// Lloyd
// ---------------------------------------------------------------------------

TEST(Lloyd, TwoObviousClusters) {
  const auto r = lloyd_kmeans(reshape_to_subvectors(std::vector<double>{0, 0, 10, 10}, 1), 2, 1);
  std::vector<double> c{r.centroids(0, 0), r.centroids(1, 0)};
  std::sort(c.begin(), c.end());
  EXPECT_EQ(c, (std::vector<double>{0, 10}));
  EXPECT_EQ(r.objective(), 0.0);
}

TEST(Lloyd, KEqualsNGivesZeroObjective) {
  Rng rng(8);
  const auto w = as_subvectors(random_matrix(7, 2, rng));
  EXPECT_EQ(lloyd_kmeans(w, 7, 3).objective(), 0.0);
}

TEST(Lloyd, InsufficientData) {
  const auto w = reshape_to_subvectors(std::vector<double>{1, 2}, 1);
  try {
    lloyd_kmeans(w, 3, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientData);
  }
}

TEST(Lloyd, ObjectiveNonIncreasing) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = as_subvectors(random_matrix(60, 2, rng));
    const auto r = lloyd_kmeans(w, 5, trial);
    for (std::size_t i = 1; i < r.objective_history.size(); ++i)
      EXPECT_LE(r.objective_history[i], r.objective_history[i - 1] + 1e-12);
  }
}

TEST(Lloyd, ContiguousOracleAgreesWithFullEnumeration) {
  Rng rng(10);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<double> x(10);
    for (auto& v : x) v = uniform_range(rng, -1, 1);
    EXPECT_NEAR(contiguous_objective(x, 3), exhaustive_objective(x, 3), 1e-12);
  }
}

TEST(Lloyd, MatchesExhaustiveOptimumOnTwentyPoints) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> x(20);
    for (auto& v : x) v = uniform_range(rng, -1, 1);
    const auto r = lloyd_kmeans(reshape_to_subvectors(x, 1), 3, trial);
    EXPECT_NEAR(r.objective(), contiguous_objective(x, 3), 1e-12) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------
// EM for the fixed-variance mixture
// ---------------------------------------------------------------------------

TEST(EmGmm, SingleCluster) {
  Rng rng(12);
  const MatrixD w = random_matrix(15, 2, rng);
  const auto s = em_gmm_step(w, GmmState{MatrixD{{0.3, -0.2}}, 0.4});
  for (double r : s.responsibilities.data()) EXPECT_EQ(r, 1.0);
  for (std::size_t t = 0; t < 2; ++t) {
    double mean = 0;
    for (std::size_t i = 0; i < 15; ++i) mean += w(i, t) / 15;
    EXPECT_NEAR(s.centers(0, t), mean, 1e-14);
  }
}

TEST(EmGmm, LogLikelihoodMatchesDirectDensity) {
  Rng rng(13);
  const MatrixD w = random_matrix(20, 3, rng), c = random_matrix(4, 3, rng);
  const double ll = gmm_log_likelihood(w, GmmState{c, 0.7});
  EXPECT_NEAR(ll, direct_log_likelihood(w, c, 0.7), 1e-9 * std::abs(ll));
}

TEST(EmGmm, ResponsibilitiesAndCentersMatchDkm) {
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixD w = random_matrix(40, 2, rng), c = random_matrix(8, 2, rng);
    const double tau = std::vector<double>{0.1, 0.5, 2.0}[trial % 3];
    const auto em = em_gmm_step(w, GmmState::from_temperature(c, tau));
    TapeD tape;
    auto wv = tape.constant(w), cv = tape.constant(c);
    auto a = attention(distance_matrix(wv, cv, Metric::kSquaredEuclidean), tau);
    auto next = centroid_update(a, wv, cv);
    EXPECT_LE(max_abs_difference(a.value(), em.responsibilities), 1e-10);
    EXPECT_LE(max_abs_difference(next.value(), em.centers), 1e-10);
  }
}

TEST(EmGmm, LogLikelihoodNonDecreasingOverTenSteps) {
  Rng rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixD w = random_matrix(50, 1, rng);
    GmmState state{random_matrix(4, 1, rng), 0.05};
    double prev = -std::numeric_limits<double>::infinity();
    for (int step = 0; step < 10; ++step) {
      const auto s = em_gmm_step(w, state);
      EXPECT_GE(s.log_likelihood, prev - 1e-9);
      prev = s.log_likelihood;
      state.centers = s.centers;
    }
  }
}

TEST(EmGmm, SurvivesTinyVariance) {
  Rng rng(16);
  const MatrixD w = random_matrix(30, 2, rng);
  const auto s = em_gmm_step(w, GmmState::from_temperature(random_matrix(4, 2, rng), 8e-6));
  EXPECT_TRUE(s.responsibilities.all_finite());
  EXPECT_TRUE(std::isfinite(s.log_likelihood));
  EXPECT_THROW(em_gmm_step(w, GmmState{MatrixD(4, 2), 0.0}), Error);
}
