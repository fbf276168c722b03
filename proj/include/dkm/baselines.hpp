#pragma once

// Reference and ablation clustering schemes: hard assignment with a shared
// centroid gradient, Gumbel-softmax attention, Lloyd's k-means and the EM
// algorithm for an isotropic Gaussian mixture with fixed variance.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "dkm/autodiff.hpp"
#include "dkm/dkm.hpp"
#include "dkm/random.hpp"

namespace dkm {

// ---------------------------------------------------------------------------
// Hard assignment
// ---------------------------------------------------------------------------

/// One-hot rows at the largest entry of `dist` (the nearest centroid, since
/// dist holds negated distances). Lowest index wins ties.
template <typename T>
Matrix<T> hard_attention(const Matrix<T>& dist) {
  Matrix<T> out(dist.rows(), dist.cols());
  for (std::size_t i = 0; i < dist.rows(); ++i) out(i, argmax(dist.row(i))) = T{1};
  return out;
}

template <typename T>
std::vector<std::size_t> nearest_centroids(const Matrix<T>& points, const Matrix<T>& centroids) {
  std::vector<std::size_t> out(points.rows());
  for (std::size_t i = 0; i < points.rows(); ++i) {
    T best = std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < centroids.rows(); ++j) {
      T acc{0};
      for (std::size_t c = 0; c < points.cols(); ++c) {
        const T diff = points(i, c) - centroids(j, c);
        acc += diff * diff;
      }
      if (acc < best) {
        best = acc;
        out[i] = j;
      }
    }
  }
  return out;
}

/// Per-cluster means of `points`; empty clusters keep their row of `previous`.
template <typename T>
Matrix<T> cluster_means(const Matrix<T>& points, std::span<const std::size_t> assignment,
                        const Matrix<T>& previous) {
  Matrix<T> sums(previous.rows(), previous.cols());
  std::vector<std::size_t> counts(previous.rows(), 0);
  for (std::size_t i = 0; i < points.rows(); ++i) {
    ++counts[assignment[i]];
    for (std::size_t c = 0; c < points.cols(); ++c) sums(assignment[i], c) += points(i, c);
  }
  for (std::size_t j = 0; j < previous.rows(); ++j)
    for (std::size_t c = 0; c < previous.cols(); ++c)
      sums(j, c) = counts[j] ? sums(j, c) / static_cast<T>(counts[j]) : previous(j, c);
  return sums;
}

/// Centroid node whose value is `centroids` and whose gradient is handed back
/// to every member sub-vector: d/dw_i receives the full gradient of centroid
/// assignment[i]. Clusters without members pass nothing back.
template <typename T>
ad::Var<T> shared_centroid_gradient(ad::Var<T> w, Matrix<T> centroids,
                                    std::vector<std::size_t> assignment) {
  const std::size_t iw = w.id();
  return w.tape().record(std::move(centroids), {iw},
                         [iw, assignment = std::move(assignment)](ad::Tape<T>& t, std::size_t s) {
                           const auto& g = t.output_grad(s);
                           const auto& wv = t.value(iw);
                           Matrix<T> gw(wv.rows(), wv.cols());
                           for (std::size_t i = 0; i < assignment.size(); ++i)
                             for (std::size_t c = 0; c < wv.cols(); ++c)
                               gw(i, c) = g(assignment[i], c);
                           t.accumulate(iw, gw);
                         });
}

/// Hard-assignment clustering with the same loop structure, convergence rule
/// and warm start as dkm_forward. W~ row i is the centroid of its cluster.
template <typename T>
DkmResult<T> hard_forward(ad::Var<T> w, const std::optional<Codebook<std::type_identity_t<T>>>& warm_start,
                          const DkmConfig& config, std::uint64_t seed) {
  config.validate();
  auto& tape = w.tape();
  const auto& points = w.value();
  Matrix<T> c = warm_start ? warm_start->centroids()
                           : init_centroids(as_subvectors(points), config, seed).centroids();
  require(c.rows() == config.clusters() && c.cols() == points.cols(), ErrorCode::kDimension,
          "hard_forward: warm-start codebook has wrong shape");

  DkmResult<T> result;
  if (config.record_trajectory) result.trajectory.push_back(c);
  for (int it = 0; it < config.max_iterations; ++it) {
    const auto assignment = nearest_centroids(points, c);
    Matrix<T> next = cluster_means(points, assignment, c);
    const double delta = static_cast<double>(frobenius_distance(c, next));
    c = std::move(next);
    result.telemetry.iterations_used = it + 1;
    result.telemetry.final_delta = delta;
    result.telemetry.deltas.push_back(delta);
    if (config.record_trajectory) result.trajectory.push_back(c);
    if (delta <= config.epsilon) {
      result.telemetry.converged = true;
      break;
    }
  }
  auto assignment = nearest_centroids(points, c);
  Matrix<T> one_hot(points.rows(), c.rows());
  for (std::size_t i = 0; i < assignment.size(); ++i) one_hot(i, assignment[i]) = T{1};
  result.attention = tape.constant(std::move(one_hot));
  auto centroid_node = shared_centroid_gradient(w, c, assignment);
  result.w_tilde = ad::gather_rows(centroid_node, std::span<const std::size_t>(assignment));
  result.codebook = Codebook<T>(std::move(c), config.bits);
  return result;
}

// ---------------------------------------------------------------------------
// Gumbel-softmax attention
// ---------------------------------------------------------------------------

/// Standard Gumbel noise by inverse CDF, -ln(-ln u).
template <typename T>
Matrix<T> gumbel_noise(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix<T> g(rows, cols);
  for (auto& v : g.data()) v = static_cast<T>(-std::log(-std::log(uniform_open01(rng))));
  return g;
}

/// Mean over `draws` independent samples of softmax((dist + g) / tau).
template <typename T>
ad::Var<T> gumbel_attention(ad::Var<T> dist, T temperature, std::uint64_t seed, int draws) {
  require(temperature > T{0}, ErrorCode::kParameter, "gumbel_attention: temperature must be > 0");
  require(draws >= 1, ErrorCode::kParameter, "gumbel_attention: draws must be >= 1");
  auto& tape = dist.tape();
  Rng rng(seed);
  ad::Var<T> total;
  for (int s = 0; s < draws; ++s) {
    auto noisy = ad::add(dist, tape.constant(gumbel_noise<T>(dist.rows(), dist.cols(), rng)));
    auto sample = ad::row_softmax(noisy, temperature);
    total = s == 0 ? sample : ad::add(total, sample);
  }
  return draws == 1 ? total : ad::scalar_mul(total, T{1} / static_cast<T>(draws));
}

template <typename T>
Matrix<T> gumbel_attention(const Matrix<T>& dist, T temperature, std::uint64_t seed, int draws) {
  ad::Tape<T> tape;
  return gumbel_attention(tape.constant(dist), temperature, seed, draws).value();
}

/// DKM loop with Gumbel-softmax attention; iteration i draws from seed stream i.
template <typename T>
DkmResult<T> gumbel_forward(ad::Var<T> w, const std::optional<Codebook<std::type_identity_t<T>>>& warm_start,
                            const DkmConfig& config, std::uint64_t seed, int draws) {
  const T tau = static_cast<T>(config.temperature);
  return dkm_forward_with(w, warm_start, config, seed, [=](ad::Var<T> dist, int iteration) {
    return gumbel_attention(dist, tau, derive_seed(seed, 0x6b, static_cast<std::uint64_t>(iteration)),
                            draws);
  });
}

// ---------------------------------------------------------------------------
// Lloyd's k-means
// ---------------------------------------------------------------------------

struct LloydResult {
  Matrix<double> centroids;
  std::vector<std::size_t> assignments;
  std::vector<double> objective_history;  // sum of squared distances after each iteration
  int iterations = 0;

  double objective() const { return objective_history.empty() ? 0.0 : objective_history.back(); }
};

inline double kmeans_objective(const Matrix<double>& points, const Matrix<double>& centroids,
                               std::span<const std::size_t> assignment) {
  double total = 0;
  for (std::size_t i = 0; i < points.rows(); ++i)
    for (std::size_t c = 0; c < points.cols(); ++c) {
      const double diff = points(i, c) - centroids(assignment[i], c);
      total += diff * diff;
    }
  return total;
}

/// Lloyd iterations from k-means++ seeds, until assignments stop changing or
/// max_iter is reached. With restarts > 1 the seeding is repeated from derived
/// seeds and the run with the lowest final objective is kept (first on ties).
inline LloydResult lloyd_kmeans(const SubvectorMatrix<double>& w, std::size_t k,
                                std::uint64_t seed, int max_iter = 100, int restarts = 10) {
  require(k >= 1, ErrorCode::kParameter, "lloyd_kmeans: k must be >= 1");
  require(restarts >= 1, ErrorCode::kParameter, "lloyd_kmeans: restarts must be >= 1");
  require(w.count() >= k, ErrorCode::kInsufficientData,
          "lloyd_kmeans: need at least " + std::to_string(k) + " points, got " +
              std::to_string(w.count()));
  LloydResult best;
  for (int attempt = 0; attempt < restarts; ++attempt) {
    Rng rng(attempt == 0 ? seed : derive_seed(seed, 0x11d, static_cast<std::uint64_t>(attempt)));
    LloydResult r;
    r.centroids = kmeans_pp_seeds(w.values, k, rng);
    std::vector<std::size_t> previous;
    for (int it = 0; it < max_iter; ++it) {
      auto assignment = nearest_centroids(w.values, r.centroids);
      if (assignment == previous) break;
      r.centroids = cluster_means(w.values, assignment, r.centroids);
      r.objective_history.push_back(kmeans_objective(w.values, r.centroids, assignment));
      r.iterations = it + 1;
      previous = std::move(assignment);
    }
    r.assignments = std::move(previous);
    if (attempt == 0 || r.objective() < best.objective()) best = std::move(r);
  }
  return best;
}

// ---------------------------------------------------------------------------
// EM for a uniform-weight isotropic Gaussian mixture with fixed variance
// ---------------------------------------------------------------------------

struct GmmState {
  Matrix<double> centers;  // k x d
  double variance = 1.0;   // sigma^2, shared and fixed

  /// The mixture matching DKM at temperature tau: sigma^2 = tau / 2.
  static GmmState from_temperature(Matrix<double> centers, double temperature) {
    return {std::move(centers), temperature / 2.0};
  }
};

struct EmStep {
  Matrix<double> responsibilities;  // n x k
  Matrix<double> centers;           // updated centers (M step)
  double log_likelihood = 0;        // ln P(W | C) at the input centers
};

inline EmStep em_gmm_step(const Matrix<double>& w, const GmmState& state) {
  require(state.variance > 0, ErrorCode::kParameter, "em_gmm_step: variance must be > 0");
  require(w.cols() == state.centers.cols(), ErrorCode::kDimension,
          "em_gmm_step: dimension mismatch");
  const std::size_t n = w.rows(), k = state.centers.rows(), d = w.cols();
  const double log_norm = -0.5 * static_cast<double>(d) *
                          std::log(2.0 * std::numbers::pi * state.variance);
  const double log_mix = -std::log(static_cast<double>(k));

  EmStep out{Matrix<double>(n, k), Matrix<double>(k, d), 0.0};
  std::vector<double> log_joint(k);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      double sq = 0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = w(i, c) - state.centers(j, c);
        sq += diff * diff;
      }
      log_joint[j] = log_mix + log_norm - sq / (2.0 * state.variance);
      mx = std::max(mx, log_joint[j]);
    }
    double acc = 0;
    for (double v : log_joint) acc += std::exp(v - mx);
    const double log_px = mx + std::log(acc);
    out.log_likelihood += log_px;
    for (std::size_t j = 0; j < k; ++j) out.responsibilities(i, j) = std::exp(log_joint[j] - log_px);
  }

  for (std::size_t j = 0; j < k; ++j) {
    double mass = 0;
    for (std::size_t i = 0; i < n; ++i) mass += out.responsibilities(i, j);
    for (std::size_t c = 0; c < d; ++c) {
      if (mass < kEmptyClusterMass) {
        out.centers(j, c) = state.centers(j, c);
        continue;
      }
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += out.responsibilities(i, j) * w(i, c);
      out.centers(j, c) = acc / mass;
    }
  }
  return out;
}

inline double gmm_log_likelihood(const Matrix<double>& w, const GmmState& state) {
  return em_gmm_step(w, state).log_likelihood;
}

}  // namespace dkm
