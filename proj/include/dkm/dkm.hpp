#pragma once

// Differentiable k-means (DKM) clustering layer.
//
// Each iteration computes negative distances between weight sub-vectors and
// centroids, turns them into a row-stochastic attention matrix with a
// temperature softmax, and replaces the centroids by attention-weighted means.
// The loop is recorded on the autodiff tape, so gradients of the compressed
// weights W~ = A C reach the raw weights through every executed iteration.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dkm/autodiff.hpp"
#include "dkm/error.hpp"
#include "dkm/matrix.hpp"
#include "dkm/random.hpp"
#include "dkm/subvectors.hpp"

namespace dkm {

enum class Metric { kSquaredEuclidean, kEuclidean };
enum class InitMethod { kRandomSample, kKmeansPlusPlus };

inline std::string_view to_string(Metric m) {
  return m == Metric::kSquaredEuclidean ? "squared_euclidean" : "euclidean";
}
inline std::string_view to_string(InitMethod m) {
  return m == InitMethod::kRandomSample ? "random_sample" : "kmeans_pp";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "squared_euclidean" || s == "squared") return Metric::kSquaredEuclidean;
  if (s == "euclidean") return Metric::kEuclidean;
  fail(ErrorCode::kParameter, "unknown metric '" + std::string(s) + "'");
}

inline InitMethod parse_init(std::string_view s) {
  if (s == "random_sample" || s == "random") return InitMethod::kRandomSample;
  if (s == "kmeans_pp" || s == "kmeans++") return InitMethod::kKmeansPlusPlus;
  fail(ErrorCode::kParameter, "unknown init method '" + std::string(s) + "'");
}

/// Underflow threshold below which a cluster counts as empty.
inline constexpr double kEmptyClusterMass = 1e-30;

struct DkmConfig {
  int bits = 2;               // k = 2^bits clusters
  int dim = 1;                // sub-vector dimension d
  double temperature = 1.0;   // softmax temperature tau
  double epsilon = 1e-4;      // exit when |C - C~|_F <= epsilon; 0 runs max_iterations
  int max_iterations = 5;
  Metric metric = Metric::kSquaredEuclidean;
  InitMethod init = InitMethod::kKmeansPlusPlus;
  bool record_trajectory = false;  // keep every iterate of C in the result

  std::size_t clusters() const { return std::size_t{1} << bits; }

  void validate() const {
    require(bits >= 1 && bits <= 16, ErrorCode::kParameter,
            "bits must be in [1, 16], got " + std::to_string(bits));
    require(dim >= 1, ErrorCode::kParameter, "dim must be >= 1");
    require(temperature > 0 && std::isfinite(temperature), ErrorCode::kParameter,
            "temperature must be a positive finite number");
    require(epsilon >= 0 && std::isfinite(epsilon), ErrorCode::kParameter,
            "epsilon must be >= 0");
    require(max_iterations >= 1, ErrorCode::kParameter, "max_iterations must be >= 1");
  }
};

/// 2^b centroids of dimension d.
template <typename T>
class Codebook {
 public:
  Codebook() = default;
  Codebook(Matrix<T> centroids, int bits) : centroids_(std::move(centroids)), bits_(bits) {
    require(bits >= 1 && bits <= 16, ErrorCode::kParameter, "codebook bits out of range");
    require(centroids_.rows() == (std::size_t{1} << bits), ErrorCode::kDimension,
            "codebook must have exactly 2^bits rows");
    require(centroids_.all_finite(), ErrorCode::kNumeric, "codebook has non-finite entries");
  }

  const Matrix<T>& centroids() const noexcept { return centroids_; }
  int bits() const noexcept { return bits_; }
  std::size_t size() const noexcept { return centroids_.rows(); }
  std::size_t dim() const noexcept { return centroids_.cols(); }

  friend bool operator==(const Codebook&, const Codebook&) = default;

 private:
  Matrix<T> centroids_;
  int bits_ = 0;
};

/// Row-stochastic soft assignment matrix (count x 2^b).
template <typename T>
class AttentionMatrix {
 public:
  AttentionMatrix() = default;

  static AttentionMatrix checked(Matrix<T> values) {
    const double tol = 1e-6;
    for (std::size_t i = 0; i < values.rows(); ++i) {
      double total = 0;
      for (T v : values.row(i)) {
        require(v >= T{0} && v <= T{1}, ErrorCode::kNumeric, "attention entry outside [0, 1]");
        total += static_cast<double>(v);
      }
      require(std::abs(total - 1.0) <= tol, ErrorCode::kNumeric,
              "attention row " + std::to_string(i) + " does not sum to 1");
    }
    AttentionMatrix a;
    a.values_ = std::move(values);
    return a;
  }

  const Matrix<T>& values() const noexcept { return values_; }
  std::size_t rows() const noexcept { return values_.rows(); }
  std::size_t cols() const noexcept { return values_.cols(); }

 private:
  Matrix<T> values_;
};

struct DkmTelemetry {
  int iterations_used = 0;
  double final_delta = 0;  // |C - C~|_F at the last executed iteration
  bool converged = false;
  std::vector<double> deltas;
};

template <typename T>
struct DkmResult {
  ad::Var<T> w_tilde;    // (count x d), A C on the tape
  ad::Var<T> attention;  // attention against the final codebook
  Codebook<T> codebook;  // final centroids, detached; next batch's warm start
  DkmTelemetry telemetry;
  std::vector<Matrix<T>> trajectory;  // C_0, C_1, ... when record_trajectory is set
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// k-means++ seeding: first center uniform, each further center drawn with
/// probability proportional to its squared distance to the nearest chosen one.
template <typename T>
Matrix<T> kmeans_pp_seeds(const Matrix<T>& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows(), dim = points.cols();
  require(n >= k && k >= 1, ErrorCode::kInsufficientData,
          "kmeans_pp_seeds: need at least " + std::to_string(k) + " points, got " +
              std::to_string(n));
  Matrix<T> c(k, dim);
  std::vector<double> d2(n);
  std::vector<bool> chosen(n, false);
  auto take = [&](std::size_t m, std::size_t src) {
    for (std::size_t j = 0; j < dim; ++j) c(m, j) = points(src, j);
    chosen[src] = true;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double diff = static_cast<double>(points(i, j)) - static_cast<double>(c(m, j));
        acc += diff * diff;
      }
      d2[i] = m == 0 ? acc : std::min(d2[i], acc);
    }
  };
  take(0, uniform_index(rng, n));
  for (std::size_t m = 1; m < k; ++m) {
    double total = 0;
    for (double v : d2) total += v;
    std::size_t pick = n;
    if (total > 0) {
      const double target = uniform01(rng) * total;
      double cumulative = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0) continue;
        cumulative += d2[i];
        pick = i;
        if (cumulative > target) break;
      }
    } else {
      // Fewer distinct points than clusters: uniform over the unchosen indices.
      std::size_t r = uniform_index(rng, n - m);
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i]) continue;
        if (r-- == 0) {
          pick = i;
          break;
        }
      }
    }
    take(m, pick);
  }
  return c;
}

template <typename T>
Codebook<T> init_centroids(const SubvectorMatrix<T>& w, const DkmConfig& config,
                           std::uint64_t seed) {
  config.validate();
  const std::size_t k = config.clusters();
  const std::size_t n = w.count();
  require(w.dim() == static_cast<std::size_t>(config.dim), ErrorCode::kDimension,
          "init_centroids: sub-vector dim differs from config dim");
  require(n >= k, ErrorCode::kInsufficientData,
          "init_centroids: need at least " + std::to_string(k) + " sub-vectors, got " +
              std::to_string(n));
  Rng rng(seed);
  Matrix<T> c(k, w.dim());
  auto copy_row = [&](std::size_t dst, std::size_t src) {
    for (std::size_t j = 0; j < w.dim(); ++j) c(dst, j) = w.values(src, j);
  };

  if (config.init == InitMethod::kRandomSample) {
    // Partial Fisher-Yates: k distinct indices in draw order.
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t m = 0; m < k; ++m) {
      const std::size_t pick = m + uniform_index(rng, n - m);
      std::swap(idx[m], idx[pick]);
      copy_row(m, idx[m]);
    }
    return Codebook<T>(std::move(c), config.bits);
  }

  return Codebook<T>(kmeans_pp_seeds(w.values, k, rng), config.bits);
}

// ---------------------------------------------------------------------------
// One clustering iteration
// ---------------------------------------------------------------------------

/// d_ij = -f(w_i, c_j) for the selected metric.
template <typename T>
ad::Var<T> distance_matrix(ad::Var<T> w, ad::Var<T> c, Metric metric) {
  auto sq = ad::pairwise_sq_dist(w, c);
  if (metric == Metric::kEuclidean) sq = ad::sqrt(sq);
  return ad::scalar_mul(sq, T{-1});
}

template <typename T>
ad::Var<T> attention(ad::Var<T> dist, T temperature) {
  return ad::row_softmax(dist, temperature);
}

/// Attention-weighted means of the sub-vectors. Clusters whose attention mass
/// falls below kEmptyClusterMass keep their row of `previous`.
template <typename T>
ad::Var<T> centroid_update(ad::Var<T> a, ad::Var<T> w, ad::Var<T> previous) {
  require(a.rows() == w.rows(), ErrorCode::kDimension,
          "centroid_update: attention rows differ from sub-vector count");
  require(previous.rows() == a.cols() && previous.cols() == w.cols(), ErrorCode::kDimension,
          "centroid_update: previous codebook has wrong shape");
  auto& tape = a.tape();
  const std::size_t k = a.cols(), d = w.cols();
  auto numerator = ad::matmul(ad::transpose(a), w);     // k x d
  auto mass = ad::transpose(ad::sum_cols(a));           // k x 1

  Matrix<T> empty(k, 1);
  bool any_empty = false;
  for (std::size_t j = 0; j < k; ++j) {
    if (static_cast<double>(mass.value()[j]) < kEmptyClusterMass) {
      empty[j] = T{1};
      any_empty = true;
    }
  }
  if (!any_empty) return ad::div(numerator, ad::broadcast_col(mass, d));

  auto safe_mass = ad::add(mass, tape.constant(empty));
  auto candidate = ad::div(numerator, ad::broadcast_col(safe_mass, d));
  Matrix<T> keep_mask(k, d), prev_mask(k, d);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t c = 0; c < d; ++c) {
      keep_mask(j, c) = T{1} - empty[j];
      prev_mask(j, c) = empty[j];
    }
  }
  return ad::add(ad::mul(candidate, tape.constant(std::move(keep_mask))),
                 ad::mul(previous, tape.constant(std::move(prev_mask))));
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

/// Runs the clustering loop with a caller-supplied attention rule
/// `attend(dist, iteration) -> Var`. `iteration` counts from 0; the final
/// recomputation against the converged codebook receives iterations_used.
template <typename T, typename AttendFn>
DkmResult<T> dkm_forward_with(ad::Var<T> w, const std::optional<Codebook<std::type_identity_t<T>>>& warm_start,
                              const DkmConfig& config, std::uint64_t seed, AttendFn&& attend) {
  config.validate();
  auto& tape = w.tape();
  require(w.cols() == static_cast<std::size_t>(config.dim), ErrorCode::kDimension,
          "dkm_forward: sub-vector dim differs from config dim");

  Codebook<T> start;
  if (warm_start) {
    require(warm_start->size() == config.clusters() &&
                warm_start->dim() == static_cast<std::size_t>(config.dim),
            ErrorCode::kDimension, "dkm_forward: warm-start codebook has wrong shape");
    start = *warm_start;
  } else {
    start = init_centroids(as_subvectors(w.value()), config, seed);
  }

  DkmResult<T> result;
  if (config.record_trajectory) result.trajectory.push_back(start.centroids());
  auto c = tape.constant(start.centroids());

  for (int it = 0; it < config.max_iterations; ++it) {
    auto dist = distance_matrix(w, c, config.metric);
    auto a = attend(dist, it);
    auto candidate = centroid_update(a, w, c);
    require(a.value().all_finite() && candidate.value().all_finite(), ErrorCode::kNumeric,
            "dkm_forward: non-finite values at iteration " + std::to_string(it + 1));
    const double delta = static_cast<double>(frobenius_distance(c.value(), candidate.value()));
    c = candidate;
    result.telemetry.iterations_used = it + 1;
    result.telemetry.final_delta = delta;
    result.telemetry.deltas.push_back(delta);
    if (config.record_trajectory) result.trajectory.push_back(c.value());
    if (delta <= config.epsilon) {
      result.telemetry.converged = true;
      break;
    }
  }

  auto dist = distance_matrix(w, c, config.metric);
  result.attention = attend(dist, result.telemetry.iterations_used);
  require(result.attention.value().all_finite(), ErrorCode::kNumeric,
          "dkm_forward: non-finite attention after the final iteration");
  result.w_tilde = ad::matmul(result.attention, c);
  result.codebook = Codebook<T>(c.value(), config.bits);
  return result;
}

template <typename T>
DkmResult<T> dkm_forward(ad::Var<T> w, const std::optional<Codebook<std::type_identity_t<T>>>& warm_start,
                         const DkmConfig& config, std::uint64_t seed) {
  const T tau = static_cast<T>(config.temperature);
  return dkm_forward_with(w, warm_start, config, seed,
                          [tau](ad::Var<T> dist, int) { return attention(dist, tau); });
}

/// Value-only clustering result (no gradients needed).
template <typename T>
struct ClusterResult {
  Matrix<T> w_tilde;
  AttentionMatrix<T> attention;
  Codebook<T> codebook;
  DkmTelemetry telemetry;
  std::vector<Matrix<T>> trajectory;
};

template <typename T>
ClusterResult<T> dkm_cluster(const SubvectorMatrix<T>& w,
                             const std::optional<Codebook<std::type_identity_t<T>>>& warm_start, const DkmConfig& config,
                             std::uint64_t seed) {
  ad::Tape<T> tape;
  auto wv = tape.constant(w.values);
  auto r = dkm_forward(wv, warm_start, config, seed);
  return {r.w_tilde.value(), AttentionMatrix<T>::checked(r.attention.value()), r.codebook,
          r.telemetry, std::move(r.trajectory)};
}

// ---------------------------------------------------------------------------
// Gradient check through the unrolled loop
// ---------------------------------------------------------------------------

struct GradientCheckOptions {
  double step = 1e-6;  // central-difference step
  /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-4;
  /// Rows whose attention peaks above 1 - saturation at any iteration are
  /// excluded from the comparison. 0 disables the mask.
  double saturation = 0.0;
};

struct GradientCheckReport {
  double max_relative_error = 0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
};

/// Compares autodiff gradients of |W~ - T|^2 (T a fixed random target) with
/// central finite differences. epsilon is forced to 0 so every evaluation
/// unrolls exactly max_iterations iterations from the same initial codebook.
inline GradientCheckReport dkm_gradient_check(const SubvectorMatrix<double>& w, DkmConfig config,
                                              std::uint64_t seed,
                                              const GradientCheckOptions& options = {}) {
  config.epsilon = 0.0;
  config.record_trajectory = false;
  const auto start = init_centroids(w, config, seed);

  Rng rng(derive_seed(seed, 0x7a79));
  Matrix<double> target(w.count(), w.dim());
  for (auto& v : target.data()) v = uniform_range(rng, -1.0, 1.0);

  auto loss_of = [&](const Matrix<double>& values, ad::Tape<double>& tape,
                     std::vector<Matrix<double>>* attentions) {
    auto wv = tape.variable(values);
    const double tau = config.temperature;
    auto result = dkm_forward_with(wv, std::optional(start), config, seed,
                                   [&](ad::Var<double> dist, int) {
                                     auto a = attention(dist, tau);
                                     if (attentions) attentions->push_back(a.value());
                                     return a;
                                   });
    auto diff = ad::sub(result.w_tilde, tape.constant(target));
    return std::pair{wv, ad::sum(ad::square(diff))};
  };

  ad::Tape<double> tape;
  std::vector<Matrix<double>> attentions;
  auto [wv, loss] = loss_of(w.values, tape, &attentions);
  tape.backward(loss);
  const Matrix<double> analytic = wv.grad();

  std::vector<bool> masked(w.count(), false);
  if (options.saturation > 0) {
    for (const auto& a : attentions)
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (double v : a.row(i))
          if (v > 1.0 - options.saturation) masked[i] = true;
  }

  GradientCheckReport report;
  Matrix<double> probe = w.values;
  for (std::size_t i = 0; i < w.count(); ++i) {
    for (std::size_t j = 0; j < w.dim(); ++j) {
      if (masked[i]) {
        ++report.excluded;
        continue;
      }
      const double original = probe(i, j);
      probe(i, j) = original + options.step;
      ad::Tape<double> tp;
      const double up = loss_of(probe, tp, nullptr).second.value()[0];
      probe(i, j) = original - options.step;
      ad::Tape<double> tm;
      const double down = loss_of(probe, tm, nullptr).second.value()[0];
      probe(i, j) = original;
      const double numeric = (up - down) / (2 * options.step);
      const double a = analytic(i, j);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      report.max_relative_error = std::max(report.max_relative_error, std::abs(a - numeric) / denom);
      ++report.checked;
    }
  }
  return report;
}

}  // namespace dkm
