#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "dkm/autodiff.hpp"
#include "dkm/matrix.hpp"
#include "dkm/random.hpp"

namespace dkm::testing {

inline MatrixD random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = -2.0,
                             double hi = 2.0) {
  MatrixD m(rows, cols);
  for (auto& v : m.data()) v = uniform_range(rng, lo, hi);
  return m;
}

using ScalarFn = std::function<ad::Var<double>(ad::Tape<double>&, ad::Var<double>)>;

struct GradientComparison {
  MatrixD analytic;
  MatrixD numeric;

  double max_relative_error(double floor = 1e-8) const {
    double worst = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double a = analytic[i], n = numeric[i];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
    }
    return worst;
  }
};

// Central finite differences of a scalar-valued tape function, evaluated on
// fresh tapes, against the reverse sweep.
inline GradientComparison compare_gradients(const ScalarFn& f, const MatrixD& x, double h = 1e-6) {
  GradientComparison out;
  {
    ad::Tape<double> tape;
    auto v = tape.variable(x);
    tape.backward(f(tape, v));
    out.analytic = v.grad();
  }
  out.numeric = MatrixD(x.rows(), x.cols());
  MatrixD probe = x;
  auto eval = [&] {
    ad::Tape<double> tape;
    return f(tape, tape.variable(probe)).value()[0];
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = eval();
    probe[i] = orig - h;
    const double down = eval();
    probe[i] = orig;
    out.numeric[i] = (up - down) / (2 * h);
  }
  return out;
}

}  // namespace dkm::testing
