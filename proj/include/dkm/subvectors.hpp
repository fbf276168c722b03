#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dkm/error.hpp"
#include "dkm/matrix.hpp"

namespace dkm {

/// A flat weight vector viewed as ceil(N/d) contiguous d-dimensional rows.
/// The last row is zero-padded when d does not divide N.
template <typename T>
struct SubvectorMatrix {
  Matrix<T> values;
  std::size_t original_length = 0;
  std::size_t pad_count = 0;

  std::size_t count() const noexcept { return values.rows(); }
  std::size_t dim() const noexcept { return values.cols(); }

  /// The original N weights, padding dropped.
  std::vector<T> flatten() const {
    return {values.data().begin(),
            values.data().begin() + static_cast<std::ptrdiff_t>(original_length)};
  }
};

template <typename T>
SubvectorMatrix<T> reshape_to_subvectors(std::span<const T> flat, std::size_t dim) {
  require(dim >= 1, ErrorCode::kParameter, "reshape_to_subvectors: dim must be >= 1");
  require(!flat.empty(), ErrorCode::kParameter, "reshape_to_subvectors: empty weight vector");
  const std::size_t count = (flat.size() + dim - 1) / dim;
  std::vector<T> data(count * dim, T{0});
  std::copy(flat.begin(), flat.end(), data.begin());
  return {Matrix<T>(count, dim, std::move(data)), flat.size(), count * dim - flat.size()};
}

template <typename T>
SubvectorMatrix<T> reshape_to_subvectors(const std::vector<T>& flat, std::size_t dim) {
  return reshape_to_subvectors(std::span<const T>(flat), dim);
}

/// Wraps an already-shaped (count x d) matrix with no padding.
template <typename T>
SubvectorMatrix<T> as_subvectors(Matrix<T> values) {
  const std::size_t n = values.size();
  return {std::move(values), n, 0};
}

}  // namespace dkm
