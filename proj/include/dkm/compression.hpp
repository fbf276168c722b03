#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "dkm/dkm.hpp"
#include "dkm/subvectors.hpp"

namespace dkm {

// ---------------------------------------------------------------------------
// Snapping
// ---------------------------------------------------------------------------

template <typename T>
struct SnapResult {
  std::vector<std::uint32_t> indices;
  SubvectorMatrix<T> reconstructed;
};

/// Replaces every sub-vector by the centroid with the largest attention.
template <typename T>
SnapResult<T> snap(const SubvectorMatrix<T>& w, const AttentionMatrix<T>& a, const Codebook<T>& c) {
  require(a.rows() == w.count() && a.cols() == c.size() && c.dim() == w.dim(),
          ErrorCode::kDimension, "snap: shapes of weights, attention and codebook disagree");
  SnapResult<T> out;
  out.indices.resize(w.count());
  out.reconstructed = {Matrix<T>(w.count(), w.dim()), w.original_length, w.pad_count};
  for (std::size_t i = 0; i < w.count(); ++i) {
    const std::size_t j = argmax(a.values().row(i));
    out.indices[i] = static_cast<std::uint32_t>(j);
    for (std::size_t col = 0; col < w.dim(); ++col)
      out.reconstructed.values(i, col) = c.centroids()(j, col);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Size and entropy accounting
// ---------------------------------------------------------------------------

/// d * 32 / b: size reduction over 32-bit weights, codebook excluded.
double compression_ratio(int bits, int dim);

/// b / d.
double effective_bits_per_weight(int bits, int dim);

/// Shannon entropy (bits) of the empirical index histogram.
double empirical_entropy(std::span<const std::uint32_t> indices, int bits);

// ---------------------------------------------------------------------------
// .dkmz format
//
//   offset size  field
//   0      4     magic "DKMZ"
//   4      2     version (uint16, = 1)
//   6      1     bits b
//   7      1     reserved, 0
//   8      4     dim d (uint32)
//   12     8     original length N (uint64)
//   20     4     pad count (uint32)
//   24     2^b*d*4   codebook, float32, row-major
//   ...    ceil(ceil(N/d)*b/8)  indices, b bits each, LSB-first
//
// All integers and floats are little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderSize = 24;

struct CompressedLayer {
  int bits = 0;
  int dim = 0;
  std::uint64_t original_length = 0;
  std::uint32_t pad_count = 0;
  std::vector<float> codebook;  // 2^b x d, row-major
  std::vector<std::uint32_t> indices;

  std::size_t count() const { return indices.size(); }
  friend bool operator==(const CompressedLayer&, const CompressedLayer&) = default;
};

/// Closed-form serialized size in bytes for a layer of N weights.
std::size_t serialized_size(int bits, int dim, std::uint64_t original_length);

std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> indices, int bits);
std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t count,
                                          int bits);

std::vector<std::uint8_t> serialize(const CompressedLayer& layer);
CompressedLayer deserialize(std::span<const std::uint8_t> bytes);

void write_dkmz(const std::filesystem::path& path, const CompressedLayer& layer);
CompressedLayer read_dkmz(const std::filesystem::path& path);

/// The N reconstructed weights, padding dropped.
std::vector<float> decompress(const CompressedLayer& layer);

template <typename T>
CompressedLayer make_compressed_layer(const SnapResult<T>& snapped, const Codebook<T>& codebook) {
  CompressedLayer layer;
  layer.bits = codebook.bits();
  layer.dim = static_cast<int>(codebook.dim());
  layer.original_length = snapped.reconstructed.original_length;
  layer.pad_count = static_cast<std::uint32_t>(snapped.reconstructed.pad_count);
  layer.codebook.assign(codebook.centroids().data().begin(), codebook.centroids().data().end());
  layer.indices = snapped.indices;
  return layer;
}

struct CompressionReport {
  int bits = 0;
  int dim = 0;
  std::uint64_t original_length = 0;
  double effective_bits_per_weight = 0;
  double compression_ratio_formula = 0;
  double measured_ratio = 0;  // 32-bit size / serialized size
  std::size_t serialized_bytes = 0;
  double empirical_entropy = 0;
  double reconstruction_error = 0;  // Frobenius norm, original vs decompressed
};

CompressionReport make_report(const CompressedLayer& layer, std::span<const float> original);
nlohmann::json to_json(const CompressionReport& report);

// ---------------------------------------------------------------------------
// Per-layer policy
// ---------------------------------------------------------------------------

struct LayerPolicy {
  std::size_t small_layer_threshold = 10000;
  int small_layer_bits = 0;  // 0 leaves small layers at their group's bits
  bool exclude_first = false;
  bool exclude_last = false;

  /// The clustering config for one layer, or nullopt when it stays uncompressed.
  std::optional<DkmConfig> apply(const DkmConfig& base, std::size_t layer_index,
                                 std::size_t layer_count, std::size_t parameter_count) const;
};

}  // namespace dkm
