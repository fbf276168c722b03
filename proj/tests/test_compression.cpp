#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "dkm/compression.hpp"
#include "support.hpp"

using namespace dkm;
using dkm::testing::random_matrix;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::kIo;
}

CompressedLayer random_layer(Rng& rng, int bits, int dim, std::uint64_t n) {
  CompressedLayer layer;
  layer.bits = bits;
  layer.dim = dim;
  layer.original_length = n;
  const std::size_t count = (n + dim - 1) / dim;
  layer.pad_count = static_cast<std::uint32_t>(count * dim - n);
  layer.codebook.resize((std::size_t{1} << bits) * dim);
  for (auto& v : layer.codebook) v = static_cast<float>(standard_normal(rng));
  layer.indices.resize(count);
  for (auto& i : layer.indices) i = static_cast<std::uint32_t>(uniform_index(rng, std::size_t{1} << bits));
  return layer;
}

}  // namespace

// ---------------------------------------------------------------------------
// Sub-vectors
// ---------------------------------------------------------------------------

TEST(Subvectors, ExactMultiple) {
  const auto s = reshape_to_subvectors(std::vector<double>{1, 2, 3, 4}, 2);
  EXPECT_EQ(s.values, (MatrixD{{1, 2}, {3, 4}}));
  EXPECT_EQ(s.pad_count, 0u);
}

TEST(Subvectors, PadsFinalRow) {
  const auto s = reshape_to_subvectors(std::vector<double>{1, 2, 3}, 2);
  EXPECT_EQ(s.values, (MatrixD{{1, 2}, {3, 0}}));
  EXPECT_EQ(s.pad_count, 1u);
  EXPECT_EQ(s.original_length, 3u);
}

TEST(Subvectors, Errors) {
  EXPECT_EQ(code_of([] { reshape_to_subvectors(std::vector<double>{}, 2); }), ErrorCode::kParameter);
  EXPECT_EQ(code_of([] { reshape_to_subvectors(std::vector<double>{1}, 0); }), ErrorCode::kParameter);
}

TEST(Subvectors, FlattenRoundTripProperty) {
  Rng rng(1);
  for (std::size_t n = 1; n <= 100; ++n) {
    std::vector<double> x(n);
    for (auto& v : x) v = standard_normal(rng);
    for (std::size_t d = 1; d <= 8; ++d) {
      const auto s = reshape_to_subvectors(x, d);
      EXPECT_LT(s.pad_count, d);
      EXPECT_EQ(s.count() * s.dim(), n + s.pad_count);
      EXPECT_EQ(s.flatten(), x);
    }
  }
}

// ---------------------------------------------------------------------------
// Snapping
// ---------------------------------------------------------------------------

TEST(Snap, WeightsAtCentroidsReconstructExactly) {
  const auto w = reshape_to_subvectors(std::vector<double>{0, 10, 10, 0}, 1);
  const Codebook<double> c(MatrixD{{0}, {10}}, 1);
  const auto a = AttentionMatrix<double>::checked(MatrixD{{1, 0}, {0, 1}, {0, 1}, {1, 0}});
  const auto s = snap(w, a, c);
  EXPECT_EQ(s.indices, (std::vector<std::uint32_t>{0, 1, 1, 0}));
  EXPECT_EQ(frobenius_distance(s.reconstructed.values, w.values), 0.0);
}

TEST(Snap, PicksClosestCentroid) {
  ad::Tape<double> tape;
  const auto w = reshape_to_subvectors(std::vector<double>{4}, 1);
  const Codebook<double> c(MatrixD{{0}, {10}}, 1);
  auto a = attention(distance_matrix(tape.constant(w.values), tape.constant(c.centroids()),
                                     Metric::kSquaredEuclidean),
                     1.0);
  EXPECT_EQ(snap(w, AttentionMatrix<double>::checked(a.value()), c).indices[0], 0u);
}

TEST(Snap, ArgmaxAttentionIsNearestCentroidAndOptimal) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = as_subvectors(random_matrix(40, 3, rng));
    const Codebook<double> c(random_matrix(8, 3, rng), 3);
    ad::Tape<double> tape;
    auto dist = distance_matrix(tape.constant(w.values), tape.constant(c.centroids()), Metric::kSquaredEuclidean);
    const auto s = snap(w, AttentionMatrix<double>::checked(attention(dist, 0.3).value()), c);
    double total = 0;
    for (std::size_t i = 0; i < w.count(); ++i) {
      EXPECT_EQ(s.indices[i], argmax(dist.value().row(i)));
      double own = 0;
      for (std::size_t t = 0; t < 3; ++t) own += std::pow(w.values(i, t) - c.centroids()(s.indices[i], t), 2);
      for (std::size_t j = 0; j < 8; ++j) {
        double other = 0;
        for (std::size_t t = 0; t < 3; ++t) other += std::pow(w.values(i, t) - c.centroids()(j, t), 2);
        EXPECT_LE(own, other);
      }
      total += own;
    }
    EXPECT_NEAR(frobenius_distance(s.reconstructed.values, w.values), std::sqrt(total), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

TEST(Accounting, CompressionRatio) {
  EXPECT_EQ(compression_ratio(4, 4), 32.0);
  EXPECT_EQ(compression_ratio(32, 1), 1.0);
  EXPECT_EQ(compression_ratio(8, 16), 64.0);
  EXPECT_EQ(effective_bits_per_weight(8, 16), 0.5);
  EXPECT_EQ(effective_bits_per_weight(4, 4), 1.0);
  EXPECT_EQ(code_of([] { compression_ratio(0, 1); }), ErrorCode::kParameter);
}

TEST(Accounting, EntropyClosedForms) {
  std::vector<std::uint32_t> uniform;
  for (std::uint32_t i = 0; i < 64; ++i) uniform.push_back(i % 8);
  EXPECT_EQ(empirical_entropy(uniform, 3), 3.0);
  EXPECT_EQ(empirical_entropy(std::vector<std::uint32_t>(10, 2), 2), 0.0);
  EXPECT_EQ(empirical_entropy(std::vector<std::uint32_t>{0, 0, 1, 2}, 2), 1.5);
  EXPECT_EQ(code_of([] { empirical_entropy(std::vector<std::uint32_t>{}, 2); }), ErrorCode::kParameter);
}

TEST(Accounting, EntropyNeverExceedsBits) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const int bits = 1 + static_cast<int>(uniform_index(rng, 8));
    const std::size_t used = 1 + uniform_index(rng, std::size_t{1} << bits);
    std::vector<std::uint32_t> idx(1 + uniform_index(rng, 300));
    for (auto& i : idx) i = static_cast<std::uint32_t>(uniform_index(rng, used));
    EXPECT_LE(empirical_entropy(idx, bits), bits + 1e-12);
  }
  for (int bits = 1; bits <= 10; ++bits) {
    std::vector<std::uint32_t> idx;
    for (std::uint32_t rep = 0; rep < 3; ++rep)
      for (std::uint32_t j = 0; j < (1u << bits); ++j) idx.push_back(j);
    EXPECT_EQ(empirical_entropy(idx, bits), static_cast<double>(bits));
  }
}

// ---------------------------------------------------------------------------
// Bit packing and the .dkmz format
// ---------------------------------------------------------------------------

TEST(Format, PacksLsbFirst) {
  const auto packed = pack_indices(std::vector<std::uint32_t>{3, 0, 2, 1}, 2);
  ASSERT_EQ(packed.size(), 1u);
  EXPECT_EQ(packed[0], 0x63);
  EXPECT_EQ(unpack_indices(packed, 4, 2), (std::vector<std::uint32_t>{3, 0, 2, 1}));
  const auto three = pack_indices(std::vector<std::uint32_t>{5, 7, 1}, 3);
  // 101 111 001 -> bits 0..8: 1,0,1,1,1,1,1,0,0
  EXPECT_EQ(three, (std::vector<std::uint8_t>{0x7d, 0x00}));
}

TEST(Format, HeaderLayout) {
  Rng rng(4);
  auto layer = random_layer(rng, 3, 2, 9);
  const auto bytes = serialize(layer);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DKMZ");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 3);
  EXPECT_EQ(bytes[7], 0);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 9);
  EXPECT_EQ(bytes[20], 1);
  EXPECT_EQ(bytes.size(), 24u + 8 * 2 * 4 + (5 * 3 + 7) / 8);
}

TEST(Format, SizeFormulaAndRoundTripOnRandomLayers) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int bits = 1 + static_cast<int>(uniform_index(rng, 8));
    const int dim = 1 + static_cast<int>(uniform_index(rng, 16));
    const std::uint64_t n = 1 + uniform_index(rng, 1000);
    const auto layer = random_layer(rng, bits, dim, n);
    const auto bytes = serialize(layer);
    const std::size_t count = (n + dim - 1) / dim;
    const std::size_t formula = 24 + (std::size_t{1} << bits) * dim * 4 + (count * bits + 7) / 8;
    EXPECT_EQ(bytes.size(), formula);
    EXPECT_EQ(serialized_size(bits, dim, n), formula);
    const auto back = deserialize(bytes);
    EXPECT_EQ(back, layer);
    EXPECT_EQ(serialize(back), bytes);
  }
}

TEST(Format, DistinctErrorCodes) {
  Rng rng(6);
  const auto layer = random_layer(rng, 2, 1, 10);
  const auto good = serialize(layer);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(code_of([&] { deserialize(bad_magic); }), ErrorCode::kFormatBadMagic);

  auto bad_version = good;
  bad_version[4] = 2;
  EXPECT_EQ(code_of([&] { deserialize(bad_version); }), ErrorCode::kFormatVersion);

  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, good.size() - 1}) {
    const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + cut);
    EXPECT_EQ(code_of([&] { deserialize(truncated); }), ErrorCode::kFormatTruncated) << cut;
  }

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(code_of([&] { deserialize(trailing); }), ErrorCode::kFormatTrailingData);

  auto reserved = good;
  reserved[7] = 1;
  EXPECT_EQ(code_of([&] { deserialize(reserved); }), ErrorCode::kFormatInvalidHeader);

  auto out_of_range = layer;
  out_of_range.indices[3] = 4;
  EXPECT_EQ(code_of([&] { serialize(out_of_range); }), ErrorCode::kFormatIndexRange);

  auto bad_pad = good;
  bad_pad[20] = 3;
  EXPECT_EQ(code_of([&] { deserialize(bad_pad); }), ErrorCode::kFormatInvalidHeader);
}

TEST(Format, ErrorClassNamesAreDistinct) {
  std::set<std::string> names;
  for (auto code : {ErrorCode::kFormatBadMagic, ErrorCode::kFormatVersion, ErrorCode::kFormatTruncated,
                    ErrorCode::kFormatIndexRange, ErrorCode::kFormatInvalidHeader,
                    ErrorCode::kFormatTrailingData})
    names.emplace(error_class(code));
  EXPECT_EQ(names.size(), 6u);
}

TEST(Format, FileRoundTrip) {
  Rng rng(7);
  const auto layer = random_layer(rng, 4, 3, 77);
  const auto path = std::filesystem::temp_directory_path() / "dkm_format_roundtrip.dkmz";
  write_dkmz(path, layer);
  EXPECT_EQ(std::filesystem::file_size(path), serialized_size(4, 3, 77));
  EXPECT_EQ(read_dkmz(path), layer);
  std::filesystem::remove(path);
  EXPECT_EQ(code_of([&] { read_dkmz(path); }), ErrorCode::kIo);
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

TEST(Pipeline, DecompressReproducesSnapBitExactly) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const int dim = 1 + trial % 4;
    std::vector<double> flat(101);
    for (auto& v : flat) v = standard_normal(rng) * 0.1;
    const auto w = reshape_to_subvectors(flat, dim);
    DkmConfig cfg;
    cfg.bits = 3;
    cfg.dim = dim;
    cfg.temperature = 0.01;
    const auto r = dkm_cluster(w, std::nullopt, cfg, trial);
    const auto s = snap(w, r.attention, r.codebook);
    const auto layer = make_compressed_layer(s, r.codebook);
    const auto restored = decompress(deserialize(serialize(layer)));
    const auto expected = s.reconstructed.flatten();
    ASSERT_EQ(restored.size(), expected.size());
    for (std::size_t i = 0; i < restored.size(); ++i) EXPECT_EQ(restored[i], static_cast<float>(expected[i]));
  }
}

TEST(Pipeline, ReportFields) {
  Rng rng(9);
  const auto layer = random_layer(rng, 4, 4, 4000);
  std::vector<float> original = decompress(layer);
  original[0] += 3.0f;
  const auto report = make_report(layer, original);
  EXPECT_EQ(report.compression_ratio_formula, 32.0);
  EXPECT_EQ(report.effective_bits_per_weight, 1.0);
  EXPECT_EQ(report.serialized_bytes, serialized_size(4, 4, 4000));
  EXPECT_NEAR(report.reconstruction_error, 3.0, 1e-6);
  EXPECT_LE(report.empirical_entropy, 4.0);
  const auto j = to_json(report);
  for (const char* key : {"effective_bits_per_weight", "compression_ratio_formula", "measured_ratio",
                          "empirical_entropy", "reconstruction_error", "serialized_bytes"})
    EXPECT_TRUE(j.contains(key)) << key;
}

TEST(Pipeline, MeasuredRatioBelowFormulaAndConverging) {
  Rng rng(10);
  double previous = 0;
  for (std::uint64_t n : {16u, 256u, 4096u, 65536u, 1048576u}) {
    const auto layer = random_layer(rng, 4, 4, n);
    std::vector<float> original = decompress(layer);
    const auto r = make_report(layer, original);
    EXPECT_LT(r.measured_ratio, r.compression_ratio_formula);
    EXPECT_GT(r.measured_ratio, previous);
    previous = r.measured_ratio;
  }
  EXPECT_GT(previous, 31.9);
}

TEST(LayerPolicy, SmallLayersAndExclusions) {
  DkmConfig base;
  base.bits = 2;
  LayerPolicy p;
  p.small_layer_bits = 8;
  EXPECT_EQ(p.apply(base, 1, 3, 9999)->bits, 8);
  EXPECT_EQ(p.apply(base, 1, 3, 10000)->bits, 2);
  p.exclude_first = true;
  p.exclude_last = true;
  EXPECT_FALSE(p.apply(base, 0, 3, 50000).has_value());
  EXPECT_FALSE(p.apply(base, 2, 3, 50000).has_value());
  EXPECT_TRUE(p.apply(base, 1, 3, 50000).has_value());
  EXPECT_EQ(LayerPolicy{}.apply(base, 0, 1, 10)->bits, 2);
}
