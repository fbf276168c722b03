#include "dkm/compression.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace dkm {
namespace {

constexpr std::uint8_t kMagic[4] = {'D', 'K', 'M', 'Z'};

std::size_t subvector_count(std::uint64_t n, int dim) {
  return static_cast<std::size_t>((n + static_cast<std::uint64_t>(dim) - 1) /
                                  static_cast<std::uint64_t>(dim));
}

std::size_t packed_bytes(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t{bytes[offset + i]} << (8 * i);
  return static_cast<U>(v);
}

void validate(const CompressedLayer& layer) {
  require(layer.bits >= 1 && layer.bits <= 16, ErrorCode::kFormatInvalidHeader,
          "bits must be in [1, 16]");
  require(layer.dim >= 1, ErrorCode::kFormatInvalidHeader, "dim must be >= 1");
  require(layer.original_length >= 1, ErrorCode::kFormatInvalidHeader, "empty layer");
  const std::size_t count = subvector_count(layer.original_length, layer.dim);
  require(layer.pad_count == count * static_cast<std::size_t>(layer.dim) - layer.original_length,
          ErrorCode::kFormatInvalidHeader, "pad count inconsistent with length and dim");
  require(layer.codebook.size() == (std::size_t{1} << layer.bits) * static_cast<std::size_t>(layer.dim),
          ErrorCode::kFormatInvalidHeader, "codebook size must be 2^bits * dim");
  require(layer.indices.size() == count, ErrorCode::kFormatInvalidHeader,
          "index count must be ceil(N / dim)");
  const std::uint64_t limit = std::uint64_t{1} << layer.bits;
  for (std::size_t i = 0; i < layer.indices.size(); ++i)
    require(layer.indices[i] < limit, ErrorCode::kFormatIndexRange,
            "index " + std::to_string(layer.indices[i]) + " at position " + std::to_string(i) +
                " is >= 2^bits");
}

}  // namespace

double compression_ratio(int bits, int dim) {
  require(bits >= 1 && dim >= 1, ErrorCode::kParameter, "compression_ratio: bits and dim must be >= 1");
  return static_cast<double>(dim) * 32.0 / static_cast<double>(bits);
}

double effective_bits_per_weight(int bits, int dim) {
  require(bits >= 1 && dim >= 1, ErrorCode::kParameter,
          "effective_bits_per_weight: bits and dim must be >= 1");
  return static_cast<double>(bits) / static_cast<double>(dim);
}

double empirical_entropy(std::span<const std::uint32_t> indices, int bits) {
  require(!indices.empty(), ErrorCode::kParameter, "empirical_entropy: no indices");
  require(bits >= 1 && bits <= 32, ErrorCode::kParameter, "empirical_entropy: bits out of range");
  std::map<std::uint32_t, std::size_t> histogram;
  for (auto i : indices) ++histogram[i];
  const double n = static_cast<double>(indices.size());
  double h = 0;
  for (const auto& [index, count] : histogram) {
    const double p = static_cast<double>(count) / n;
    h -= p * std::log2(p);
  }
  return h;
}

std::size_t serialized_size(int bits, int dim, std::uint64_t original_length) {
  return kHeaderSize + (std::size_t{1} << bits) * static_cast<std::size_t>(dim) * 4 +
         packed_bytes(subvector_count(original_length, dim), bits);
}

std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> indices, int bits) {
  std::vector<std::uint8_t> out(packed_bytes(indices.size(), bits), 0);
  std::size_t bit = 0;
  for (auto index : indices) {
    for (int b = 0; b < bits; ++b, ++bit)
      if ((index >> b) & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
  }
  return out;
}

std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t count,
                                          int bits) {
  require(bytes.size() >= packed_bytes(count, bits), ErrorCode::kFormatTruncated,
          "index stream shorter than expected");
  std::vector<std::uint32_t> out(count, 0);
  std::size_t bit = 0;
  for (std::size_t i = 0; i < count; ++i) {
    for (int b = 0; b < bits; ++b, ++bit)
      if ((bytes[bit / 8] >> (bit % 8)) & 1u) out[i] |= 1u << b;
  }
  return out;
}

std::vector<std::uint8_t> serialize(const CompressedLayer& layer) {
  validate(layer);
  std::vector<std::uint8_t> out;
  out.reserve(serialized_size(layer.bits, layer.dim, layer.original_length));
  for (auto ch : kMagic) out.push_back(ch);
  put_le<std::uint16_t>(out, kFormatVersion);
  out.push_back(static_cast<std::uint8_t>(layer.bits));
  out.push_back(0);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(layer.dim));
  put_le<std::uint64_t>(out, layer.original_length);
  put_le<std::uint32_t>(out, layer.pad_count);
  for (float v : layer.codebook) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  const auto packed = pack_indices(layer.indices, layer.bits);
  out.insert(out.end(), packed.begin(), packed.end());
  return out;
}

CompressedLayer deserialize(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 4, ErrorCode::kFormatTruncated, "file shorter than the magic number");
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorCode::kFormatBadMagic,
          "not a .dkmz stream (bad magic)");
  require(bytes.size() >= kHeaderSize, ErrorCode::kFormatTruncated, "truncated header");
  const auto version = get_le<std::uint16_t>(bytes, 4);
  require(version == kFormatVersion, ErrorCode::kFormatVersion,
          "unsupported format version " + std::to_string(version));

  CompressedLayer layer;
  layer.bits = bytes[6];
  require(bytes[7] == 0, ErrorCode::kFormatInvalidHeader, "reserved header byte is nonzero");
  const auto dim = get_le<std::uint32_t>(bytes, 8);
  layer.original_length = get_le<std::uint64_t>(bytes, 12);
  layer.pad_count = get_le<std::uint32_t>(bytes, 20);
  require(layer.bits >= 1 && layer.bits <= 16, ErrorCode::kFormatInvalidHeader,
          "bits must be in [1, 16]");
  require(dim >= 1 && dim <= (1u << 20), ErrorCode::kFormatInvalidHeader, "dim out of range");
  layer.dim = static_cast<int>(dim);
  require(layer.original_length >= 1 && layer.original_length <= (std::uint64_t{1} << 40),
          ErrorCode::kFormatInvalidHeader, "original length out of range");

  const std::size_t expected = serialized_size(layer.bits, layer.dim, layer.original_length);
  require(bytes.size() >= expected, ErrorCode::kFormatTruncated,
          "truncated stream: expected " + std::to_string(expected) + " bytes, got " +
              std::to_string(bytes.size()));
  require(bytes.size() == expected, ErrorCode::kFormatTrailingData,
          "unexpected trailing bytes after index stream");

  const std::size_t entries = (std::size_t{1} << layer.bits) * dim;
  layer.codebook.resize(entries);
  for (std::size_t i = 0; i < entries; ++i)
    layer.codebook[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, kHeaderSize + 4 * i));
  const std::size_t count = subvector_count(layer.original_length, layer.dim);
  layer.indices = unpack_indices(bytes.subspan(kHeaderSize + 4 * entries), count, layer.bits);
  validate(layer);
  return layer;
}

void write_dkmz(const std::filesystem::path& path, const CompressedLayer& layer) {
  const auto bytes = serialize(layer);
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::kIo, "write to '" + path.string() + "' failed");
}

CompressedLayer read_dkmz(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::vector<float> decompress(const CompressedLayer& layer) {
  validate(layer);
  const auto dim = static_cast<std::size_t>(layer.dim);
  std::vector<float> out;
  out.reserve(layer.indices.size() * dim);
  for (auto index : layer.indices)
    for (std::size_t c = 0; c < dim; ++c) out.push_back(layer.codebook[index * dim + c]);
  out.resize(static_cast<std::size_t>(layer.original_length));
  return out;
}

CompressionReport make_report(const CompressedLayer& layer, std::span<const float> original) {
  require(original.size() == layer.original_length, ErrorCode::kDimension,
          "make_report: original weight count differs from layer length");
  CompressionReport r;
  r.bits = layer.bits;
  r.dim = layer.dim;
  r.original_length = layer.original_length;
  r.effective_bits_per_weight = effective_bits_per_weight(layer.bits, layer.dim);
  r.compression_ratio_formula = compression_ratio(layer.bits, layer.dim);
  r.serialized_bytes = serialized_size(layer.bits, layer.dim, layer.original_length);
  r.measured_ratio = static_cast<double>(layer.original_length) * 4.0 /
                     static_cast<double>(r.serialized_bytes);
  r.empirical_entropy = empirical_entropy(layer.indices, layer.bits);
  const auto restored = decompress(layer);
  double acc = 0;
  for (std::size_t i = 0; i < restored.size(); ++i) {
    const double diff = static_cast<double>(original[i]) - static_cast<double>(restored[i]);
    acc += diff * diff;
  }
  r.reconstruction_error = std::sqrt(acc);
  return r;
}

nlohmann::json to_json(const CompressionReport& r) {
  return {{"bits", r.bits},
          {"dim", r.dim},
          {"original_length", r.original_length},
          {"effective_bits_per_weight", r.effective_bits_per_weight},
          {"compression_ratio_formula", r.compression_ratio_formula},
          {"measured_ratio", r.measured_ratio},
          {"serialized_bytes", r.serialized_bytes},
          {"empirical_entropy", r.empirical_entropy},
          {"reconstruction_error", r.reconstruction_error}};
}

std::optional<DkmConfig> LayerPolicy::apply(const DkmConfig& base, std::size_t layer_index,
                                            std::size_t layer_count,
                                            std::size_t parameter_count) const {
  if (exclude_first && layer_index == 0) return std::nullopt;
  if (exclude_last && layer_index + 1 == layer_count) return std::nullopt;
  DkmConfig config = base;
  if (small_layer_bits > 0 && parameter_count < small_layer_threshold) config.bits = small_layer_bits;
  return config;
}

}  // namespace dkm
