#pragma once

#include <filesystem>
#include <istream>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "dkm/harness.hpp"

namespace dkm {

/// Flat weight files: raw little-endian float32 for `.bin`/`.f32`, otherwise
/// one decimal value per line (blank lines and `#` comments ignored).
std::vector<float> read_weights(const std::filesystem::path& path);
void write_weights(const std::filesystem::path& path, std::span<const float> weights);

namespace harness {

/// Parses an INI experiment description. Every problem found is reported in
/// one config error, listing each offending key.
Experiment parse_experiment(std::istream& in);
Experiment load_experiment(const std::filesystem::path& path);

nlohmann::json model_to_json(const ToyModel& model);
ToyModel model_from_json(const nlohmann::json& j);
void save_model(const std::filesystem::path& path, const ToyModel& model);
ToyModel load_model(const std::filesystem::path& path);

}  // namespace harness
}  // namespace dkm
