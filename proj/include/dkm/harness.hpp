#pragma once

// Toy-scale training with clustered layers: a small MLP on synthetic 2-d
// classification, trained with SGD + momentum while each compressed layer's
// weights pass through a clustering layer on every forward pass.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dkm/compression.hpp"
#include "dkm/dkm.hpp"
#include "dkm/matrix.hpp"

namespace dkm::harness {

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

enum class DatasetKind { kBlobs, kMoons };

std::string_view to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view s);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kBlobs;
  std::size_t samples = 2000;
  int classes = 4;
  double noise = 0.5;
};

struct Split {
  MatrixD x;  // n x 2
  std::vector<int> y;
  std::size_t size() const { return y.size(); }
};

struct Dataset {
  Split train;
  Split validation;
  int classes = 0;
  MatrixD centers;  // class means for blobs; empty for moons
};

/// Deterministic dataset, shuffled and split 80/20 into train/validation.
/// Blob centers sit on a circle of radius 2; noise is the per-axis std dev.
Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum class AttentionMode { kDkm, kHard, kGumbel, kNone };

std::string_view to_string(AttentionMode mode);
AttentionMode parse_attention_mode(std::string_view s);

struct ModelSpec {
  int input_dim = 2;
  std::vector<int> hidden{64, 64};
  int output_dim = 4;
};

/// Clustering schemes per layer group. Hidden layers use group "hidden", the
/// final layer group "output"; a missing group leaves those layers uncompressed.
struct CompressionPlan {
  AttentionMode mode = AttentionMode::kDkm;
  std::map<std::string, DkmConfig> groups;
  LayerPolicy policy;
  int gumbel_draws = 4;
};

struct DenseLayer {
  std::string name;
  std::string group;
  MatrixD weights;  // in x out
  MatrixD bias;     // 1 x out
  std::optional<DkmConfig> scheme;
  std::optional<Codebook<double>> warm_start;
  MatrixD weight_velocity;
  MatrixD bias_velocity;

  bool compressed() const { return scheme.has_value(); }
};

struct ToyModel {
  std::vector<DenseLayer> layers;
  AttentionMode mode = AttentionMode::kDkm;
  int gumbel_draws = 4;

  bool clusters_layer(std::size_t i) const {
    return mode != AttentionMode::kNone && layers[i].compressed();
  }
};

/// He-uniform initialization; schemes resolved through the plan's policy.
ToyModel make_model(const ModelSpec& spec, const CompressionPlan& plan, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 0.008;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  int epochs = 20;
  std::uint64_t seed = 1;

  void validate() const;
};

struct BatchMetrics {
  int epoch = 0;
  std::size_t batch = 0;
  double loss = 0;
  std::vector<double> frobenius_error;  // |W~ - snapped|_F per clustered layer
  std::vector<int> iterations;          // clustering iterations per clustered layer

  friend bool operator==(const BatchMetrics&, const BatchMetrics&) = default;
};

struct EpochSummary {
  int epoch = 0;
  double mean_loss = 0;
  double train_time_accuracy = 0;  // validation accuracy with W~
  double snapped_accuracy = 0;     // validation accuracy with snapped weights
};

struct MetricsLog {
  std::vector<std::string> layer_names;  // clustered layers, column order
  std::vector<BatchMetrics> batches;
  std::vector<EpochSummary> epochs;

  friend bool operator==(const MetricsLog& a, const MetricsLog& b) {
    return a.layer_names == b.layer_names && a.batches == b.batches;
  }
};

struct TrainResult {
  ToyModel model;
  MetricsLog log;
};

TrainResult train(ToyModel model, const Dataset& data, const TrainConfig& config);
TrainResult train(ToyModel model, const Dataset& data, const TrainConfig& config,
                  AttentionMode mode);

/// Classification accuracy on `split`. snapped = true replaces every
/// clustered layer's weights by their snapped reconstruction.
double evaluate(const ToyModel& model, const Split& split, bool snapped);

/// Per-epoch means of the per-batch Frobenius error, one row per clustered layer.
std::vector<std::vector<double>> epoch_mean_errors(const MetricsLog& log);

// ---------------------------------------------------------------------------
// Experiments and temperature search
// ---------------------------------------------------------------------------

struct Experiment {
  DatasetSpec dataset;
  ModelSpec model;
  CompressionPlan plan;
  TrainConfig train;
};

struct RunOutcome {
  TrainResult result;
  double snapped_accuracy = 0;
  double train_time_accuracy = 0;
};

/// make_dataset + make_model + train + evaluate on validation.
RunOutcome run_experiment(const Experiment& experiment, const Dataset& data);

struct TauProbe {
  double temperature = 0;
  double snapped_accuracy = 0;
};

struct TauSearchResult {
  double best_temperature = 0;
  double best_accuracy = 0;
  std::vector<TauProbe> probes;  // sorted by temperature
  int runs = 0;
};

/// Golden-section search over log(tau) in [low, high] maximizing snapped
/// validation accuracy. Both endpoints are probed first; exactly `budget`
/// training runs are made (one when low == high).
TauSearchResult tau_search(const Experiment& experiment, const Dataset& data, double low,
                           double high, int budget);

// ---------------------------------------------------------------------------
// Metrics export
// ---------------------------------------------------------------------------

inline constexpr int kMetricsSchemaVersion = 1;

std::string metrics_to_csv(const MetricsLog& log);
MetricsLog metrics_from_csv(std::string_view csv);
nlohmann::json metrics_to_json(const MetricsLog& log);

void write_metrics_csv(const std::filesystem::path& path, const MetricsLog& log);
void write_metrics_json(const std::filesystem::path& path, const MetricsLog& log);

nlohmann::json telemetry_to_json(const DkmTelemetry& telemetry);

}  // namespace dkm::harness
