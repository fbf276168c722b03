// dkm: command-line front end for clustering, compression and toy training.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error. Failures print one
// line to stderr: "error: <class>: <message>".

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dkm/baselines.hpp"
#include "dkm/compression.hpp"
#include "dkm/dkm.hpp"
#include "dkm/harness.hpp"
#include "dkm/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kDefaultSeed = 1;

struct ClusterFlags {
  int bits = 2;
  int dim = 1;
  double temperature = 1e-3;
  double epsilon = 1e-4;
  int max_iterations = 5;
  std::string metric = "squared_euclidean";
  std::string init = "kmeans_pp";

  void add_to(CLI::App* app) {
    app->add_option("-b,--bits", bits, "index bits per sub-vector (2^b clusters)");
    app->add_option("-d,--dim", dim, "sub-vector dimension");
    app->add_option("-t,--tau", temperature, "softmax temperature");
    app->add_option("-e,--epsilon", epsilon, "convergence threshold on centroid change");
    app->add_option("--max-iter", max_iterations, "maximum clustering iterations");
    app->add_option("--metric", metric, "squared_euclidean | euclidean");
    app->add_option("--init", init, "kmeans_pp | random_sample");
  }

  dkm::DkmConfig config() const {
    dkm::DkmConfig c;
    c.bits = bits;
    c.dim = dim;
    c.temperature = temperature;
    c.epsilon = epsilon;
    c.max_iterations = max_iterations;
    c.metric = dkm::parse_metric(metric);
    c.init = dkm::parse_init(init);
    c.validate();
    return c;
  }
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  dkm::require(static_cast<bool>(out), dkm::ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
  dkm::require(static_cast<bool>(out), dkm::ErrorCode::kIo, "write to '" + path.string() + "' failed");
}

void emit(const json& j, const std::string& output) {
  if (output.empty())
    std::cout << j.dump(2) << '\n';
  else
    write_json(output, j);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  dkm::require(!ec && fs::is_directory(dir), dkm::ErrorCode::kIo,
               "cannot create output directory '" + dir.string() + "'");
}

struct Clustered {
  dkm::CompressedLayer layer;
  dkm::DkmTelemetry telemetry;
};

Clustered cluster_weights(const std::vector<float>& weights, const dkm::DkmConfig& config,
                          const std::optional<dkm::Codebook<double>>& warm, std::uint64_t seed) {
  std::vector<double> values(weights.begin(), weights.end());
  const auto sub = dkm::reshape_to_subvectors(values, config.dim);
  auto r = dkm::dkm_cluster(sub, warm, config, seed);
  const auto snapped = dkm::snap(sub, r.attention, r.codebook);
  return {dkm::make_compressed_layer(snapped, r.codebook), r.telemetry};
}

json codebook_json(const dkm::CompressedLayer& layer) {
  json rows = json::array();
  const std::size_t d = static_cast<std::size_t>(layer.dim);
  for (std::size_t i = 0; i < layer.codebook.size(); i += d)
    rows.push_back(std::vector<float>(layer.codebook.begin() + i, layer.codebook.begin() + i + d));
  return rows;
}

// --- cluster ----------------------------------------------------------------

int cmd_cluster(const std::string& weights_path, const ClusterFlags& flags, std::uint64_t seed,
                const std::string& output) {
  const auto weights = dkm::read_weights(weights_path);
  const auto c = cluster_weights(weights, flags.config(), std::nullopt, seed);
  const auto report = dkm::make_report(c.layer, weights);
  json j = {{"bits", c.layer.bits},
            {"dim", c.layer.dim},
            {"seed", seed},
            {"codebook", codebook_json(c.layer)},
            {"indices", c.layer.indices},
            {"entropy", report.empirical_entropy},
            {"reconstruction_error", report.reconstruction_error},
            {"telemetry", dkm::harness::telemetry_to_json(c.telemetry)}};
  emit(j, output);
  return 0;
}

// --- compress / decompress / inspect ----------------------------------------

int cmd_compress(const std::string& weights_path, const std::string& model_path,
                 const std::string& layer_name, ClusterFlags flags, const CLI::App& app,
                 std::uint64_t seed, const std::string& output, const std::string& report_path) {
  std::vector<float> weights;
  std::optional<dkm::Codebook<double>> warm;
  dkm::DkmConfig config;
  if (!model_path.empty()) {
    const auto model = dkm::harness::load_model(model_path);
    const dkm::harness::DenseLayer* found = nullptr;
    for (const auto& l : model.layers)
      if (l.name == layer_name) found = &l;
    dkm::require(found != nullptr, dkm::ErrorCode::kParameter,
                 "model has no layer named '" + layer_name + "'");
    weights.assign(found->weights.data().begin(), found->weights.data().end());
    // A layer trained with a scheme supplies defaults for flags not given.
    if (found->scheme) {
      const auto& s = *found->scheme;
      if (app.count("--bits") == 0) flags.bits = s.bits;
      if (app.count("--dim") == 0) flags.dim = s.dim;
      if (app.count("--tau") == 0) flags.temperature = s.temperature;
      if (app.count("--epsilon") == 0) flags.epsilon = s.epsilon;
      if (app.count("--max-iter") == 0) flags.max_iterations = s.max_iterations;
      config = flags.config();
      if (found->warm_start && found->warm_start->bits() == config.bits &&
          static_cast<int>(found->warm_start->dim()) == config.dim)
        warm = found->warm_start;
    } else {
      config = flags.config();
    }
  } else {
    weights = dkm::read_weights(weights_path);
    config = flags.config();
  }
  const auto c = cluster_weights(weights, config, warm, seed);
  dkm::write_dkmz(output, c.layer);
  auto j = dkm::to_json(dkm::make_report(c.layer, weights));
  j["telemetry"] = dkm::harness::telemetry_to_json(c.telemetry);
  if (!report_path.empty()) write_json(report_path, j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_decompress(const std::string& input, const std::string& output) {
  const auto layer = dkm::read_dkmz(input);
  const auto weights = dkm::decompress(layer);
  dkm::write_weights(output, weights);
  std::cout << json{{"bits", layer.bits},
                    {"dim", layer.dim},
                    {"original_length", layer.original_length},
                    {"output", output}}
                   .dump(2)
            << '\n';
  return 0;
}

int cmd_inspect(const std::string& input) {
  const auto layer = dkm::read_dkmz(input);
  json j = {{"bits", layer.bits},
            {"dim", layer.dim},
            {"original_length", layer.original_length},
            {"pad_count", layer.pad_count},
            {"subvectors", layer.indices.size()},
            {"serialized_bytes", fs::file_size(input)},
            {"compression_ratio_formula", dkm::compression_ratio(layer.bits, layer.dim)},
            {"effective_bits_per_weight", dkm::effective_bits_per_weight(layer.bits, layer.dim)},
            {"empirical_entropy", dkm::empirical_entropy(layer.indices, layer.bits)},
            {"codebook", codebook_json(layer)}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

// --- train / evaluate / tau-search ------------------------------------------

dkm::harness::Experiment load_experiment(const std::string& path, std::uint64_t seed) {
  auto e = dkm::harness::load_experiment(path);
  e.train.seed = seed;
  return e;
}

json layer_summary(const dkm::harness::MetricsLog& log) {
  const auto errors = dkm::harness::epoch_mean_errors(log);
  json layers = json::array();
  for (std::size_t l = 0; l < log.layer_names.size(); ++l) {
    double iters = 0;
    for (const auto& b : log.batches) iters += b.iterations[l];
    layers.push_back({{"name", log.layer_names[l]},
                      {"epoch_mean_frobenius_error", errors[l]},
                      {"mean_iterations", log.batches.empty() ? 0.0 : iters / log.batches.size()},
                      {"final_iterations", log.batches.empty() ? 0 : log.batches.back().iterations[l]}});
  }
  return layers;
}

int cmd_train(const std::string& config_path, std::uint64_t seed, const fs::path& out) {
  const auto e = load_experiment(config_path, seed);
  ensure_dir(out);
  const auto data = dkm::harness::make_dataset(e.dataset, seed);
  const auto outcome = dkm::harness::run_experiment(e, data);
  const auto& log = outcome.result.log;
  dkm::harness::write_metrics_csv(out / "metrics.csv", log);
  dkm::harness::write_metrics_json(out / "metrics.json", log);
  dkm::harness::save_model(out / "model.json", outcome.result.model);
  json summary = {{"seed", seed},
                  {"mode", std::string(dkm::harness::to_string(e.plan.mode))},
                  {"epochs", e.train.epochs},
                  {"batches", log.batches.size()},
                  {"final_loss", log.batches.empty() ? 0.0 : log.batches.back().loss},
                  {"snapped_accuracy", outcome.snapped_accuracy},
                  {"train_time_accuracy", outcome.train_time_accuracy},
                  {"layers", layer_summary(log)}};
  write_json(out / "summary.json", summary);
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& model_path, std::uint64_t seed,
                 const std::string& output) {
  const auto e = load_experiment(config_path, seed);
  const auto model = dkm::harness::load_model(model_path);
  const auto data = dkm::harness::make_dataset(e.dataset, seed);
  json j = {{"seed", seed},
            {"snapped_accuracy", dkm::harness::evaluate(model, data.validation, true)},
            {"train_time_accuracy", dkm::harness::evaluate(model, data.validation, false)}};
  emit(j, output);
  return 0;
}

int cmd_tau_search(const std::string& config_path, std::uint64_t seed, double low, double high,
                   int budget, std::optional<int> epochs, const fs::path& out) {
  auto e = load_experiment(config_path, seed);
  if (epochs) {
    e.train.epochs = *epochs;
    e.train.validate();
  }
  ensure_dir(out);
  const auto data = dkm::harness::make_dataset(e.dataset, seed);
  const auto r = dkm::harness::tau_search(e, data, low, high, budget);
  json probes = json::array();
  for (const auto& p : r.probes)
    probes.push_back({{"temperature", p.temperature}, {"snapped_accuracy", p.snapped_accuracy}});
  json j = {{"seed", seed},
            {"low", low},
            {"high", high},
            {"runs", r.runs},
            {"epochs_per_probe", e.train.epochs},
            {"best_temperature", r.best_temperature},
            {"best_accuracy", r.best_accuracy},
            {"probes", probes}};
  write_json(out / "tau_search.json", j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

int usage_error(const std::string& message) {
  std::cerr << "error: usage: " << message << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable k-means weight clustering and compression"};
  app.require_subcommand(1);
  std::uint64_t seed = kDefaultSeed;
  app.add_option("--seed", seed, "random seed (default 1)");

  std::string weights, model, layer, input, output, report, config;
  fs::path out_dir = ".";
  ClusterFlags flags;

  auto* cluster = app.add_subcommand("cluster", "run one clustering pass over a weight file");
  cluster->add_option("weights", weights, "weight file (.bin/.f32 float32, else text)")->required();
  cluster->add_option("-o,--output", output, "write the JSON result here instead of stdout");
  flags.add_to(cluster);

  auto* compress = app.add_subcommand("compress", "cluster weights and write a .dkmz file");
  auto* weights_opt = compress->add_option("-w,--weights", weights, "weight file");
  auto* model_opt = compress->add_option("-m,--model", model, "model.json from `dkm train`");
  compress->add_option("-l,--layer", layer, "layer name when compressing from a model");
  compress->add_option("-o,--output", output, "output .dkmz path")->required();
  compress->add_option("-r,--report", report, "also write the compression report here");
  weights_opt->excludes(model_opt);
  flags.add_to(compress);

  auto* decompress = app.add_subcommand("decompress", "expand a .dkmz file into weights");
  decompress->add_option("input", input, ".dkmz file")->required();
  decompress->add_option("-o,--output", output, "weight file to write")->required();

  auto* inspect = app.add_subcommand("inspect", "describe a .dkmz file");
  inspect->add_option("input", input, ".dkmz file")->required();

  auto* train = app.add_subcommand("train", "train the toy model described by a config file");
  train->add_option("-c,--config", config, "experiment config (INI)")->required();
  train->add_option("-o,--out", out_dir, "output directory");

  auto* evaluate = app.add_subcommand("evaluate", "validation accuracy of a saved model");
  evaluate->add_option("-c,--config", config, "experiment config (INI)")->required();
  evaluate->add_option("-m,--model", model, "model.json")->required();
  evaluate->add_option("-o,--output", output, "write the JSON result here instead of stdout");

  double low = 1e-4, high = 1e-1;
  int budget = 6;
  std::optional<int> epochs;
  auto* tau = app.add_subcommand("tau-search", "search the temperature on a log scale");
  tau->add_option("-c,--config", config, "experiment config (INI)")->required();
  tau->add_option("--low", low, "lowest temperature");
  tau->add_option("--high", high, "highest temperature");
  tau->add_option("--budget", budget, "number of training runs (>= 3)");
  tau->add_option("--epochs", epochs, "epochs per probe (defaults to the config)");
  tau->add_option("-o,--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string message = e.what();
    for (auto& ch : message)
      if (ch == '\n') ch = ' ';
    return usage_error(message);
  }

  try {
    if (cluster->parsed()) return cmd_cluster(weights, flags, seed, output);
    if (compress->parsed()) {
      if (weights.empty() == model.empty()) return usage_error("compress needs exactly one of --weights or --model");
      if (!model.empty() && layer.empty()) return usage_error("compress --model needs --layer");
      return cmd_compress(weights, model, layer, flags, *compress, seed, output, report);
    }
    if (decompress->parsed()) return cmd_decompress(input, output);
    if (inspect->parsed()) return cmd_inspect(input);
    if (train->parsed()) return cmd_train(config, seed, out_dir);
    if (evaluate->parsed()) return cmd_evaluate(config, model, seed, output);
    if (tau->parsed()) return cmd_tau_search(config, seed, low, high, budget, epochs, out_dir);
  } catch (const dkm::Error& e) {
    std::cerr << "error: " << dkm::error_class(e.code()) << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 2;
  }
  return usage_error("no subcommand");
}
