#include "dkm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dkm/autodiff.hpp"
#include "dkm/baselines.hpp"
#include "dkm/random.hpp"

namespace dkm::harness {

std::string_view to_string(DatasetKind kind) {
  return kind == DatasetKind::kBlobs ? "blobs" : "moons";
}

DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "blobs") return DatasetKind::kBlobs;
  if (s == "moons") return DatasetKind::kMoons;
  fail(ErrorCode::kParameter, "unknown dataset kind '" + std::string(s) + "'");
}

std::string_view to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::kDkm: return "dkm";
    case AttentionMode::kHard: return "hard";
    case AttentionMode::kGumbel: return "gumbel";
    case AttentionMode::kNone: return "none";
  }
  return "none";
}

AttentionMode parse_attention_mode(std::string_view s) {
  if (s == "dkm") return AttentionMode::kDkm;
  if (s == "hard") return AttentionMode::kHard;
  if (s == "gumbel") return AttentionMode::kGumbel;
  if (s == "none") return AttentionMode::kNone;
  fail(ErrorCode::kParameter, "unknown attention mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  require(spec.classes >= 2, ErrorCode::kParameter, "dataset needs at least 2 classes");
  require(spec.samples >= static_cast<std::size_t>(spec.classes), ErrorCode::kParameter,
          "dataset needs at least one sample per class");
  require(spec.noise >= 0, ErrorCode::kParameter, "noise must be >= 0");
  require(spec.kind != DatasetKind::kMoons || spec.classes == 2, ErrorCode::kParameter,
          "moons dataset has exactly 2 classes");

  Rng rng(derive_seed(seed, 0xda7a));
  const std::size_t n = spec.samples;
  MatrixD x(n, 2);
  std::vector<int> y(n);
  Dataset out;
  out.classes = spec.classes;

  if (spec.kind == DatasetKind::kBlobs) {
    out.centers = MatrixD(static_cast<std::size_t>(spec.classes), 2);
    for (int c = 0; c < spec.classes; ++c) {
      const double angle = 2.0 * std::numbers::pi * c / spec.classes;
      out.centers(c, 0) = 2.0 * std::cos(angle);
      out.centers(c, 1) = 2.0 * std::sin(angle);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const int c = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
      y[i] = c;
      x(i, 0) = out.centers(c, 0) + spec.noise * standard_normal(rng);
      x(i, 1) = out.centers(c, 1) + spec.noise * standard_normal(rng);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const int c = static_cast<int>(i % 2);
      const double t = std::numbers::pi * uniform01(rng);
      y[i] = c;
      x(i, 0) = c == 0 ? std::cos(t) : 1.0 - std::cos(t);
      x(i, 1) = c == 0 ? std::sin(t) : 0.5 - std::sin(t);
      x(i, 0) += spec.noise * standard_normal(rng);
      x(i, 1) += spec.noise * standard_normal(rng);
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

  const std::size_t n_train = n * 4 / 5;
  auto fill = [&](Split& split, std::size_t begin, std::size_t end) {
    split.x = MatrixD(end - begin, 2);
    split.y.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      split.x(i - begin, 0) = x(order[i], 0);
      split.x(i - begin, 1) = x(order[i], 1);
      split.y[i - begin] = y[order[i]];
    }
  };
  fill(out.train, 0, n_train);
  fill(out.validation, n_train, n);
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

ToyModel make_model(const ModelSpec& spec, const CompressionPlan& plan, std::uint64_t seed) {
  require(spec.input_dim >= 1 && spec.output_dim >= 1, ErrorCode::kParameter,
          "model dimensions must be >= 1");
  std::vector<int> dims{spec.input_dim};
  dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
  dims.push_back(spec.output_dim);

  ToyModel model;
  model.mode = plan.mode;
  model.gumbel_draws = plan.gumbel_draws;
  Rng rng(derive_seed(seed, 0x10de1));
  const std::size_t layer_count = dims.size() - 1;
  for (std::size_t l = 0; l < layer_count; ++l) {
    require(dims[l + 1] >= 1, ErrorCode::kParameter, "layer widths must be >= 1");
    const auto in = static_cast<std::size_t>(dims[l]);
    const auto out = static_cast<std::size_t>(dims[l + 1]);
    DenseLayer layer;
    layer.name = "fc" + std::to_string(l);
    layer.group = l + 1 == layer_count ? "output" : "hidden";
    layer.weights = MatrixD(in, out);
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    for (auto& v : layer.weights.data()) v = uniform_range(rng, -bound, bound);
    layer.bias = MatrixD(1, out);
    layer.weight_velocity = MatrixD(in, out);
    layer.bias_velocity = MatrixD(1, out);

    if (auto it = plan.groups.find(layer.group); it != plan.groups.end()) {
      layer.scheme = plan.policy.apply(it->second, l, layer_count, in * out);
      if (layer.scheme) {
        layer.scheme->validate();
        const std::size_t count = (in * out + layer.scheme->dim - 1) / layer.scheme->dim;
        require(count >= layer.scheme->clusters(), ErrorCode::kInsufficientData,
                layer.name + ": " + std::to_string(count) + " sub-vectors cannot fill " +
                    std::to_string(layer.scheme->clusters()) + " clusters");
      }
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

namespace {

struct LayerPass {
  bool clustered = false;
  ad::Var<double> weight;  // raw weight leaf
  ad::Var<double> bias;
  MatrixD snapped;         // in x out
  double frobenius_error = 0;
  int iterations = 0;
  std::optional<Codebook<double>> codebook;
};

struct ForwardPass {
  ad::Var<double> logits;
  std::vector<LayerPass> layers;
};

std::uint64_t init_seed(std::uint64_t seed, std::size_t layer) {
  return derive_seed(seed, 0x1417, layer);
}

/// Runs the model on `x`. Clustered layers go through the mode's clustering
/// forward; when `use_snapped` is set they use the snapped weights instead.
ForwardPass forward(ad::Tape<double>& tape, const ToyModel& model, const MatrixD& x,
                    std::uint64_t seed, std::uint64_t noise_stream, bool use_snapped,
                    bool trainable) {
  ForwardPass pass;
  auto h = tape.constant(x);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    LayerPass lp;
    lp.weight = trainable ? tape.variable(layer.weights) : tape.constant(layer.weights);
    lp.bias = trainable ? tape.variable(layer.bias) : tape.constant(layer.bias);
    ad::Var<double> effective = lp.weight;

    if (model.clusters_layer(l)) {
      const DkmConfig& cfg = *layer.scheme;
      const std::size_t rows = layer.weights.rows(), cols = layer.weights.cols();
      const std::size_t d = static_cast<std::size_t>(cfg.dim);
      const std::size_t count = (rows * cols + d - 1) / d;
      auto sub = ad::reshape_padded(lp.weight, count, d);
      const std::uint64_t iseed = init_seed(seed, l);
      DkmResult<double> r;
      try {
        switch (model.mode) {
          case AttentionMode::kHard: r = hard_forward(sub, layer.warm_start, cfg, iseed); break;
          case AttentionMode::kGumbel:
            r = gumbel_forward(sub, layer.warm_start, cfg, derive_seed(iseed, noise_stream),
                               model.gumbel_draws);
            break;
          default: r = dkm_forward(sub, layer.warm_start, cfg, iseed); break;
        }
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kNumeric) throw;
        fail(ErrorCode::kDivergence, layer.name + ": " + e.what());
      }

      std::vector<std::size_t> index(count);
      if (model.mode == AttentionMode::kGumbel) {
        index = nearest_centroids(sub.value(), r.codebook.centroids());
      } else {
        for (std::size_t i = 0; i < count; ++i) index[i] = argmax(r.attention.value().row(i));
      }
      MatrixD snapped_sub(count, d);
      for (std::size_t i = 0; i < count; ++i)
        for (std::size_t c = 0; c < d; ++c) snapped_sub(i, c) = r.codebook.centroids()(index[i], c);
      lp.frobenius_error = frobenius_distance(r.w_tilde.value(), snapped_sub);
      MatrixD snapped(rows, cols);
      for (std::size_t i = 0; i < snapped.size(); ++i) snapped[i] = snapped_sub[i];

      lp.clustered = true;
      lp.iterations = r.telemetry.iterations_used;
      lp.codebook = r.codebook;
      lp.snapped = snapped;
      effective = use_snapped ? tape.constant(std::move(snapped))
                              : ad::reshape_padded(r.w_tilde, rows, cols);
    }

    auto z = ad::add(ad::matmul(h, effective), ad::broadcast_row(lp.bias, x.rows()));
    h = l + 1 == model.layers.size() ? z : ad::relu(z);
    pass.layers.push_back(std::move(lp));
  }
  pass.logits = h;
  return pass;
}

double accuracy_of(const MatrixD& logits, std::span<const int> labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i)
    if (static_cast<int>(argmax(logits.row(i))) == labels[i]) ++correct;
  return labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
}

void sgd_step(MatrixD& param, MatrixD& velocity, const MatrixD& grad, const TrainConfig& cfg) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = cfg.momentum * velocity[i] + grad[i];
    param[i] -= cfg.learning_rate * velocity[i];
  }
}

}  // namespace

void TrainConfig::validate() const {
  require(learning_rate > 0, ErrorCode::kParameter, "learning rate must be > 0");
  require(momentum >= 0 && momentum < 1, ErrorCode::kParameter, "momentum must be in [0, 1)");
  require(batch_size >= 1, ErrorCode::kParameter, "batch size must be >= 1");
  require(epochs >= 1, ErrorCode::kParameter, "epochs must be >= 1");
}

TrainResult train(ToyModel model, const Dataset& data, const TrainConfig& config,
                  AttentionMode mode) {
  model.mode = mode;
  return train(std::move(model), data, config);
}

TrainResult train(ToyModel model, const Dataset& data, const TrainConfig& config) {
  config.validate();
  require(data.train.size() >= 1, ErrorCode::kParameter, "empty training split");
  TrainResult out;
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    if (model.clusters_layer(l)) out.log.layer_names.push_back(model.layers[l].name);

  Rng rng(derive_seed(config.seed, 0x5407));
  const std::size_t n = data.train.size();
  const std::size_t batches = (n + config.batch_size - 1) / config.batch_size;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t global_batch = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double loss_sum = 0;
    for (std::size_t b = 0; b < batches; ++b, ++global_batch) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(n, begin + config.batch_size);
      MatrixD x(end - begin, 2);
      std::vector<int> y(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        x(i - begin, 0) = data.train.x(order[i], 0);
        x(i - begin, 1) = data.train.x(order[i], 1);
        y[i - begin] = data.train.y[order[i]];
      }

      ad::Tape<double> tape;
      ForwardPass pass;
      try {
        pass = forward(tape, model, x, config.seed, global_batch, false, true);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kDivergence) throw;
        fail(ErrorCode::kDivergence, "training diverged at epoch " + std::to_string(epoch) +
                                         " batch " + std::to_string(b) + ": " + e.what());
      }
      auto loss = ad::softmax_cross_entropy(pass.logits, std::span<const int>(y));
      const double loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        std::string culprit = "loss";
        for (std::size_t l = 0; l < model.layers.size(); ++l)
          if (!model.layers[l].weights.all_finite()) {
            culprit = model.layers[l].name;
            break;
          }
        fail(ErrorCode::kDivergence, "training diverged at epoch " + std::to_string(epoch) +
                                         " batch " + std::to_string(b) +
                                         ": non-finite loss (first non-finite: " + culprit + ")");
      }
      tape.backward(loss);

      BatchMetrics metrics;
      metrics.epoch = epoch;
      metrics.batch = b;
      metrics.loss = loss_value;
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto& layer = model.layers[l];
        auto& lp = pass.layers[l];
        if (lp.clustered) {
          metrics.frobenius_error.push_back(lp.frobenius_error);
          metrics.iterations.push_back(lp.iterations);
          layer.warm_start = lp.codebook;
        }
        sgd_step(layer.weights, layer.weight_velocity, lp.weight.grad(), config);
        sgd_step(layer.bias, layer.bias_velocity, lp.bias.grad(), config);
      }
      loss_sum += loss_value;
      out.log.batches.push_back(std::move(metrics));
    }

    EpochSummary summary;
    summary.epoch = epoch;
    summary.mean_loss = loss_sum / static_cast<double>(batches);
    if (data.validation.size() > 0) {
      summary.train_time_accuracy = evaluate(model, data.validation, false);
      summary.snapped_accuracy = evaluate(model, data.validation, true);
    }
    out.log.epochs.push_back(summary);
  }
  out.model = std::move(model);
  return out;
}

double evaluate(const ToyModel& model, const Split& split, bool snapped) {
  if (split.size() == 0) return 0.0;
  ad::Tape<double> tape;
  auto pass = forward(tape, model, split.x, 0x5eed, 0xe7a1, snapped, false);
  return accuracy_of(pass.logits.value(), split.y);
}

std::vector<std::vector<double>> epoch_mean_errors(const MetricsLog& log) {
  std::vector<std::vector<double>> out(log.layer_names.size());
  int current = 0;
  std::vector<double> sums(log.layer_names.size());
  std::size_t count = 0;
  auto flush = [&] {
    if (count == 0) return;
    for (std::size_t l = 0; l < sums.size(); ++l) out[l].push_back(sums[l] / static_cast<double>(count));
    std::fill(sums.begin(), sums.end(), 0.0);
    count = 0;
  };
  for (const auto& b : log.batches) {
    if (b.epoch != current) {
      flush();
      current = b.epoch;
    }
    for (std::size_t l = 0; l < sums.size(); ++l) sums[l] += b.frobenius_error[l];
    ++count;
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

RunOutcome run_experiment(const Experiment& experiment, const Dataset& data) {
  auto model = make_model(experiment.model, experiment.plan, experiment.train.seed);
  RunOutcome outcome{train(std::move(model), data, experiment.train), 0, 0};
  outcome.snapped_accuracy = evaluate(outcome.result.model, data.validation, true);
  outcome.train_time_accuracy = evaluate(outcome.result.model, data.validation, false);
  return outcome;
}

TauSearchResult tau_search(const Experiment& experiment, const Dataset& data, double low,
                           double high, int budget) {
  require(low > 0 && high > 0, ErrorCode::kParameter, "tau_search: temperatures must be > 0");
  require(low <= high, ErrorCode::kParameter, "tau_search: low must not exceed high");
  require(budget >= 3, ErrorCode::kParameter, "tau_search: budget must be >= 3");

  TauSearchResult result;
  auto probe = [&](double log_tau) {
    Experiment e = experiment;
    const double tau = std::exp(log_tau);
    for (auto& [name, cfg] : e.plan.groups) cfg.temperature = tau;
    // Fresh model per probe: warm starts never carry across temperatures.
    const double acc = run_experiment(e, data).snapped_accuracy;
    result.probes.push_back({tau, acc});
    ++result.runs;
    return acc;
  };

  if (low == high) {
    probe(std::log(low));
  } else {
    const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = std::log(low), b = std::log(high);
    probe(a);
    probe(b);
    double x1 = b - ratio * (b - a);
    double f1 = probe(x1);
    double x2 = a + ratio * (b - a);
    double f2 = result.runs < budget ? probe(x2) : f1;
    while (result.runs < budget) {
      if (f1 >= f2) {
        b = x2;
        x2 = x1;
        f2 = f1;
        x1 = b - ratio * (b - a);
        f1 = probe(x1);
      } else {
        a = x1;
        x1 = x2;
        f1 = f2;
        x2 = a + ratio * (b - a);
        f2 = probe(x2);
      }
    }
  }

  std::stable_sort(result.probes.begin(), result.probes.end(),
                   [](const TauProbe& l, const TauProbe& r) { return l.temperature < r.temperature; });
  result.best_accuracy = -1;
  for (const auto& p : result.probes) {
    if (p.snapped_accuracy > result.best_accuracy) {
      result.best_accuracy = p.snapped_accuracy;
      result.best_temperature = p.temperature;
    }
  }
  return result;
}

}  // namespace dkm::harness
