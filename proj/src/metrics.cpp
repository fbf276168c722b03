#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dkm/harness.hpp"

namespace dkm::harness {
namespace {

constexpr std::string_view kCsvMagic = "# dkm-metrics v";

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename U>
U parse_number(std::string_view field, std::size_t line_no) {
  U value{};
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  require(ec == std::errc() && ptr == field.data() + field.size(), ErrorCode::kFormatInvalidHeader,
          "metrics csv line " + std::to_string(line_no) + ": bad number '" + std::string(field) + "'");
  return value;
}

void require_nonempty(const MetricsLog& log) {
  require(!log.batches.empty(), ErrorCode::kContract, "refusing to export an empty metrics log");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  out << text;
  out.flush();
  require(static_cast<bool>(out), ErrorCode::kIo, "write to '" + path.string() + "' failed");
}

}  // namespace

std::string metrics_to_csv(const MetricsLog& log) {
  require_nonempty(log);
  std::ostringstream os;
  os << kCsvMagic << kMetricsSchemaVersion << '\n';
  os << "epoch,batch,loss";
  for (const auto& name : log.layer_names) os << ",frobenius_error." << name;
  for (const auto& name : log.layer_names) os << ",iterations." << name;
  os << '\n';
  for (const auto& b : log.batches) {
    os << b.epoch << ',' << b.batch << ',' << format_double(b.loss);
    for (double e : b.frobenius_error) os << ',' << format_double(e);
    for (int it : b.iterations) os << ',' << it;
    os << '\n';
  }
  return os.str();
}

MetricsLog metrics_from_csv(std::string_view csv) {
  std::vector<std::string_view> lines;
  for (auto line : split(csv, '\n'))
    if (!line.empty()) lines.push_back(line);
  require(lines.size() >= 2, ErrorCode::kFormatTruncated, "metrics csv: missing header");
  require(lines[0].starts_with(kCsvMagic), ErrorCode::kFormatBadMagic,
          "metrics csv: missing schema line");
  const int version = parse_number<int>(lines[0].substr(kCsvMagic.size()), 1);
  require(version == kMetricsSchemaVersion, ErrorCode::kFormatVersion,
          "metrics csv: unsupported schema version " + std::to_string(version));

  const auto header = split(lines[1], ',');
  require(header.size() >= 3 && (header.size() - 3) % 2 == 0 && header[0] == "epoch" &&
              header[1] == "batch" && header[2] == "loss",
          ErrorCode::kFormatInvalidHeader, "metrics csv: unexpected column header");
  MetricsLog log;
  const std::size_t layers = (header.size() - 3) / 2;
  constexpr std::string_view prefix = "frobenius_error.";
  for (std::size_t l = 0; l < layers; ++l) {
    const auto col = header[3 + l];
    require(col.starts_with(prefix), ErrorCode::kFormatInvalidHeader,
            "metrics csv: unexpected column '" + std::string(col) + "'");
    log.layer_names.emplace_back(col.substr(prefix.size()));
  }
  for (std::size_t i = 2; i < lines.size(); ++i) {
    const auto fields = split(lines[i], ',');
    require(fields.size() == header.size(), ErrorCode::kFormatInvalidHeader,
            "metrics csv line " + std::to_string(i + 1) + ": wrong field count");
    BatchMetrics b;
    b.epoch = parse_number<int>(fields[0], i + 1);
    b.batch = parse_number<std::size_t>(fields[1], i + 1);
    b.loss = parse_number<double>(fields[2], i + 1);
    for (std::size_t l = 0; l < layers; ++l) {
      b.frobenius_error.push_back(parse_number<double>(fields[3 + l], i + 1));
      b.iterations.push_back(parse_number<int>(fields[3 + layers + l], i + 1));
    }
    log.batches.push_back(std::move(b));
  }
  return log;
}

nlohmann::json metrics_to_json(const MetricsLog& log) {
  require_nonempty(log);
  nlohmann::json batches = nlohmann::json::array();
  for (const auto& b : log.batches)
    batches.push_back({{"epoch", b.epoch},
                       {"batch", b.batch},
                       {"loss", b.loss},
                       {"frobenius_error", b.frobenius_error},
                       {"iterations", b.iterations}});
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : log.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"mean_loss", e.mean_loss},
                      {"train_time_accuracy", e.train_time_accuracy},
                      {"snapped_accuracy", e.snapped_accuracy}});
  return {{"schema", "dkm-metrics"},
          {"version", kMetricsSchemaVersion},
          {"layers", log.layer_names},
          {"batches", std::move(batches)},
          {"epochs", std::move(epochs)}};
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsLog& log) {
  write_text(path, metrics_to_csv(log));
}

void write_metrics_json(const std::filesystem::path& path, const MetricsLog& log) {
  write_text(path, metrics_to_json(log).dump(2) + "\n");
}

nlohmann::json telemetry_to_json(const DkmTelemetry& t) {
  return {{"iterations_used", t.iterations_used},
          {"final_delta", t.final_delta},
          {"converged", t.converged},
          {"deltas", t.deltas}};
}

}  // namespace dkm::harness
