#include "dkm/io.hpp"

#include <bit>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace dkm {
namespace {

bool is_binary_weights(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return ext == ".bin" || ext == ".f32";
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::vector<float> read_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open weight file '" + path.string() + "'");
  std::vector<float> out;
  if (is_binary_weights(path)) {
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    require(bytes.size() % 4 == 0, ErrorCode::kIo,
            "weight file '" + path.string() + "' is not a whole number of float32 values");
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      const std::uint32_t bits = std::uint32_t{bytes[i]} | std::uint32_t{bytes[i + 1]} << 8 |
                                 std::uint32_t{bytes[i + 2]} << 16 | std::uint32_t{bytes[i + 3]} << 24;
      out.push_back(std::bit_cast<float>(bits));
    }
  } else {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto text = trim(line);
      if (text.empty() || text[0] == '#') continue;
      float value = 0;
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
      require(ec == std::errc() && ptr == text.data() + text.size(), ErrorCode::kIo,
              path.string() + ":" + std::to_string(line_no) + ": not a number: '" + text + "'");
      out.push_back(value);
    }
  }
  for (float v : out)
    require(std::isfinite(v), ErrorCode::kNumeric, "weight file '" + path.string() + "' has non-finite values");
  return out;
}

void write_weights(const std::filesystem::path& path, std::span<const float> weights) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  if (is_binary_weights(path)) {
    for (float v : weights) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff), static_cast<char>(bits >> 24)};
      out.write(bytes, 4);
    }
  } else {
    char buf[32];
    for (float v : weights) {
      std::snprintf(buf, sizeof buf, "%.9g\n", static_cast<double>(v));
      out << buf;
    }
  }
  require(static_cast<bool>(out), ErrorCode::kIo, "write to '" + path.string() + "' failed");
}

namespace harness {
namespace {

namespace pt = boost::property_tree;

class ConfigReader {
 public:
  explicit ConfigReader(const pt::ptree& tree) : tree_(tree) {
    for (const auto& [section, body] : tree) {
      if (body.empty()) {
        errors_.push_back("'" + section + "': keys must live inside a [section]");
        continue;
      }
      for (const auto& [key, value] : body) present_.insert(section + "." + key);
    }
  }

  template <typename U>
  std::optional<U> optional(const std::string& key) {
    known_.insert(key);
    auto node = tree_.get_optional<std::string>(pt::ptree::path_type(key, '.'));
    if (!node) return std::nullopt;
    if constexpr (std::is_same_v<U, std::string>) {
      return trim(*node);
    } else if constexpr (std::is_same_v<U, bool>) {
      const auto v = trim(*node);
      if (v == "true" || v == "1" || v == "yes") return true;
      if (v == "false" || v == "0" || v == "no") return false;
      errors_.push_back(key + ": expected a boolean, got '" + v + "'");
      return std::nullopt;
    } else {
      const auto v = trim(*node);
      U value{};
      const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), value);
      if (ec != std::errc() || ptr != v.data() + v.size()) {
        errors_.push_back(key + ": expected a number, got '" + v + "'");
        return std::nullopt;
      }
      return value;
    }
  }

  template <typename U>
  std::optional<U> required(const std::string& key) {
    const bool exists = present_.contains(key);
    auto v = optional<U>(key);
    if (!exists) errors_.push_back("missing required key '" + key + "'");
    return v;
  }

  bool has_section(const std::string& name) const { return tree_.find(name) != tree_.not_found(); }
  void error(std::string message) { errors_.push_back(std::move(message)); }

  void finish() {
    for (const auto& key : present_)
      if (!known_.contains(key)) errors_.push_back("unknown key '" + key + "'");
    if (errors_.empty()) return;
    std::string message = std::to_string(errors_.size()) + " config error(s): ";
    for (std::size_t i = 0; i < errors_.size(); ++i) message += (i ? "; " : "") + errors_[i];
    fail(ErrorCode::kConfig, message);
  }

 private:
  const pt::ptree& tree_;
  std::set<std::string> present_;
  std::set<std::string> known_;
  std::vector<std::string> errors_;
};

template <typename Fn>
void guarded(ConfigReader& reader, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    reader.error(e.what());
  }
}

}  // namespace

Experiment parse_experiment(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorCode::kConfig, std::string("malformed config: ") + e.what());
  }
  ConfigReader r(tree);
  Experiment e;

  if (auto v = r.required<std::string>("dataset.kind")) guarded(r, [&] { e.dataset.kind = parse_dataset_kind(*v); });
  if (auto v = r.required<std::size_t>("dataset.samples")) e.dataset.samples = *v;
  if (auto v = r.required<int>("dataset.classes")) e.dataset.classes = *v;
  if (auto v = r.optional<double>("dataset.noise")) e.dataset.noise = *v;

  if (auto v = r.required<std::string>("model.hidden")) {
    e.model.hidden.clear();
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto t = trim(item);
      int width = 0;
      const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), width);
      if (ec != std::errc() || ptr != t.data() + t.size() || width < 1) {
        r.error("model.hidden: bad layer width '" + t + "'");
        continue;
      }
      e.model.hidden.push_back(width);
    }
  }
  e.model.input_dim = 2;
  e.model.output_dim = e.dataset.classes;

  if (auto v = r.required<int>("train.epochs")) e.train.epochs = *v;
  if (auto v = r.required<std::size_t>("train.batch_size")) e.train.batch_size = *v;
  if (auto v = r.optional<double>("train.learning_rate")) e.train.learning_rate = *v;
  if (auto v = r.optional<double>("train.momentum")) e.train.momentum = *v;
  guarded(r, [&] { e.train.validate(); });

  DkmConfig base;
  if (auto v = r.required<std::string>("clustering.mode")) guarded(r, [&] { e.plan.mode = parse_attention_mode(*v); });
  const bool clustering = e.plan.mode != AttentionMode::kNone;
  if (auto v = clustering ? r.required<double>("clustering.temperature")
                          : r.optional<double>("clustering.temperature"))
    base.temperature = *v;
  if (auto v = r.optional<double>("clustering.epsilon")) base.epsilon = *v;
  if (auto v = r.optional<int>("clustering.max_iterations")) base.max_iterations = *v;
  if (auto v = r.optional<std::string>("clustering.metric")) guarded(r, [&] { base.metric = parse_metric(*v); });
  if (auto v = r.optional<std::string>("clustering.init")) guarded(r, [&] { base.init = parse_init(*v); });
  if (auto v = r.optional<int>("clustering.gumbel_draws")) e.plan.gumbel_draws = *v;
  if (auto v = r.optional<int>("clustering.small_layer_bits")) e.plan.policy.small_layer_bits = *v;
  if (auto v = r.optional<std::size_t>("clustering.small_layer_threshold")) e.plan.policy.small_layer_threshold = *v;
  if (auto v = r.optional<bool>("clustering.exclude_first")) e.plan.policy.exclude_first = *v;
  if (auto v = r.optional<bool>("clustering.exclude_last")) e.plan.policy.exclude_last = *v;
  if (e.plan.gumbel_draws < 1) r.error("clustering.gumbel_draws: must be >= 1");

  for (const std::string group : {"hidden", "output"}) {
    if (!r.has_section(group)) continue;
    DkmConfig cfg = base;
    if (auto v = r.required<int>(group + ".bits")) cfg.bits = *v;
    if (auto v = r.required<int>(group + ".dim")) cfg.dim = *v;
    if (auto v = r.optional<double>(group + ".temperature")) cfg.temperature = *v;
    if (auto v = r.optional<double>(group + ".epsilon")) cfg.epsilon = *v;
    if (auto v = r.optional<int>(group + ".max_iterations")) cfg.max_iterations = *v;
    guarded(r, [&] { cfg.validate(); });
    e.plan.groups[group] = cfg;
  }
  if (clustering && e.plan.groups.empty())
    r.error("clustering.mode is '" + std::string(to_string(e.plan.mode)) +
            "' but no [hidden] or [output] group is configured");
  r.finish();
  return e;
}

Experiment load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open config '" + path.string() + "'");
  return parse_experiment(in);
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

namespace {

nlohmann::json matrix_json(const MatrixD& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.vector()}};
}

MatrixD matrix_from(const nlohmann::json& j) {
  return MatrixD(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                 j.at("data").get<std::vector<double>>());
}

nlohmann::json config_json(const DkmConfig& c) {
  return {{"bits", c.bits},
          {"dim", c.dim},
          {"temperature", c.temperature},
          {"epsilon", c.epsilon},
          {"max_iterations", c.max_iterations},
          {"metric", std::string(to_string(c.metric))},
          {"init", std::string(to_string(c.init))}};
}

DkmConfig config_from(const nlohmann::json& j) {
  DkmConfig c;
  c.bits = j.at("bits").get<int>();
  c.dim = j.at("dim").get<int>();
  c.temperature = j.at("temperature").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.max_iterations = j.at("max_iterations").get<int>();
  c.metric = parse_metric(j.at("metric").get<std::string>());
  c.init = parse_init(j.at("init").get<std::string>());
  c.validate();
  return c;
}

}  // namespace

nlohmann::json model_to_json(const ToyModel& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers) {
    nlohmann::json jl = {{"name", l.name},
                         {"group", l.group},
                         {"weights", matrix_json(l.weights)},
                         {"bias", matrix_json(l.bias)}};
    if (l.scheme) jl["scheme"] = config_json(*l.scheme);
    if (l.warm_start) jl["codebook"] = matrix_json(l.warm_start->centroids());
    layers.push_back(std::move(jl));
  }
  return {{"format", "dkm-model"},
          {"version", 1},
          {"mode", std::string(to_string(model.mode))},
          {"gumbel_draws", model.gumbel_draws},
          {"layers", std::move(layers)}};
}

ToyModel model_from_json(const nlohmann::json& j) {
  try {
    require(j.at("format").get<std::string>() == "dkm-model", ErrorCode::kFormatBadMagic,
            "not a dkm model file");
    require(j.at("version").get<int>() == 1, ErrorCode::kFormatVersion, "unsupported model version");
    ToyModel model;
    model.mode = parse_attention_mode(j.at("mode").get<std::string>());
    model.gumbel_draws = j.at("gumbel_draws").get<int>();
    for (const auto& jl : j.at("layers")) {
      DenseLayer l;
      l.name = jl.at("name").get<std::string>();
      l.group = jl.at("group").get<std::string>();
      l.weights = matrix_from(jl.at("weights"));
      l.bias = matrix_from(jl.at("bias"));
      l.weight_velocity = MatrixD(l.weights.rows(), l.weights.cols());
      l.bias_velocity = MatrixD(l.bias.rows(), l.bias.cols());
      if (jl.contains("scheme")) l.scheme = config_from(jl.at("scheme"));
      if (jl.contains("codebook"))
        l.warm_start = Codebook<double>(matrix_from(jl.at("codebook")), l.scheme ? l.scheme->bits : 0);
      model.layers.push_back(std::move(l));
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormatInvalidHeader, std::string("malformed model file: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const ToyModel& model) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  out << model_to_json(model).dump(1) << '\n';
  require(static_cast<bool>(out), ErrorCode::kIo, "write to '" + path.string() + "' failed");
}

ToyModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open model '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormatInvalidHeader, std::string("malformed model file: ") + e.what());
  }
  return model_from_json(j);
}

}  // namespace harness
}  // namespace dkm
