#include "foal/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "foal/errors.hpp"

namespace foal {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt(bool v) { return v ? "true" : "false"; }

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FOAL_STR_KEY(name, field) \
  Key { name, [](RunConfig& c, const std::string& v) { c.field = v; }, [](const RunConfig& c) { return c.field; } }
#define FOAL_INT_KEY(name, field, type)                                                        \
  Key {                                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_integer<type>(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                            \
  }
#define FOAL_DBL_KEY(name, field) \
  Key { name, [](RunConfig& c, const std::string& v) { c.field = parse_double(name, v); }, [](const RunConfig& c) { return fmt(c.field); } }
#define FOAL_BOOL_KEY(name, field) \
  Key { name, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }, [](const RunConfig& c) { return fmt(c.field); } }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      FOAL_STR_KEY("data", data),
      FOAL_STR_KEY("val_data", val_data),
      FOAL_INT_KEY("val_group", val_group, std::int64_t),
      FOAL_STR_KEY("out_dir", out_dir),
      FOAL_INT_KEY("seed", seed, std::uint64_t),
      FOAL_INT_KEY("jobs", jobs, std::size_t),
      FOAL_BOOL_KEY("ablation", ablation),
      FOAL_INT_KEY("epochs", optim.epochs, std::size_t),
      FOAL_INT_KEY("batch_size", optim.batch_size, std::size_t),
      FOAL_DBL_KEY("lr", optim.lr),
      FOAL_DBL_KEY("beta1", optim.beta1),
      FOAL_DBL_KEY("beta2", optim.beta2),
      FOAL_DBL_KEY("adam_eps", optim.eps),
      FOAL_DBL_KEY("weight_decay", optim.weight_decay),
      FOAL_INT_KEY("proj_hidden", model.proj_hidden, std::size_t),
      FOAL_INT_KEY("proj_dim", model.align.proj_dim, std::size_t),
      FOAL_DBL_KEY("proj_dropout", model.proj_dropout),
      FOAL_DBL_KEY("temperature", model.align.temperature),
      FOAL_BOOL_KEY("l2_normalize", model.align.l2_normalize),
      FOAL_BOOL_KEY("per_positive_norm", model.align.per_positive_norm),
      FOAL_INT_KEY("fusion_layers", model.fusion_layers, std::size_t),
      FOAL_INT_KEY("heads", model.heads, std::size_t),
      FOAL_DBL_KEY("attn_dropout", model.attn_dropout),
      FOAL_DBL_KEY("lambda", model.lambda),
      FOAL_BOOL_KEY("enable_avel", model.enable_avel),
      FOAL_BOOL_KEY("enable_mem", model.enable_mem),
  };
  return table;
}

#undef FOAL_STR_KEY
#undef FOAL_INT_KEY
#undef FOAL_DBL_KEY
#undef FOAL_BOOL_KEY

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = keys();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    it->set(cfg, value);
  }
  validate(cfg.model.align);
  validate(cfg.optim);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_text(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : keys()) os << k.name << " = " << k.get(cfg) << '\n';
  return os.str();
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.push_back(k.name);
  return out;
}

FoalNetConfig resolved_model_config(const RunConfig& cfg, const DatasetHeader& header) {
  FoalNetConfig mc = cfg.model;
  mc.audio_dim = header.audio_dim;
  mc.video_dim = header.video_dim;
  mc.classes = header.classes;
  mc.seed = cfg.seed;
  validate(mc);
  return mc;
}

OptimConfig resolved_optim_config(const RunConfig& cfg) {
  OptimConfig oc = cfg.optim;
  oc.seed = cfg.seed;
  return oc;
}

}  // namespace foal
