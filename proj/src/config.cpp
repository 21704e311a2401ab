#include "catagg/config.hpp"

#include <fstream>
#include <sstream>

#include "catagg/errors.hpp"

namespace catagg {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"model", "cats", "aggregator: cats | catspp"},
      {"mode", "auto", "serial | parallel | both; auto = serial for cats, parallel for catspp"},
      {"seed", "0", "parameter init and trainer seed"},
      {"image", "128", "input image extent in pixels"},
      {"grid", "16", "flow grid extent"},
      {"beta", "20", "soft-argmax inverse temperature"},
      {"backbone.channels", "8,16,32,32", "toy backbone channels: stem, q3, q4, q5"},
      {"cats.levels", "auto", "backbone levels stacked for cats; auto = every level with extent >= grid"},
      {"cats.n_encoders", "1", "encoders (intra + inter block pairs)"},
      {"cats.n_heads", "8", "attention heads"},
      {"cats.p", "128", "appearance embedding width"},
      {"cats.ffn_ratio", "4", "FFN expansion ratio"},
      {"catspp.layers", "3,4,5", "pyramid layers"},
      {"catspp.d", "16", "embedded channels"},
      {"catspp.kernel", "3", "4D kernel extent"},
      {"catspp.embed.stride", "2", "embedding conv stride"},
      {"catspp.proj_stride", "2", "query/key conv stride over the feature pair"},
      {"catspp.attn_dim", "128", "query/key width"},
      {"catspp.ffn_ratio", "2", "volumetric FFN expansion ratio"},
      {"catspp.n_encoders", "1", "efficient blocks per layer"},
      {"catspp.n_heads", "1", "attention heads"},
      {"catspp.p", "128", "appearance embedding width"},
      {"train.lr_aggregator", "3e-5", "aggregator learning rate"},
      {"train.lr_backbone", "3e-6", "backbone learning rate"},
      {"train.weight_decay", "0.05", "decoupled weight decay (rank >= 2 parameters)"},
      {"train.steps", "1000", "optimizer steps"},
      {"train.batch", "1", "pairs per step (gradient accumulation)"},
      {"train.min_lr_ratio", "0.1", "cosine decay floor as a fraction of the initial rate"},
      {"train.stop_aepe", "0", "stop once the step loss falls below this (0 = never)"},
      {"train.log_every", "50", "progress line interval in steps (0 = silent)"},
      {"eval.alphas", "0.05,0.1,0.15", "PCK thresholds"},
      {"eval.basis", "img", "PCK basis: img | bbox"},
      {"data.warp_magnitude", "1", "synthetic warp magnitude (0 = identity)"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  parse_text(ss.str(), path);
}

void RunConfig::parse_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t pos = 0;
    const long long r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs an integer, got '" + v + "'");
  }
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs a number, got '" + v + "'");
  }
}

std::vector<std::int64_t> RunConfig::get_int_list(const std::string& key) const {
  std::vector<std::int64_t> out;
  for (const auto& item : split_list(get(key))) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoll(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' needs integers, got '" + item + "'");
    }
  }
  return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split_list(get(key))) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' needs numbers, got '" + item + "'");
    }
  }
  return out;
}

std::string RunConfig::model() const {
  const std::string& m = get("model");
  if (m != "cats" && m != "catspp") throw ConfigError("unknown model '" + m + "' (cats | catspp)");
  return m;
}

std::string RunConfig::mode() const {
  const std::string& m = get("mode");
  if (m == "auto") return model() == "cats" ? "serial" : "parallel";
  return m;
}

std::string RunConfig::text() const {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + values_.at(k.name) + "\n";
  return out;
}

}  // namespace catagg
