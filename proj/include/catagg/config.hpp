#pragma once

#include <map>
#include <string>
#include <vector>

namespace catagg {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

// Every recognised key with its default, in echo order.
const std::vector<ConfigKey>& config_keys();

// Flat `key = value` configuration. Unknown keys are rejected.
class RunConfig {
 public:
  RunConfig();

  // `#` starts a comment; blank lines are ignored. Throws ConfigError.
  void load_file(const std::string& path);
  void parse_text(const std::string& text, const std::string& origin = "<text>");
  void set(const std::string& key, const std::string& value);
  // Parses "key=value".
  void set_assignment(const std::string& assignment);

  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::vector<std::int64_t> get_int_list(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;

  // Resolved model-dependent values ("auto" mode).
  std::string model() const;
  std::string mode() const;

  // One "key = value" line per key, in canonical order.
  std::string text() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace catagg
