#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "graftkd/tensor.hpp"

namespace graftkd {

// Flat key-value config with [section] headers, '#' / ';' comments, and
// line-precise validation errors. Values are typed on access.
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key) const;
  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  long long get_int(const std::string& section, const std::string& key) const;
  long long get_int(const std::string& section, const std::string& key, long long fallback) const;
  double get_double(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<double> get_double_list(const std::string& section, const std::string& key) const;

  // Keys in `section` that start with `prefix`, e.g. lr_unit1, lr_unit2.
  std::vector<std::string> keys_with_prefix(const std::string& section,
                                            const std::string& prefix) const;

  // Rejects unknown sections/keys, naming file and line.
  void validate(const std::map<std::string, std::set<std::string>>& schema,
                const std::map<std::string, std::vector<std::string>>& prefix_schema = {}) const;

  const std::string& origin() const { return origin_; }
  std::string render() const;  // canonical text form (for manifests)

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  std::string origin_;
  std::map<std::string, std::map<std::string, Entry>> sections_;
  std::map<std::string, int> section_line_;

  const Entry& entry_or_fail(const std::string& section, const std::string& key) const;
  [[noreturn]] void fail_at(int line, const std::string& msg) const;
};

}  // namespace graftkd
