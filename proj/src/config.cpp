#include "graftkd/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace graftkd {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_string(ss.str(), path);
}

ConfigFile ConfigFile::parse_string(const std::string& text, const std::string& origin) {
  ConfigFile cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        cfg.fail_at(lineno, "unterminated section header '" + t + "'");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) cfg.fail_at(lineno, "empty section name");
      cfg.section_line_.emplace(section, lineno);
      cfg.sections_[section];
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      cfg.fail_at(lineno, "expected 'key = value', got '" + t + "'");
    const std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (const size_t cmt = value.find(" #"); cmt != std::string::npos)
      value = trim(value.substr(0, cmt));
    if (key.empty()) cfg.fail_at(lineno, "empty key");
    if (section.empty()) cfg.fail_at(lineno, "key '" + key + "' outside any [section]");
    if (cfg.sections_[section].count(key))
      cfg.fail_at(lineno, "duplicate key '" + key + "' in [" + section + "]");
    cfg.sections_[section][key] = {value, lineno};
  }
  return cfg;
}

void ConfigFile::fail_at(int line, const std::string& msg) const {
  fail(strf("%s:%d: %s", origin_.c_str(), line, msg.c_str()));
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  return s != sections_.end() && s->second.count(key) > 0;
}

const ConfigFile::Entry& ConfigFile::entry_or_fail(const std::string& section,
                                                   const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) fail(origin_ + ": missing section [" + section + "]");
  auto k = s->second.find(key);
  if (k == s->second.end())
    fail(origin_ + ": missing key '" + key + "' in [" + section + "]");
  return k->second;
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key) const {
  return entry_or_fail(section, key).value;
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key,
                                   const std::string& fallback) const {
  return has(section, key) ? get_string(section, key) : fallback;
}

long long ConfigFile::get_int(const std::string& section, const std::string& key) const {
  const Entry& e = entry_or_fail(section, key);
  try {
    size_t pos = 0;
    const long long v = std::stoll(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    fail_at(e.line, "expected integer for '" + key + "', got '" + e.value + "'");
  }
}

long long ConfigFile::get_int(const std::string& section, const std::string& key,
                              long long fallback) const {
  return has(section, key) ? get_int(section, key) : fallback;
}

double ConfigFile::get_double(const std::string& section, const std::string& key) const {
  const Entry& e = entry_or_fail(section, key);
  try {
    size_t pos = 0;
    const double v = std::stod(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    fail_at(e.line, "expected number for '" + key + "', got '" + e.value + "'");
  }
}

double ConfigFile::get_double(const std::string& section, const std::string& key,
                              double fallback) const {
  return has(section, key) ? get_double(section, key) : fallback;
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key,
                          bool fallback) const {
  if (!has(section, key)) return fallback;
  const Entry& e = entry_or_fail(section, key);
  std::string v = e.value;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail_at(e.line, "expected boolean for '" + key + "', got '" + e.value + "'");
}

std::vector<double> ConfigFile::get_double_list(const std::string& section,
                                                const std::string& key) const {
  const Entry& e = entry_or_fail(section, key);
  std::vector<double> out;
  std::istringstream ss(e.value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (...) {
      fail_at(e.line, "expected comma-separated numbers for '" + key + "'");
    }
  }
  if (out.empty()) fail_at(e.line, "empty list for '" + key + "'");
  return out;
}

std::vector<std::string> ConfigFile::keys_with_prefix(const std::string& section,
                                                      const std::string& prefix) const {
  std::vector<std::string> out;
  auto s = sections_.find(section);
  if (s == sections_.end()) return out;
  for (const auto& [k, v] : s->second)
    if (k.rfind(prefix, 0) == 0) out.push_back(k);
  return out;
}

void ConfigFile::validate(const std::map<std::string, std::set<std::string>>& schema,
                          const std::map<std::string, std::vector<std::string>>& prefix_schema) const {
  for (const auto& [section, entries] : sections_) {
    auto sit = schema.find(section);
    if (sit == schema.end()) {
      auto lit = section_line_.find(section);
      fail_at(lit == section_line_.end() ? 0 : lit->second,
              "unknown section [" + section + "]");
    }
    auto pit = prefix_schema.find(section);
    for (const auto& [key, entry] : entries) {
      if (sit->second.count(key)) continue;
      bool prefixed = false;
      if (pit != prefix_schema.end()) {
        for (const auto& p : pit->second) {
          if (key.rfind(p, 0) == 0) {
            prefixed = true;
            break;
          }
        }
      }
      if (!prefixed)
        fail_at(entry.line, "unknown key '" + key + "' in [" + section + "]");
    }
  }
}

std::string ConfigFile::render() const {
  std::ostringstream out;
  for (const auto& [section, entries] : sections_) {
    out << "[" << section << "]\n";
    for (const auto& [k, e] : entries) out << k << " = " << e.value << "\n";
    out << "\n";
  }
  return out.str();
}

}  // namespace graftkd
