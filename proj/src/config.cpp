#include "condatlas/config.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>
#include <stdexcept>

#include "condatlas/reportio.hpp"

namespace fs = std::filesystem;

namespace condatlas {

namespace {

std::string trim(const std::string &s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos)
    return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

} // namespace

Config Config::load(const std::string &path) {
  Config c;
  std::vector<std::string> stack;
  stack.push_back(fs::weakly_canonical(path).string());
  c.parse(read_text_file(path), fs::path(path).parent_path().string(), stack);
  return c;
}

Config Config::from_string(const std::string &text, const std::string &base_dir) {
  Config c;
  std::vector<std::string> stack;
  c.parse(text, base_dir, stack);
  return c;
}

void Config::parse(const std::string &text, const std::string &base_dir, std::vector<std::string> &stack) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos)
      line = line.substr(0, hash);
    line = trim(line);
    if (line.empty())
      continue;
    if (line.rfind("include ", 0) == 0) {
      const std::string rel = trim(line.substr(8));
      const fs::path inc = base_dir.empty() ? fs::path(rel) : fs::path(base_dir) / rel;
      const std::string canon = fs::weakly_canonical(inc).string();
      if (std::find(stack.begin(), stack.end(), canon) != stack.end())
        throw std::runtime_error("config: include cycle at " + canon);
      stack.push_back(canon);
      parse(read_text_file(inc.string()), inc.parent_path().string(), stack);
      stack.pop_back();
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config: empty key on line " + std::to_string(lineno));
    set(key, value);
  }
}

int Config::find(const std::string &key) const {
  for (size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].first == key)
      return static_cast<int>(i);
  return -1;
}

bool Config::has(const std::string &key) const { return find(key) >= 0; }

void Config::set(const std::string &key, const std::string &value) {
  const int i = find(key);
  if (i >= 0)
    entries_[i].second = value;
  else
    entries_.push_back({key, value});
}

std::string Config::get_str(const std::string &key) const {
  const int i = find(key);
  if (i < 0)
    throw std::runtime_error("config: missing required key '" + key + "'");
  return entries_[i].second;
}

std::string Config::get_str(const std::string &key, const std::string &fallback) const {
  const int i = find(key);
  return i < 0 ? fallback : entries_[i].second;
}

int64_t Config::get_int(const std::string &key) const {
  const std::string v = get_str(key);
  try {
    size_t pos = 0;
    const int64_t r = std::stoll(v, &pos);
    if (pos != v.size())
      throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::logic_error &) {
    throw std::runtime_error("config: key '" + key + "' is not an integer: '" + v + "'");
  }
}

int64_t Config::get_int(const std::string &key, int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double Config::get_double(const std::string &key) const {
  const std::string v = get_str(key);
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size())
      throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::logic_error &) {
    throw std::runtime_error("config: key '" + key + "' is not a number: '" + v + "'");
  }
}

double Config::get_double(const std::string &key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool Config::get_bool(const std::string &key) const {
  const std::string v = get_str(key);
  if (v == "true" || v == "1" || v == "yes")
    return true;
  if (v == "false" || v == "0" || v == "no")
    return false;
  throw std::runtime_error("config: key '" + key + "' is not a boolean: '" + v + "'");
}

bool Config::get_bool(const std::string &key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

std::vector<int> Config::get_ints(const std::string &key) const {
  std::istringstream in(get_str(key));
  std::vector<int> out;
  int x;
  while (in >> x)
    out.push_back(x);
  if (!in.eof())
    throw std::runtime_error("config: key '" + key + "' is not an integer list");
  return out;
}

std::vector<int> Config::get_ints(const std::string &key, const std::vector<int> &fallback) const {
  return has(key) ? get_ints(key) : fallback;
}

std::vector<double> Config::get_doubles(const std::string &key) const {
  std::istringstream in(get_str(key));
  std::vector<double> out;
  double x;
  while (in >> x)
    out.push_back(x);
  if (!in.eof())
    throw std::runtime_error("config: key '" + key + "' is not a number list");
  return out;
}

std::vector<double> Config::get_doubles(const std::string &key, const std::vector<double> &fallback) const {
  return has(key) ? get_doubles(key) : fallback;
}

std::string Config::to_string() const {
  std::string out;
  for (const auto &[k, v] : entries_)
    out += k + " = " + v + "\n";
  return out;
}

void Config::check_allowed(const std::vector<std::string> &allowed) const {
  std::string bad;
  for (const auto &[k, v] : entries_)
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      bad += bad.empty() ? k : ", " + k;
  if (!bad.empty())
    throw std::runtime_error("config: unknown keys: " + bad);
}

} // namespace condatlas
