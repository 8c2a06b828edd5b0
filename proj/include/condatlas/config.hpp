#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace condatlas {

// Flat key=value configuration with '#' comments and `include <path>`
// directives (paths relative to the including file). Later assignments
// override earlier ones, so includes act as defaults.
class Config {
public:
  static Config load(const std::string &path);
  static Config from_string(const std::string &text, const std::string &base_dir = ".");

  bool has(const std::string &key) const;
  void set(const std::string &key, const std::string &value);

  std::string get_str(const std::string &key) const; // throws if missing
  std::string get_str(const std::string &key, const std::string &fallback) const;
  int64_t get_int(const std::string &key) const;
  int64_t get_int(const std::string &key, int64_t fallback) const;
  double get_double(const std::string &key) const;
  double get_double(const std::string &key, double fallback) const;
  bool get_bool(const std::string &key) const;
  bool get_bool(const std::string &key, bool fallback) const;
  std::vector<int> get_ints(const std::string &key) const;           // space-separated
  std::vector<int> get_ints(const std::string &key, const std::vector<int> &fallback) const;
  std::vector<double> get_doubles(const std::string &key) const;
  std::vector<double> get_doubles(const std::string &key, const std::vector<double> &fallback) const;

  // Resolved entries in first-assignment order.
  const std::vector<std::pair<std::string, std::string>> &entries() const { return entries_; }
  std::string to_string() const;

  // Throws listing every key not in `allowed`.
  void check_allowed(const std::vector<std::string> &allowed) const;

private:
  void parse(const std::string &text, const std::string &base_dir, std::vector<std::string> &stack);
  int find(const std::string &key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
};

} // namespace condatlas
