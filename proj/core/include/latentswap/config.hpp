#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace lswap {

/// Flat key=value configuration. '#' starts a comment; blank lines are
/// ignored; later assignments win.
class Config {
 public:
  static Config parse(std::string_view text, std::string_view origin = "config");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void erase(const std::string& key) { values_.erase(key); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> find(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::string require_string(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  /// on/off, true/false, yes/no, 1/0.
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Sorted key=value lines.
std::string format_manifest(const std::map<std::string, std::string>& entries);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace lswap
