#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace card {

// Line-oriented `key = value` file. '#' starts a comment; blank lines are
// skipped. Typed getters remember which keys were read so leftovers can be
// reported as unknown.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool contains(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Throws ConfigError naming every key that no getter asked for.
  void reject_unused() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
  mutable std::set<std::string> used_;
};

// Serializes flat key/value pairs in the same format, in the given order.
std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace card
