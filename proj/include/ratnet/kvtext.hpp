#pragma once

// Structured key-value text used by every configuration and map file:
//
//   # comment
//   key = value
//   [kind name]
//   key = value
//
// Entries before the first section header belong to the root table.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace ratnet {

struct KvEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

// Typed view over a list of entries. Every lookup marks the key as consumed;
// finish() rejects whatever was never looked up.
class KvTable {
 public:
  KvTable() = default;
  KvTable(std::vector<KvEntry> entries, std::string context);

  bool has(const std::string& key) const;
  // Single-valued lookup; a repeated key is an error.
  std::optional<std::string> take(const std::string& key);
  std::vector<std::string> take_all(const std::string& key);

  std::string str(const std::string& key, const std::string& fallback);
  std::string required(const std::string& key);
  double real(const std::string& key, double fallback);
  std::uint64_t u64(const std::string& key, std::uint64_t fallback);
  std::size_t size(const std::string& key, std::size_t fallback);
  bool boolean(const std::string& key, bool fallback);
  // Comma-separated list; empty when absent.
  std::vector<std::string> list(const std::string& key);

  void finish() const;
  const std::string& context() const { return context_; }

 private:
  const KvEntry* lookup(const std::string& key);
  std::string where(const KvEntry& e) const;

  std::vector<KvEntry> entries_;
  std::string context_;
  std::set<std::string> consumed_;
};

struct KvSection {
  std::string kind;
  std::string name;
  std::size_t line = 0;
  std::vector<KvEntry> entries;
};

struct KvFile {
  std::string source;
  std::vector<KvEntry> root;
  std::vector<KvSection> sections;

  static KvFile parse(std::string_view text, const std::string& source = "<text>");
  static KvFile load(const std::filesystem::path& path);

  KvTable root_table() const { return KvTable(root, source); }
  KvTable section_table(const KvSection& s) const;
};

// Inverse of KvTable::list.
std::string join_list(const std::vector<std::string>& items);

}  // namespace ratnet
