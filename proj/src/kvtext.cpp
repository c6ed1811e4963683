#include "ratnet/kvtext.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "ratnet/common.hpp"

namespace ratnet {

KvTable::KvTable(std::vector<KvEntry> entries, std::string context)
    : entries_(std::move(entries)), context_(std::move(context)) {}

std::string KvTable::where(const KvEntry& e) const { return context_ + ":" + std::to_string(e.line); }

bool KvTable::has(const std::string& key) const {
  for (const auto& e : entries_)
    if (e.key == key) return true;
  return false;
}

const KvEntry* KvTable::lookup(const std::string& key) {
  consumed_.insert(key);
  const KvEntry* found = nullptr;
  for (const auto& e : entries_) {
    if (e.key != key) continue;
    if (found) throw ConfigError("duplicate config key '" + key + "' at " + where(e));
    found = &e;
  }
  return found;
}

std::optional<std::string> KvTable::take(const std::string& key) {
  const KvEntry* e = lookup(key);
  if (!e) return std::nullopt;
  return e->value;
}

std::vector<std::string> KvTable::take_all(const std::string& key) {
  consumed_.insert(key);
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (e.key == key) out.push_back(e.value);
  return out;
}

std::string KvTable::str(const std::string& key, const std::string& fallback) {
  auto v = take(key);
  return v ? *v : fallback;
}

std::string KvTable::required(const std::string& key) {
  auto v = take(key);
  if (!v || v->empty()) throw ConfigError("missing required config key '" + key + "' in " + context_);
  return *v;
}

double KvTable::real(const std::string& key, double fallback) {
  const KvEntry* e = lookup(key);
  if (!e) return fallback;
  try {
    return parse_double(e->value);
  } catch (const Error&) {
    throw ConfigError("config key '" + key + "' at " + where(*e) + ": expected a number, got '" + e->value + "'");
  }
}

std::uint64_t KvTable::u64(const std::string& key, std::uint64_t fallback) {
  const KvEntry* e = lookup(key);
  if (!e) return fallback;
  std::string_view s = trim(e->value);
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("config key '" + key + "' at " + where(*e) + ": expected a nonnegative integer, got '" +
                      e->value + "'");
  return v;
}

std::size_t KvTable::size(const std::string& key, std::size_t fallback) {
  return static_cast<std::size_t>(u64(key, fallback));
}

bool KvTable::boolean(const std::string& key, bool fallback) {
  const KvEntry* e = lookup(key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
  if (e->value == "false" || e->value == "0" || e->value == "no") return false;
  throw ConfigError("config key '" + key + "' at " + where(*e) + ": expected true or false, got '" + e->value + "'");
}

std::vector<std::string> KvTable::list(const std::string& key) {
  auto v = take(key);
  std::vector<std::string> out;
  if (!v) return out;
  for (const auto& item : split(*v, ',')) {
    const auto t = trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

void KvTable::finish() const {
  for (const auto& e : entries_)
    if (!consumed_.count(e.key)) throw ConfigError("unknown config key '" + e.key + "' at " + where(e));
}

KvFile KvFile::parse(std::string_view text, const std::string& source) {
  KvFile f;
  f.source = source;
  std::vector<KvEntry>* current = &f.root;
  std::size_t lineno = 0;
  for (const auto& raw : split(text, '\n')) {
    ++lineno;
    std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(source + ":" + std::to_string(lineno) + ": unterminated section header");
      std::string_view inner = trim(line.substr(1, line.size() - 2));
      KvSection s;
      s.line = lineno;
      const auto sp = inner.find_first_of(" \t");
      s.kind = std::string(inner.substr(0, sp));
      if (sp != std::string_view::npos) s.name = std::string(trim(inner.substr(sp)));
      if (s.kind.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty section header");
      f.sections.push_back(std::move(s));
      current = &f.sections.back().entries;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + std::string(line) + "'");
    KvEntry e{std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))), lineno};
    if (e.key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    current->push_back(std::move(e));
  }
  return f;
}

KvFile KvFile::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

KvTable KvFile::section_table(const KvSection& s) const {
  return KvTable(s.entries, source + " [" + s.kind + (s.name.empty() ? "" : " " + s.name) + "]");
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

}  // namespace ratnet
