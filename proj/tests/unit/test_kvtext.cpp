#include "doctest.h"
#include "ratnet/common.hpp"
#include "ratnet/kvtext.hpp"

using namespace ratnet;

TEST_CASE("root entries and sections") {
  const auto f = KvFile::parse("# c\na = 1\nlist = x, y ,z\n\n[site A]\ntasks = t1\n[site B]\n", "cfg");
  CHECK(f.root.size() == 2);
  REQUIRE(f.sections.size() == 2);
  CHECK(f.sections[0].kind == "site");
  CHECK(f.sections[0].name == "A");
  CHECK(f.sections[1].entries.empty());
  auto t = f.root_table();
  CHECK(t.u64("a", 0) == 1);
  CHECK(t.list("list") == std::vector<std::string>{"x", "y", "z"});
  t.finish();
}

TEST_CASE("typed lookups and fallbacks") {
  auto t = KvFile::parse("r = 0.25\nb1 = yes\nb2 = 0\ns = hello world\n").root_table();
  CHECK(t.real("r", 1.0) == 0.25);
  CHECK(t.boolean("b1", false));
  CHECK_FALSE(t.boolean("b2", true));
  CHECK(t.str("s", "") == "hello world");
  CHECK(t.size("missing", 7) == 7);
  CHECK_THROWS_AS(t.required("other"), ConfigError);
  t.finish();
}

TEST_CASE("unknown and malformed keys are configuration errors") {
  auto t = KvFile::parse("known = 1\nbogus = 2\n", "run.cfg").root_table();
  t.u64("known", 0);
  CHECK_THROWS_WITH_AS(t.finish(), "unknown config key 'bogus' at run.cfg:2", ConfigError);
  auto dup = KvFile::parse("a = 1\na = 2\n").root_table();
  CHECK_THROWS_AS(dup.take("a"), ConfigError);
  auto typed = KvFile::parse("n = abc\nb = maybe\nneg = -3\n").root_table();
  CHECK_THROWS_AS(typed.u64("n", 0), ConfigError);
  CHECK_THROWS_AS(typed.boolean("b", false), ConfigError);
  CHECK_THROWS_AS(typed.u64("neg", 0), ConfigError);
  CHECK_THROWS_AS(KvFile::parse("just text\n"), ConfigError);
  CHECK_THROWS_AS(KvFile::parse("[unterminated\n"), ConfigError);
}

TEST_CASE("list round-trip") {
  const std::vector<std::string> items{"a", "b c", "d"};
  auto t = KvFile::parse("k = " + join_list(items) + "\n").root_table();
  CHECK(t.list("k") == items);
}
