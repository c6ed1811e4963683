#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "ratnet/datagen.hpp"

using namespace ratnet;

namespace {

SyntheticTaskSpec spec_for(const std::string& id, std::vector<int> concepts, DomainTransform t, SplitCounts counts) {
  SyntheticTaskSpec s;
  s.task_id = id;
  s.concept_subset = std::move(concepts);
  s.transform = std::move(t);
  s.class_priors = geometric_priors(s.concept_subset.size(), 1.0);
  s.counts = counts;
  return s;
}

std::vector<Sample> balanced(std::size_t per_class, std::size_t classes) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < per_class * classes; ++i) {
    Sample s;
    s.task_id = "B";
    s.local_label = i % classes;
    s.global_concept_id = static_cast<int>(i % classes);
    s.features = {static_cast<double>(i)};
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("noiseless identity view reproduces the prototype") {
  const auto reg = ConceptRegistry::generate(3, 4, 1.0, 0.5, 1);
  const auto d = generate_task(reg, spec_for("X", {2}, DomainTransform::identity(4), {5, 2, 2}), 3);
  REQUIRE(d.train.size() == 5);
  for (const auto& s : d.train) CHECK(s.features == reg.prototype(2));
}

TEST_CASE("geometric priors") {
  for (double p : geometric_priors(4, 1.0)) CHECK(p == 0.25);
  const auto p = geometric_priors(3, 0.5);
  CHECK(p[0] == doctest::Approx(4.0 / 7.0).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(2.0 / 7.0).epsilon(1e-15));
  CHECK(p[2] == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  CHECK_THROWS_AS(geometric_priors(3, 0.0), Error);
}

TEST_CASE("long-tail head class count follows the geometric prior") {
  const double rho = 0.8;
  const double expected = 2000.0 * (1.0 - rho) / (1.0 - std::pow(rho, 22));
  CHECK(expected == doctest::Approx(402.0).epsilon(0.005));
  CHECK(geometric_priors(22, rho)[0] * 2000.0 == doctest::Approx(expected).epsilon(1e-12));
  const auto b = make_benchmark(BenchmarkConfig{});
  std::size_t head = 0;
  for (const auto& s : b.long_tail.train) head += s.local_label == 0;
  const double sd = std::sqrt(2000.0 * 0.2 * 0.8);
  CHECK(std::abs(static_cast<double>(head) - expected) < 4.0 * sd);
}

TEST_CASE("concept registry respects the separation margin") {
  const auto reg = ConceptRegistry::generate(10, 8, 1.0, 2.5, 4);
  CHECK(reg.size() == 10);
  CHECK(reg.min_pairwise_distance() >= 2.5);
  CHECK(reg.checksum() == ConceptRegistry::generate(10, 8, 1.0, 2.5, 4).checksum());
  CHECK_THROWS_AS(ConceptRegistry::generate(10, 2, 0.1, 50.0, 4), Error);
}

TEST_CASE("domain transforms are invertible") {
  const auto t = DomainTransform::random(6, 0.3, 0.2, 0.5, 0.0, 9);
  const std::vector<double> z{1, -2, 0.5, 3, 0, -1};
  const auto back = t.invert(t.apply(z));
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(back[i] == doctest::Approx(z[i]).epsilon(1e-12));
}

TEST_CASE("task specs are validated") {
  const auto reg = ConceptRegistry::generate(3, 4, 1.0, 0.5, 1);
  auto s = spec_for("X", {0, 1}, DomainTransform::identity(4), {4, 2, 2});
  s.concept_subset = {0, 7};
  CHECK_THROWS_AS(generate_task(reg, s, 1), Error);
  s = spec_for("X", {0, 1}, DomainTransform::identity(4), {4, 2, 2});
  s.class_priors = {0.5, 0.6};
  CHECK_THROWS_AS(generate_task(reg, s, 1), Error);
  s = spec_for("X", {0, 1}, DomainTransform::identity(3), {4, 2, 2});
  CHECK_THROWS_AS(generate_task(reg, s, 1), Error);
}

TEST_CASE("zero-count splits are allowed") {
  const auto reg = ConceptRegistry::generate(3, 4, 1.0, 0.5, 1);
  const auto d = generate_task(reg, spec_for("X", {0, 1}, DomainTransform::identity(4), {0, 0, 6}), 2);
  CHECK(d.train.empty());
  CHECK(d.val.empty());
  CHECK(d.test.size() == 6);
}

TEST_CASE("default benchmark layout") {
  const auto b = make_benchmark(BenchmarkConfig{});
  CHECK(b.pretraining.size() == 5);
  for (const auto& d : b.pretraining) {
    CHECK(d.dim == 16);
    CHECK(d.train.size() == 500);
    CHECK(d.num_classes() == 3);
  }
  std::map<int, int> seen;
  for (const auto& d : b.pretraining)
    for (int c : d.concept_subset) ++seen[c];
  for (int c : b.zero_shot.concept_subset) CHECK(seen[c] >= 2);
  CHECK(b.zero_shot.train.empty());
  for (int c : b.few_shot.concept_subset) CHECK(seen.count(c) == 0);
  CHECK(b.long_tail.num_classes() == 22);
  CHECK(b.manifest() == make_benchmark(BenchmarkConfig{}).manifest());
  BenchmarkConfig other;
  other.seed = 43;
  CHECK(make_benchmark(other).manifest() != b.manifest());
}

TEST_CASE("low-noise tasks are linearly separable") {
  BenchmarkConfig c;
  c.pretrain_tasks = 3;
  c.noise = 0.3 * c.separation_margin;
  const auto b = make_benchmark(c);
  for (const auto& d : b.pretraining) {
    std::vector<std::vector<double>> xtr, xte;
    std::vector<std::size_t> ytr, yte;
    for (const auto& s : d.train) xtr.push_back(s.features), ytr.push_back(s.local_label);
    for (const auto& s : d.test) xte.push_back(s.features), yte.push_back(s.local_label);
    CHECK(oracle::Logistic::fit(xtr, ytr, d.num_classes()).accuracy(xte, yte) >= 0.95);
  }
}

TEST_CASE("benchmark configuration errors") {
  BenchmarkConfig c;
  c.pretrain_tasks = 1;
  CHECK_THROWS_AS(make_benchmark(c), Error);
  c = BenchmarkConfig{};
  c.zeroshot_classes = 9;
  CHECK_THROWS_AS(make_benchmark(c), ConfigError);
}

TEST_CASE("stratified subsampling") {
  const auto data = balanced(100, 4);
  const std::vector<double> fractions{0.5, 0.25, 1.0};
  const auto subsets = subsample_fractions(data, 4, fractions, 13);
  CHECK(subsets[0].size() == 200);
  CHECK(subsets[1].size() == 100);
  CHECK(subsets[2].size() == 400);
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(subsets[2][i].features == data[i].features);
  std::vector<std::size_t> per(4, 0);
  for (const auto& s : subsets[1]) ++per[s.local_label];
  CHECK(per == std::vector<std::size_t>{25, 25, 25, 25});
  // Nested: the smaller subset is contained in the larger one.
  for (const auto& s : subsets[1]) {
    bool found = false;
    for (const auto& t : subsets[0]) found |= t.features == s.features;
    CHECK(found);
  }
  const auto again = subsample_fractions(data, 4, fractions, 13);
  for (std::size_t k = 0; k < subsets.size(); ++k) {
    REQUIRE(again[k].size() == subsets[k].size());
    for (std::size_t i = 0; i < subsets[k].size(); ++i) CHECK(again[k][i].features == subsets[k][i].features);
  }
  const std::vector<double> tiny{0.001};
  CHECK_THROWS_AS(subsample_fractions(data, 4, tiny, 1), Error);
}

TEST_CASE("dataset files round-trip") {
  BenchmarkConfig c;
  c.pretrain_counts = {20, 5, 5};
  const auto b = make_benchmark(c);
  const auto path = std::filesystem::temp_directory_path() / "ratnet_unit_T1.csv";
  write_dataset_csv(b.pretraining[0], path);
  const auto back = read_dataset_csv(path);
  CHECK(back.checksum() == b.pretraining[0].checksum());
  CHECK(back.concept_subset == b.pretraining[0].concept_subset);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_dataset_csv(path), Error);
}
