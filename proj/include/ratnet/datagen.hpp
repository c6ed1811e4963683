#pragma once

// Synthetic multi-domain classification data.
//
// Each global concept owns a latent prototype. A task picks a subset of
// concepts as its local classes and views them through its own domain
// transform x = R * (s .* p) + b + noise, so tasks share semantics but not
// feature statistics.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ratnet/common.hpp"
#include "ratnet/tensor.hpp"

namespace ratnet {

class ConceptRegistry {
 public:
  ConceptRegistry() = default;
  ConceptRegistry(std::size_t dim, std::vector<int> ids, std::vector<std::vector<double>> prototypes);

  // Draws `count` prototypes from N(0, scale^2 I), redrawing any prototype
  // closer than `margin` to an earlier one.
  static ConceptRegistry generate(std::size_t count, std::size_t dim, double scale, double margin,
                                  std::uint64_t seed);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<int>& ids() const { return ids_; }
  bool contains(int id) const;
  const std::vector<double>& prototype(int id) const;
  double min_pairwise_distance() const;
  std::string checksum() const;

 private:
  std::size_t dim_ = 0;
  std::vector<int> ids_;
  std::vector<std::vector<double>> prototypes_;
};

struct DomainTransform {
  std::size_t dim = 0;
  std::vector<double> rotation;  // dim x dim, row-major, orthogonal
  std::vector<double> scaling;   // positive diagonal
  std::vector<double> bias;
  double noise = 0.0;

  static DomainTransform identity(std::size_t dim);
  // Rotation is the orthogonal factor of (I + strength * G) for Gaussian G;
  // scaling is uniform in [1 - spread, 1 + spread]; bias ~ N(0, bias_scale^2).
  static DomainTransform random(std::size_t dim, double rotation_strength, double scale_spread, double bias_scale,
                                double noise, std::uint64_t seed);

  std::vector<double> apply(std::span<const double> latent) const;
  std::vector<double> invert(std::span<const double> features) const;
  void validate() const;
};

// Geometric long-tail priors p_c proportional to rho^c; rho = 1 is uniform.
std::vector<double> geometric_priors(std::size_t classes, double rho);

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

struct SyntheticTaskSpec {
  std::string task_id;
  std::vector<int> concept_subset;
  DomainTransform transform;
  std::vector<double> class_priors;
  SplitCounts counts;
  // Seeds one sample of every class into each split before sampling the rest
  // from the priors.
  bool cover_all_classes = true;

  void validate(const ConceptRegistry& registry) const;
};

enum class Split { train, val, test };

const char* split_name(Split s);
Split parse_split(std::string_view s);

struct Sample {
  std::string task_id;
  Split split = Split::train;
  int global_concept_id = 0;
  std::size_t local_label = 0;
  std::vector<double> features;
};

struct Dataset {
  std::string task_id;
  std::size_t dim = 0;
  std::vector<int> concept_subset;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;

  std::size_t num_classes() const { return concept_subset.size(); }
  const std::vector<Sample>& split(Split s) const;
  std::optional<std::size_t> local_label_of(int concept_id) const;
  std::string split_checksum(Split s) const;
  std::string checksum() const;
};

Dataset generate_task(const ConceptRegistry& registry, const SyntheticTaskSpec& spec, std::uint64_t seed);

struct BenchmarkConfig {
  std::size_t dim = 16;
  std::size_t pretrain_tasks = 5;
  std::size_t classes_per_task = 3;
  SplitCounts pretrain_counts{500, 100, 200};
  double prototype_scale = 1.0;
  double separation_margin = 2.5;
  double noise = 0.75;
  double rotation_strength = 0.1;
  double scale_spread = 0.2;
  double bias_scale = 0.2;

  std::size_t zeroshot_classes = 3;
  SplitCounts zeroshot_counts{0, 0, 600};

  std::size_t fewshot_classes = 4;
  SplitCounts fewshot_counts{80, 40, 400};

  std::size_t longtail_classes = 22;
  double longtail_rho = 0.8;
  SplitCounts longtail_counts{2000, 200, 1100};

  std::uint64_t seed = 42;

  void validate() const;
};

struct Benchmark {
  BenchmarkConfig config;
  ConceptRegistry registry;
  std::vector<Dataset> pretraining;
  Dataset zero_shot;
  Dataset few_shot;
  Dataset long_tail;
  std::vector<std::uint64_t> task_seeds;  // pretraining..., zero-shot, few-shot, long-tail

  // Key-value manifest listing every task, its concept map, seed and split
  // checksums.
  std::string manifest() const;
};

Benchmark make_benchmark(const BenchmarkConfig& config);

// Nested class-stratified subsets of `samples`, one per fraction. A class of
// n samples contributes round(f * n) samples; subsets preserve input order.
std::vector<std::vector<Sample>> subsample_fractions(std::span<const Sample> samples, std::size_t num_classes,
                                                     std::span<const double> fractions, std::uint64_t seed);

// Batch helpers.
Tensor features_matrix(std::span<const Sample> samples);
std::vector<std::size_t> labels_of(std::span<const Sample> samples);

// Delimiter-separated dataset files: header row then one record per sample
// with columns task_id, split, global_concept_id, local_label, f0..f(D-1).
void write_dataset_csv(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset_csv(const std::filesystem::path& path);

}  // namespace ratnet
