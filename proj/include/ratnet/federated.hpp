#pragma once

// In-process federated pretraining. Each site trains a local copy of the
// global student on the tasks it owns; the server averages the returned
// students parameter-wise and redistributes the result.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ratnet/datagen.hpp"
#include "ratnet/model.hpp"
#include "ratnet/training.hpp"

namespace ratnet {

struct SiteConfig {
  std::string site_id;
  std::vector<std::string> tasks;  // training order at the site
  TrainConfig train;
};

// A site owns its datasets; they are only reachable from the site itself.
class Site {
 public:
  Site(SiteConfig config, std::vector<Dataset> datasets);

  const std::string& id() const { return config_.site_id; }
  const SiteConfig& config() const { return config_; }
  const std::vector<std::string>& tasks() const { return config_.tasks; }
  bool owns(const std::string& task_id) const;
  // Training samples over all owned tasks.
  std::size_t sample_count() const;

  // Throws unless `requester` is this site.
  const Dataset& dataset(const std::string& task_id, const std::string& requester) const;

  // Local cyclic training of a copy of `global`; the teacher restarts from
  // the received student.
  ModelState train_round(const ModelState& global, std::size_t round, std::size_t local_iterations) const;
  // Mean validation accuracy of `state` over the owned tasks.
  double validation_accuracy(const ModelState& state) const;

 private:
  SiteConfig config_;
  std::vector<Dataset> datasets_;
};

enum class Weighting { by_samples, uniform };

const char* weighting_name(Weighting w);
Weighting parse_weighting(std::string_view s);

struct FederationConfig {
  std::size_t rounds = 5;
  std::size_t local_iterations = 10;
  Weighting weighting = Weighting::by_samples;
  // Train sites on separate threads; results do not depend on it.
  bool parallel = false;

  void validate() const;
};

struct SiteRound {
  std::string site_id;
  std::string pre_checksum;   // local student before aggregation
  std::string post_checksum;  // state received after aggregation
  double local_val_accuracy = 0.0;
  double global_val_accuracy = 0.0;
};

struct RoundRecord {
  std::size_t round = 0;
  std::string global_checksum;
  std::vector<SiteRound> sites;
};

// round,site,pre_checksum,post_checksum,global_checksum,local_val_accuracy,global_val_accuracy
std::string round_records_csv(std::span<const RoundRecord> records);

// Normalised site weights: n_s / sum(n) or 1 / S.
std::vector<double> aggregation_weights(std::span<const std::size_t> sample_counts, Weighting mode);

// sum_s w_s * values[s] element-wise, accumulated in site order starting from
// w_0 * values[0].
std::vector<double> weighted_mean(std::span<const std::vector<double>> values, std::span<const double> weights);

// Server step. Shared parameters are averaged over all sites. A head or KB row
// is averaged over the sites owning its task (weights renormalised) and copied
// when a single site owns it. Without an owner, a head keeps its global value
// and a KB row is averaged like a shared parameter.
ModelState aggregate(const ModelState& global, std::span<const ModelState> site_states, std::span<const Site> sites,
                     std::span<const double> weights);

struct RoundResult {
  ModelState global;
  RoundRecord record;
};

RoundResult fed_round(const ModelState& global, std::span<const Site> sites, const FederationConfig& config,
                      std::size_t round);

struct FederationResult {
  ModelState global;
  std::vector<RoundRecord> records;
};

FederationResult run_federation(const ModelState& initial, std::span<const Site> sites, const FederationConfig& config);

}  // namespace ratnet
