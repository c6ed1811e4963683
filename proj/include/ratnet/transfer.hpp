#pragma once

// Zero-shot transfer: predictions of the existing task heads are combined with
// per-sample relevance weights through an explicit category alignment map.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ratnet/datagen.hpp"
#include "ratnet/metrics.hpp"
#include "ratnet/model.hpp"

namespace ratnet {

struct HeadOutput {
  std::string task_id;
  std::size_t label = 0;
  bool operator<(const HeadOutput& o) const { return task_id != o.task_id ? task_id < o.task_id : label < o.label; }
  bool operator==(const HeadOutput&) const = default;
};

// Target category id -> head outputs that correspond to it.
struct CategoryMap {
  std::map<int, std::vector<HeadOutput>> entries;

  // Registered tasks, labels in range, every category mapped at least once.
  void validate(const ModelState& state) const;
  std::vector<int> category_ids() const;

  // Blocks of the form
  //   [category 7]
  //   map = T1:2
  //   map = T3:0
  static CategoryMap parse(std::string_view text, const std::string& source = "<text>");
  static CategoryMap load(const std::filesystem::path& path);
  std::string to_text() const;
  void save(const std::filesystem::path& path) const;
};

// Alignment by shared global concept ids, as known to the data generator.
CategoryMap alignment_by_concept(std::span<const Dataset> pretraining, const Dataset& target);

struct ZeroShotOptions {
  // Divide the scores of each sample by their sum.
  bool renormalize = true;
  // Temperature for the relevance softmax; the model's own when unset.
  std::optional<double> tau;
  // Replace the relevance weights by a one-hot vector at this task.
  std::optional<std::string> force_task;
};

struct ZeroShotPrediction {
  std::vector<int> category_ids;  // column order of probs
  std::vector<std::string> task_ids;
  std::size_t samples = 0;
  std::vector<double> probs;          // samples x categories
  std::vector<double> omegas;         // samples x tasks
  std::vector<double> contributions;  // samples x tasks, share of the final mass

  std::span<const double> row(std::size_t i) const;
};

struct HeadProbs {
  std::string task_id;
  std::size_t classes = 0;
  std::vector<double> probs;  // samples x classes
};

// Aggregation step on precomputed head outputs; omegas is samples x heads in
// the order of `heads`. score(c) = sum over mapped (t, l) of w_t * p_t[l].
ZeroShotPrediction aggregate_heads(std::size_t samples, std::span<const double> omegas,
                                   const std::vector<HeadProbs>& heads, const CategoryMap& map, bool renormalize);

ZeroShotPrediction zero_shot_predict(const ModelState& state, const Tensor& features, const CategoryMap& map,
                                     const ZeroShotOptions& options = {});

struct ZeroShotEvaluation {
  MetricsReport metrics;
  ZeroShotPrediction prediction;
  std::vector<std::vector<RocPoint>> roc;  // per category; empty when absent from the data

  // category,fpr,tpr,threshold
  std::string roc_csv() const;
};

ZeroShotEvaluation zero_shot_evaluate(const ModelState& state, const Dataset& dataset, const CategoryMap& map,
                                      const ZeroShotOptions& options = {}, const BootstrapOptions& bootstrap = {0});

struct HeadBaseline {
  std::string task_id;
  double macro_auc = 0.5;
};

// Every registered head on its own, via a one-hot relevance vector.
std::vector<HeadBaseline> single_head_baselines(const ModelState& state, const Dataset& dataset,
                                                const CategoryMap& map, const ZeroShotOptions& options = {});

// Copy of `dataset` with test labels permuted across samples.
Dataset shuffled_labels(const Dataset& dataset, std::uint64_t seed);

}  // namespace ratnet
