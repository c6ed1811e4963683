#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ratnet/datagen.hpp"
#include "ratnet/metrics.hpp"
#include "ratnet/model.hpp"

namespace ratnet {

struct LossWeights {
  double ce = 1.0;
  double ts = 0.5;
  double orth = 0.1;
  double cons = 0.5;

  void validate() const;
};

enum class EmaFrequency { per_task_epoch, per_step };

struct TrainConfig {
  std::size_t epochs = 50;  // cyclic iterations over all tasks
  SgdConfig sgd{0.05, 32};
  LossWeights weights;
  double ema_momentum = 0.9;
  EmaFrequency ema_frequency = EmaFrequency::per_task_epoch;
  // Iterations before the consistency term switches on.
  std::size_t consistency_warmup = 0;
  std::uint64_t seed = 42;
  // Standard deviation of additive Gaussian jitter on training features.
  double augment_sigma = 0.0;
  // Global index of the first iteration; keeps the shuffling stream aligned
  // when a run is split into several calls.
  std::size_t iteration_offset = 0;

  void validate() const;
};

struct LossParts {
  Tensor total;
  double ce = 0.0;
  double ts = 0.0;
  double orth = 0.0;
  double cons = 0.0;
};

// L = ce * CE + ts * L_ts + orth * L_orth + cons * L_cons. Terms with zero
// weight are reported as 0 and not built. `teacher` may be null when the
// consistency weight is zero.
LossParts composite_loss(const TaskForward& tf, std::span<const std::size_t> labels, const ModelState& state,
                         const TaskForward* teacher, const LossWeights& w);

struct RunRecord {
  std::size_t iteration = 0;
  std::string task_id;
  double loss = 0.0, ce = 0.0, ts = 0.0, orth = 0.0, cons = 0.0;
  double val_accuracy = 0.0;
  double gram_offdiag = 0.0;
  double wall_ms = 0.0;
};

struct RunLog {
  std::vector<RunRecord> records;

  // Deterministic columns only; wall time goes to timing_csv().
  std::string to_csv() const;
  std::string timing_csv() const;
};

struct PretrainResult {
  ModelState student;
  ModelState teacher;
  RunLog log;
};

// One epoch of student SGD per task in registration order per iteration,
// followed by an EMA teacher update. The teacher defaults to a copy of the
// student.
PretrainResult cyclic_pretrain(ModelState student, std::span<const Dataset> tasks, const TrainConfig& config,
                               std::optional<ModelState> teacher = std::nullopt);

// Argmax accuracy of a task head on samples.
double task_accuracy(const ModelState& state, const std::string& task_id, std::span<const Sample> samples);
// Head softmax probabilities, row-major n x C.
MultiScored task_scores(const ModelState& state, const std::string& task_id, std::span<const Sample> samples);

struct FineTuneResult {
  ModelState state;
  MetricsReport metrics;
  double accuracy = 0.0;
};

// Registers `new_task_id` (KB row + fresh head) and trains every parameter on
// the target data without a teacher.
FineTuneResult fine_tune(const ModelState& state, const Dataset& target, const std::string& new_task_id,
                         const TrainConfig& config);

struct ProbeConfig {
  std::size_t epochs = 100;
  double learning_rate = 0.5;
  std::size_t batch_size = 64;
  std::uint64_t seed = 7;
  std::size_t bootstrap_resamples = 0;
};

struct LinearClassifier {
  Tensor weight;  // E x C
  Tensor bias;    // C
  MultiScored predict(const Tensor& embeddings, std::span<const std::size_t> labels) const;
};

struct ProbeResult {
  LinearClassifier classifier;
  MetricsReport metrics;
  double accuracy = 0.0;
};

// Trains a zero-initialised softmax classifier on frozen embed() outputs.
ProbeResult linear_probe(const ModelState& state, std::span<const Sample> train, std::span<const Sample> test,
                         const std::vector<int>& class_ids, const ProbeConfig& config);

struct BoxSummary {
  double median = 0.0, q1 = 0.0, q3 = 0.0;
  double whisker_low = 0.0, whisker_high = 0.0;
  std::vector<double> outliers;
};

BoxSummary box_summary(std::span<const double> values);

struct FewShotResult {
  std::size_t k = 0;
  std::vector<double> aucs;  // one per run, in run order
  BoxSummary summary;
};

FewShotResult few_shot_protocol(const ModelState& state, const Dataset& task, std::size_t k, std::size_t runs,
                                std::uint64_t master_seed, const ProbeConfig& probe);

struct VariantComparison {
  std::string a, b;
  TTestResult test;
};

std::vector<VariantComparison> compare_variants(const std::vector<std::pair<std::string, std::vector<double>>>& runs);

struct ReducedRow {
  double fraction = 1.0;
  std::size_t repeat = 0;
  std::size_t train_size = 0;
  ClassMetrics macro;
  double accuracy = 0.0;
};

struct ReducedSummary {
  double fraction = 1.0;
  RunStats auc, f1, ap, mcc, accuracy;
};

struct ReducedDataResult {
  std::vector<ReducedRow> rows;  // fraction-major, then repeat
  std::vector<ReducedSummary> summary;
};

ReducedDataResult reduced_data_protocol(const ModelState& state, const Dataset& dataset,
                                        std::span<const double> fractions, std::size_t repeats,
                                        std::uint64_t master_seed, const ProbeConfig& probe);

// Registers the new task on both networks, then runs cyclic pretraining over
// the old tasks followed by the new one.
PretrainResult incremental_pretrain(const ModelState& student, const ModelState& teacher,
                                    std::span<const Dataset> old_tasks, const Dataset& new_task,
                                    const TrainConfig& config);

}  // namespace ratnet
