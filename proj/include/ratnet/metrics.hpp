#pragma once

// Classification metrics and run statistics: ROC AUC (Mann-Whitney), ROC
// curve, F1, average precision, MCC, macro one-vs-rest aggregation,
// percentile bootstrap intervals and Welch's two-sided t-test.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ratnet {

// Binary scores; labels are 1 (positive) or 0 (negative).
struct ScoredLabels {
  std::vector<double> scores;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  ScoredLabels subset(std::span<const std::size_t> idx) const;
  std::size_t distinct_labels() const;
};

// Row-major n x classes probability matrix with labels in [0, classes).
struct MultiScored {
  std::size_t classes = 0;
  std::vector<double> probs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  ScoredLabels one_vs_rest(std::size_t cls) const;
  std::vector<int> argmax() const;
  MultiScored subset(std::span<const std::size_t> idx) const;
  std::size_t distinct_labels() const;
};

double auc(const ScoredLabels& sl);

struct RocPoint {
  double fpr;
  double tpr;
  double threshold;
};

// Starts at (0, 0) with threshold +inf and ends at (1, 1); one point per
// distinct score.
std::vector<RocPoint> roc_curve(const ScoredLabels& sl);
double trapezoid_area(std::span<const RocPoint> roc);

struct Confusion {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

Confusion confusion(std::span<const int> predicted, std::span<const int> labels);
double f1_score(const Confusion& c);
double f1_score(std::span<const int> predicted, std::span<const int> labels);
// Zero when any marginal of the confusion matrix is empty.
double mcc(const Confusion& c);
double mcc(std::span<const int> predicted, std::span<const int> labels);
// Sum over distinct thresholds of (R_n - R_{n-1}) * P_n.
double average_precision(const ScoredLabels& sl);

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

struct BootstrapOptions {
  std::size_t resamples = 2000;
  double level = 0.95;
  std::uint64_t seed = 0;
  // Redraws allowed per resample when it contains a single class.
  std::size_t max_redraws = 100;
};

// Percentile bootstrap for a vector of statistics computed on the same
// resample. Resamples with fewer than two classes are redrawn.
std::vector<Interval> bootstrap_intervals(const std::function<std::vector<double>(const MultiScored&)>& stats,
                                          const MultiScored& data, const BootstrapOptions& options);
Interval bootstrap_ci(const std::function<double(const ScoredLabels&)>& metric, const ScoredLabels& data,
                      const BootstrapOptions& options);

struct ClassMetrics {
  double auc = 0.5;
  double f1 = 0.0;
  double ap = 0.0;
  double mcc = 0.0;
};

struct RunStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1)
  std::size_t n = 0;
};

RunStats summarize(std::span<const double> values);

struct MetricsReport {
  std::vector<int> class_ids;  // label names, e.g. global concept ids
  std::vector<ClassMetrics> per_class;
  std::vector<Interval> per_class_auc_ci;
  ClassMetrics macro;
  Interval macro_auc_ci, macro_f1_ci, macro_ap_ci, macro_mcc_ci;
  double accuracy = 0.0;
  std::size_t samples = 0;
  // Repeated-run statistics of the macro AUC (n = 1 for a single evaluation).
  RunStats run_auc;

  // Records: scope,class,metric,value,ci_lower,ci_upper.
  std::string to_csv() const;
  std::string to_table() const;
};

// Macro one-vs-rest report. CIs are computed when resamples > 0 and clamped
// so that lower <= point <= upper.
MetricsReport evaluate_multiclass(const MultiScored& data, std::vector<int> class_ids,
                                  const BootstrapOptions& bootstrap);
ClassMetrics macro_metrics(const MultiScored& data);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

// Welch's unequal-variance two-sided test.
TTestResult welch_t_test(std::span<const double> a, std::span<const double> b);
// Two-sided p-value of Student's t distribution.
double student_t_two_sided_p(double t, double df);
// Regularised incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);

// Linear-interpolated quantile of sorted data (q in [0, 1]).
double quantile_sorted(std::span<const double> sorted, double q);

}  // namespace ratnet
