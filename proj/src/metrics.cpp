#include "ratnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "ratnet/common.hpp"

namespace ratnet {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct ClassCounts {
  std::uint64_t pos = 0, neg = 0;
};

ClassCounts count_binary(const ScoredLabels& sl) {
  if (sl.scores.size() != sl.labels.size()) throw ShapeError("scores and labels differ in length");
  ClassCounts c;
  for (int l : sl.labels) {
    if (l == 1)
      ++c.pos;
    else if (l == 0)
      ++c.neg;
    else
      throw Error("binary metric: label " + std::to_string(l) + " is not 0 or 1");
  }
  return c;
}

// Indices sorted by score, descending when `desc`.
std::vector<std::size_t> order_by_score(const std::vector<double>& scores, bool desc) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return desc ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return idx;
}

}  // namespace

// ---- data views --------------------------------------------------------------

ScoredLabels ScoredLabels::subset(std::span<const std::size_t> idx) const {
  ScoredLabels out;
  out.scores.reserve(idx.size());
  out.labels.reserve(idx.size());
  for (std::size_t i : idx) {
    out.scores.push_back(scores[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

std::size_t ScoredLabels::distinct_labels() const { return std::set<int>(labels.begin(), labels.end()).size(); }

ScoredLabels MultiScored::one_vs_rest(std::size_t cls) const {
  ScoredLabels out;
  out.scores.reserve(size());
  out.labels.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) {
    out.scores.push_back(probs[i * classes + cls]);
    out.labels.push_back(labels[i] == static_cast<int>(cls) ? 1 : 0);
  }
  return out;
}

std::vector<int> MultiScored::argmax() const {
  std::vector<int> out(size());
  for (std::size_t i = 0; i < size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (probs[i * classes + c] > probs[i * classes + best]) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

MultiScored MultiScored::subset(std::span<const std::size_t> idx) const {
  MultiScored out;
  out.classes = classes;
  out.probs.reserve(idx.size() * classes);
  out.labels.reserve(idx.size());
  for (std::size_t i : idx) {
    out.probs.insert(out.probs.end(), probs.begin() + static_cast<std::ptrdiff_t>(i * classes),
                     probs.begin() + static_cast<std::ptrdiff_t>((i + 1) * classes));
    out.labels.push_back(labels[i]);
  }
  return out;
}

std::size_t MultiScored::distinct_labels() const { return std::set<int>(labels.begin(), labels.end()).size(); }

// ---- binary metrics ----------------------------------------------------------

double auc(const ScoredLabels& sl) {
  const ClassCounts n = count_binary(sl);
  if (n.pos == 0 || n.neg == 0) throw Error("AUC undefined for single class");
  auto idx = order_by_score(sl.scores, false);
  std::uint64_t concordant = 0, tied = 0, neg_below = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t pos_g = 0, neg_g = 0;
    while (j < idx.size() && sl.scores[idx[j]] == sl.scores[idx[i]]) {
      (sl.labels[idx[j]] == 1 ? pos_g : neg_g)++;
      ++j;
    }
    concordant += pos_g * neg_below;
    tied += pos_g * neg_g;
    neg_below += neg_g;
    i = j;
  }
  return (static_cast<double>(concordant) + 0.5 * static_cast<double>(tied)) /
         (static_cast<double>(n.pos) * static_cast<double>(n.neg));
}

std::vector<RocPoint> roc_curve(const ScoredLabels& sl) {
  const ClassCounts n = count_binary(sl);
  if (n.pos == 0 || n.neg == 0) throw Error("AUC undefined for single class");
  auto idx = order_by_score(sl.scores, true);
  std::vector<RocPoint> out{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double thr = sl.scores[idx[i]];
    while (i < idx.size() && sl.scores[idx[i]] == thr) {
      (sl.labels[idx[i]] == 1 ? tp : fp)++;
      ++i;
    }
    out.push_back({static_cast<double>(fp) / static_cast<double>(n.neg),
                   static_cast<double>(tp) / static_cast<double>(n.pos), thr});
  }
  return out;
}

double trapezoid_area(std::span<const RocPoint> roc) {
  double a = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i)
    a += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) * 0.5;
  return a;
}

Confusion confusion(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw ShapeError("confusion: predictions and labels differ in length");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predicted[i] == 1, y = labels[i] == 1;
    if (p && y)
      ++c.tp;
    else if (p)
      ++c.fp;
    else if (y)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double f1_score(const Confusion& c) {
  const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double f1_score(std::span<const int> predicted, std::span<const int> labels) {
  return f1_score(confusion(predicted, labels));
}

double mcc(const Confusion& c) {
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn), fp = static_cast<double>(c.fp),
               fn = static_cast<double>(c.fn);
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(denom);
}

double mcc(std::span<const int> predicted, std::span<const int> labels) { return mcc(confusion(predicted, labels)); }

double average_precision(const ScoredLabels& sl) {
  const ClassCounts n = count_binary(sl);
  if (n.pos == 0) throw Error("average precision undefined without positives");
  auto idx = order_by_score(sl.scores, true);
  std::uint64_t tp = 0, fp = 0;
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    const double thr = sl.scores[idx[i]];
    while (i < idx.size() && sl.scores[idx[i]] == thr) {
      (sl.labels[idx[i]] == 1 ? tp : fp)++;
      ++i;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n.pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

// ---- bootstrap ----------------------------------------------------------------

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) return kNaN;
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

namespace {

template <typename Data, typename Stats>
std::vector<Interval> bootstrap_impl(const Stats& stats, const Data& data, const BootstrapOptions& opt) {
  if (data.size() < 10) throw Error("bootstrap: need at least 10 samples, got " + std::to_string(data.size()));
  if (!(opt.level > 0.0 && opt.level < 1.0)) throw Error("bootstrap: level must be in (0, 1)");
  if (opt.resamples == 0) throw Error("bootstrap: resamples must be >= 1");
  const std::size_t n = data.size();
  std::vector<std::vector<double>> draws;
  std::vector<std::size_t> idx(n);
  for (std::size_t r = 0; r < opt.resamples; ++r) {
    Rng rng(derive_seed(opt.seed, r));
    Data sample;
    std::size_t attempt = 0;
    while (true) {
      for (auto& i : idx) i = rng.below(n);
      sample = data.subset(idx);
      if (sample.distinct_labels() >= 2) break;
      if (++attempt > opt.max_redraws)
        throw Error("bootstrap: resample " + std::to_string(r) + " kept drawing a single class");
    }
    auto values = stats(sample);
    if (draws.empty()) draws.resize(values.size());
    for (std::size_t k = 0; k < values.size(); ++k)
      if (!std::isnan(values[k])) draws[k].push_back(values[k]);
  }
  const double alpha = 1.0 - opt.level;
  std::vector<Interval> out;
  for (auto& d : draws) {
    std::sort(d.begin(), d.end());
    out.push_back({quantile_sorted(d, alpha / 2.0), quantile_sorted(d, 1.0 - alpha / 2.0)});
  }
  return out;
}

}  // namespace

std::vector<Interval> bootstrap_intervals(const std::function<std::vector<double>(const MultiScored&)>& stats,
                                          const MultiScored& data, const BootstrapOptions& options) {
  return bootstrap_impl(stats, data, options);
}

Interval bootstrap_ci(const std::function<double(const ScoredLabels&)>& metric, const ScoredLabels& data,
                      const BootstrapOptions& options) {
  auto wrapped = [&metric](const ScoredLabels& s) { return std::vector<double>{metric(s)}; };
  return bootstrap_impl(wrapped, data, options).at(0);
}

// ---- multi-class report ---------------------------------------------------------

RunStats summarize(std::span<const double> values) {
  RunStats s;
  s.n = values.size();
  if (values.empty()) return s;
  double m = 0.0;
  for (double v : values) m += v;
  m /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  s.mean = m;
  s.stddev = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  return s;
}

namespace {

struct PerClass {
  std::vector<std::size_t> present;
  std::vector<ClassMetrics> metrics;
};

PerClass per_class_metrics(const MultiScored& data) {
  if (data.classes < 2) throw Error("multi-class metrics need at least 2 classes");
  if (data.probs.size() != data.size() * data.classes) throw ShapeError("probability matrix shape mismatch");
  std::vector<std::uint64_t> counts(data.classes, 0);
  for (int l : data.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= data.classes) throw Error("label " + std::to_string(l) + " out of range");
    ++counts[static_cast<std::size_t>(l)];
  }
  const auto pred = data.argmax();
  PerClass out;
  for (std::size_t c = 0; c < data.classes; ++c) {
    if (counts[c] == 0 || counts[c] == data.size()) continue;
    ScoredLabels sl = data.one_vs_rest(c);
    std::vector<int> p(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) p[i] = pred[i] == static_cast<int>(c) ? 1 : 0;
    const Confusion conf = confusion(p, sl.labels);
    out.present.push_back(c);
    out.metrics.push_back({auc(sl), f1_score(conf), average_precision(sl), mcc(conf)});
  }
  return out;
}

ClassMetrics average(const std::vector<ClassMetrics>& v) {
  ClassMetrics m{0, 0, 0, 0};
  for (const auto& c : v) {
    m.auc += c.auc;
    m.f1 += c.f1;
    m.ap += c.ap;
    m.mcc += c.mcc;
  }
  const double n = static_cast<double>(v.size());
  m.auc /= n;
  m.f1 /= n;
  m.ap /= n;
  m.mcc /= n;
  return m;
}

Interval clamp_to(Interval iv, double point) {
  if (std::isnan(iv.lower) || std::isnan(iv.upper)) return {point, point};
  return {std::min(iv.lower, point), std::max(iv.upper, point)};
}

}  // namespace

ClassMetrics macro_metrics(const MultiScored& data) {
  if (data.distinct_labels() < 2) throw Error("AUC undefined for single class");
  return average(per_class_metrics(data).metrics);
}

MetricsReport evaluate_multiclass(const MultiScored& data, std::vector<int> class_ids,
                                  const BootstrapOptions& bootstrap) {
  if (class_ids.size() != data.classes) throw ShapeError("evaluate_multiclass: class id list length mismatch");
  if (data.distinct_labels() < 2) throw Error("AUC undefined for single class");
  MetricsReport r;
  PerClass pc = per_class_metrics(data);
  for (std::size_t c : pc.present) r.class_ids.push_back(class_ids[c]);
  r.per_class = pc.metrics;
  r.macro = average(pc.metrics);
  r.samples = data.size();
  const auto pred = data.argmax();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  r.run_auc = RunStats{r.macro.auc, 0.0, 1};

  if (bootstrap.resamples > 0) {
    const auto present = pc.present;
    auto stats = [&present](const MultiScored& s) {
      PerClass p = per_class_metrics(s);
      ClassMetrics m = average(p.metrics);
      std::vector<double> v{m.auc, m.f1, m.ap, m.mcc};
      for (std::size_t c : present) {
        auto it = std::find(p.present.begin(), p.present.end(), c);
        v.push_back(it == p.present.end() ? kNaN : p.metrics[static_cast<std::size_t>(it - p.present.begin())].auc);
      }
      return v;
    };
    auto iv = bootstrap_intervals(stats, data, bootstrap);
    r.macro_auc_ci = clamp_to(iv[0], r.macro.auc);
    r.macro_f1_ci = clamp_to(iv[1], r.macro.f1);
    r.macro_ap_ci = clamp_to(iv[2], r.macro.ap);
    r.macro_mcc_ci = clamp_to(iv[3], r.macro.mcc);
    for (std::size_t k = 0; k < pc.present.size(); ++k) r.per_class_auc_ci.push_back(clamp_to(iv[4 + k], r.per_class[k].auc));
  } else {
    r.macro_auc_ci = {r.macro.auc, r.macro.auc};
    r.macro_f1_ci = {r.macro.f1, r.macro.f1};
    r.macro_ap_ci = {r.macro.ap, r.macro.ap};
    r.macro_mcc_ci = {r.macro.mcc, r.macro.mcc};
    for (const auto& m : r.per_class) r.per_class_auc_ci.push_back({m.auc, m.auc});
  }
  return r;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "scope,class,metric,value,ci_lower,ci_upper\n";
  auto row = [&os](const std::string& scope, const std::string& cls, const char* metric, double v,
                   const Interval* ci) {
    os << scope << ',' << cls << ',' << metric << ',' << format_double(v) << ',';
    if (ci) os << format_double(ci->lower) << ',' << format_double(ci->upper);
    else os << ',';
    os << "\n";
  };
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    const std::string cls = std::to_string(class_ids[k]);
    row("class", cls, "auc", per_class[k].auc, &per_class_auc_ci[k]);
    row("class", cls, "f1", per_class[k].f1, nullptr);
    row("class", cls, "ap", per_class[k].ap, nullptr);
    row("class", cls, "mcc", per_class[k].mcc, nullptr);
  }
  row("macro", "", "auc", macro.auc, &macro_auc_ci);
  row("macro", "", "f1", macro.f1, &macro_f1_ci);
  row("macro", "", "ap", macro.ap, &macro_ap_ci);
  row("macro", "", "mcc", macro.mcc, &macro_mcc_ci);
  row("macro", "", "accuracy", accuracy, nullptr);
  row("runs", "", "auc_mean", run_auc.mean, nullptr);
  row("runs", "", "auc_std", run_auc.stddev, nullptr);
  row("runs", "", "n", static_cast<double>(run_auc.n), nullptr);
  return os.str();
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(10) << "class" << std::right << std::setw(10) << "AUC" << std::setw(20)
     << "AUC 95% CI" << std::setw(10) << "F1" << std::setw(10) << "AP" << std::setw(10) << "MCC" << "\n";
  auto ci = [](const Interval& iv) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << '[' << iv.lower << ", " << iv.upper << ']';
    return s.str();
  };
  for (std::size_t k = 0; k < per_class.size(); ++k)
    os << std::left << std::setw(10) << class_ids[k] << std::right << std::setw(10) << per_class[k].auc
       << std::setw(20) << ci(per_class_auc_ci[k]) << std::setw(10) << per_class[k].f1 << std::setw(10)
       << per_class[k].ap << std::setw(10) << per_class[k].mcc << "\n";
  os << std::left << std::setw(10) << "macro" << std::right << std::setw(10) << macro.auc << std::setw(20)
     << ci(macro_auc_ci) << std::setw(10) << macro.f1 << std::setw(10) << macro.ap << std::setw(10) << macro.mcc
     << "\n";
  os << "accuracy " << accuracy << "  samples " << samples << "  runs " << run_auc.n << " (AUC " << run_auc.mean
     << " +/- " << run_auc.stddev << ")\n";
  return os.str();
}

// ---- t-test --------------------------------------------------------------------

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw Error("incomplete_beta: a and b must be positive");
  if (x < 0.0 || x > 1.0) throw Error("incomplete_beta: x must lie in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  // Lentz's continued fraction, evaluated on the side where it converges fast.
  auto cf = [](double a, double b, double x) {
    constexpr double tiny = 1e-300, eps = 1e-16;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
      const double m2 = 2.0 * m;
      double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
      d = 1.0 + aa * d;
      if (std::abs(d) < tiny) d = tiny;
      c = 1.0 + aa / c;
      if (std::abs(c) < tiny) c = tiny;
      d = 1.0 / d;
      h *= d * c;
      aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
      d = 1.0 + aa * d;
      if (std::abs(d) < tiny) d = tiny;
      c = 1.0 + aa / c;
      if (std::abs(c) < tiny) c = tiny;
      d = 1.0 / d;
      const double del = d * c;
      h *= del;
      if (std::abs(del - 1.0) < eps) return h;
    }
    throw Error("incomplete_beta: continued fraction did not converge");
  };
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * cf(a, b, x) / a;
  return 1.0 - std::exp(log_front) * cf(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw Error("student_t: degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

TTestResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw Error("t-test: each sample needs at least 2 values");
  const RunStats sa = summarize(a), sb = summarize(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = sa.stddev * sa.stddev / na, vb = sb.stddev * sb.stddev / nb;
  const double se2 = va + vb;
  if (se2 == 0.0) {
    if (sa.mean == sb.mean) return TTestResult{0.0, 1.0, na + nb - 2.0};
    throw Error("t-test undefined: both samples have zero variance and different means");
  }
  TTestResult r;
  r.t = (sa.mean - sb.mean) / std::sqrt(se2);
  r.df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

}  // namespace ratnet
