// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "oracles.hpp"
#include "ratnet/cli.hpp"
#include "ratnet/federated.hpp"
#include "ratnet/training.hpp"
#include "ratnet/transfer.hpp"

using namespace ratnet;
namespace fs = std::filesystem;

namespace {

// ---- tolerances and budgets -----------------------------------------------------

constexpr double kGradTolerance = 1e-4;
constexpr double kGradEpsilon = 1e-5;
constexpr double kGradBudgetSeconds = 30.0;
constexpr double kIdentityTolerance = 1e-9;
constexpr double kOracleMargin = 0.05;
constexpr double kPretrainBudgetSeconds = 120.0;
constexpr double kZeroShotFloor = 0.80;
constexpr double kRetentionMargin = 0.02;
constexpr double kTrapezoidTolerance = 1e-12;
constexpr std::uint64_t kMasterSeed = 42;

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Check {
 public:
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      if (failures_.size() < 5) failures_.push_back(what);
    }
  }
  void note(const std::string& s) { notes_ += (notes_.empty() ? "" : "; ") + s; }
  Outcome done() const {
    std::string d = notes_;
    for (const auto& f : failures_) d += (d.empty() ? "" : "; ") + std::string("failed: ") + f;
    return {pass_, d};
  }

 private:
  bool pass_ = true;
  std::string notes_;
  std::vector<std::string> failures_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<TaskInfo> infos_of(const std::vector<Dataset>& ds) {
  std::vector<TaskInfo> out;
  for (const auto& d : ds) out.push_back({d.task_id, d.num_classes()});
  return out;
}

ModelConfig model_for(std::size_t dim) {
  ModelConfig mc;
  mc.encoder.input_dim = dim;
  return mc;
}

double logistic_oracle(const Dataset& d) {
  std::vector<std::vector<double>> xtr, xte;
  std::vector<std::size_t> ytr, yte;
  for (const auto& s : d.train) xtr.push_back(s.features), ytr.push_back(s.local_label);
  for (const auto& s : d.test) xte.push_back(s.features), yte.push_back(s.local_label);
  return oracle::Logistic::fit(xtr, ytr, d.num_classes()).accuracy(xte, yte);
}

void fill(ModelState& m, const std::function<double(std::size_t)>& value) {
  std::size_t k = 0;
  for (auto& p : m.named_parameters())
    for (auto& v : p.tensor->mutable_data()) v = value(k++);
}

std::vector<double> flat_values(const ModelState& m) {
  std::vector<double> out;
  for (const Tensor* t : m.parameters()) out.insert(out.end(), t->data().begin(), t->data().end());
  return out;
}

// Shared five-task fixture, pretrained once.
struct Pretrained {
  Benchmark bench;
  PretrainResult result;
};

const Pretrained& five_task() {
  static std::unique_ptr<Pretrained> p;
  if (!p) {
    p = std::make_unique<Pretrained>();
    BenchmarkConfig bc;
    bc.seed = kMasterSeed;
    p->bench = make_benchmark(bc);
    auto student = ModelState::create(model_for(bc.dim), infos_of(p->bench.pretraining), kMasterSeed);
    TrainConfig tc;
    tc.seed = kMasterSeed;
    p->result = cyclic_pretrain(std::move(student), p->bench.pretraining, tc);
  }
  return *p;
}

// ---- 1. gradient fidelity -------------------------------------------------------

Outcome gradient_fidelity() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ModelConfig mc;
    mc.encoder = {4, 6, 2, 5};
    mc.knowledge_dim = 4;
    const std::vector<TaskInfo> tasks{{"A", 3}, {"B", 2}, {"C", 4}};
    ModelState student = ModelState::create(mc, tasks, seed);
    ModelState teacher = student;
    teacher.set_role(Role::teacher);
    Rng rng(derive_seed(0x67726164, seed));
    {
      auto sp = student.parameters();
      auto tp = teacher.named_parameters();
      for (std::size_t i = 0; i < tp.size(); ++i) {
        auto dst = tp[i].tensor->mutable_data();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = sp[i]->data()[j] + 0.1 * rng.normal();
      }
    }
    const std::string task = tasks[seed % 3].task_id;
    const std::size_t classes = tasks[seed % 3].classes;
    std::vector<double> x(6 * 4);
    for (auto& v : x) v = rng.normal();
    const Tensor features = Tensor::matrix(6, 4, x);
    std::vector<std::size_t> labels(6);
    for (auto& l : labels) l = rng.below(classes);

    TaskForward teacher_out;
    {
      NoGradGuard guard;
      teacher_out = forward(teacher, features, task);
    }
    std::vector<Tensor> params;
    for (auto& p : student.named_parameters()) params.push_back(*p.tensor);
    auto loss = [&]() {
      return composite_loss(forward(student, features, task), labels, student, &teacher_out, LossWeights{}).total;
    };
    const double err = grad_check(loss, params, kGradEpsilon);
    worst = std::max(worst, err);
    c.require(err <= kGradTolerance, "seed " + std::to_string(seed) + " error " + fmt(err));
  }
  const double secs = seconds_since(t0);
  c.require(secs < kGradBudgetSeconds, "runtime " + fmt(secs) + " s");
  c.note("100 instances, max relative error " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s");
  return c.done();
}

// ---- 2. closed-form RAT identities ----------------------------------------------

KnowledgeBase kb_from(std::size_t t, std::size_t e, const std::vector<double>& values) {
  KnowledgeBase kb;
  kb.rows = Tensor::matrix(t, e, values);
  kb.width = e;
  for (std::size_t i = 0; i < t; ++i) kb.task_ids.push_back("T" + std::to_string(i));
  return kb;
}

Outcome rat_identities() {
  Check c;
  std::mt19937_64 gen(7);
  std::normal_distribution<double> normal;
  const std::size_t T = 4, E = 6;
  std::vector<double> rows(T * E);
  for (auto& v : rows) v = normal(gen);
  const KnowledgeBase kb = kb_from(T, E, rows);

  // One-hot relevance selects a row exactly.
  for (std::size_t j = 0; j < T; ++j) {
    std::vector<double> w(T, 0.0);
    w[j] = 1.0;
    const Tensor k_a = aggregate_prior(Tensor::matrix(1, T, w), kb);
    for (std::size_t e = 0; e < E; ++e) c.require(k_a.at(0, e) == rows[j * E + e], "one-hot row " + std::to_string(j));
  }

  // Task-similarity loss at aligned, orthogonal and opposite vectors.
  const Tensor b = Tensor::matrix(1, 3, {1.0, 2.0, -2.0});
  const double aligned = task_similarity_loss(Tensor::matrix(1, 3, {2.0, 4.0, -4.0}), b).item();
  const double orthogonal = task_similarity_loss(Tensor::matrix(1, 3, {2.0, -1.0, 0.0}), b).item();
  const double opposite = task_similarity_loss(Tensor::matrix(1, 3, {-0.5, -1.0, 1.0}), b).item();
  c.require(std::abs(aligned) <= kIdentityTolerance, "L_ts aligned " + fmt(aligned, 17));
  c.require(std::abs(orthogonal - 1.0) <= kIdentityTolerance, "L_ts orthogonal " + fmt(orthogonal, 17));
  c.require(std::abs(opposite - 4.0) <= kIdentityTolerance, "L_ts opposite " + fmt(opposite, 17));

  // Orthogonality loss vanishes on orthonormal rows, including scaled ones.
  std::vector<double> basis(T * E, 0.0);
  for (std::size_t i = 0; i < T; ++i) basis[i * E + i] = 1.0;
  c.require(orthogonality_loss(kb_from(T, E, basis)).item() == 0.0, "L_orth on the standard basis");
  const double s = 1.0 / std::sqrt(2.0);
  const KnowledgeBase rotated = kb_from(2, 2, {s, s, -3.0 * s, 3.0 * s});
  c.require(std::abs(orthogonality_loss(rotated).item()) <= kIdentityTolerance, "L_orth on rotated rows");

  // Softmax keeps the argmax of the similarities at every temperature.
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> sims(T);
    for (auto& v : sims) v = normal(gen);
    const auto top = std::max_element(sims.begin(), sims.end()) - sims.begin();
    for (double tau : {0.01, 0.1, 1.0, 10.0}) {
      const Tensor w = softmax_with_temperature(Tensor::matrix(1, T, sims), tau);
      const auto d = w.data();
      c.require(std::max_element(d.begin(), d.end()) - d.begin() == top, "softmax argmax at tau " + fmt(tau));
    }
  }

  // Relevance weights are invariant to the scale of k_p and of each KB row.
  std::vector<double> kp(3 * E);
  for (auto& v : kp) v = normal(gen);
  const Tensor base = relevance_weights(Tensor::matrix(3, E, kp), kb, 0.1).omegas;
  std::vector<double> row_scaled = rows;
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t e = 0; e < E; ++e) row_scaled[i * E + e] *= 0.5 + static_cast<double>(i);
  const Tensor by_rows = relevance_weights(Tensor::matrix(3, E, kp), kb_from(T, E, row_scaled), 0.1).omegas;
  double worst = 0.0;
  for (std::size_t j = 0; j < base.size(); ++j) worst = std::max(worst, std::abs(by_rows.data()[j] - base.data()[j]));
  for (double k : {1e-3, 3.0, 1e3}) {
    std::vector<double> scaled = kp;
    for (auto& v : scaled) v *= k;
    const Tensor w = relevance_weights(Tensor::matrix(3, E, scaled), kb, 0.1).omegas;
    for (std::size_t j = 0; j < w.size(); ++j) worst = std::max(worst, std::abs(w.data()[j] - base.data()[j]));
  }
  c.require(worst <= kIdentityTolerance, "scale invariance deviation " + fmt(worst, 3));
  c.note("scale invariance deviation " + fmt(worst, 3));
  return c.done();
}

// ---- 3. EMA arithmetic ----------------------------------------------------------

Outcome ema_arithmetic() {
  Check c;
  ModelConfig mc;
  mc.encoder = {3, 4, 1, 4};
  mc.knowledge_dim = 3;
  const ModelState proto = ModelState::create(mc, {{"A", 2}, {"B", 3}}, 5);
  std::size_t checked = 0;

  // Student at zero: each update multiplies the teacher by m, so
  // |teacher_n| must equal m^n |teacher_0| exactly, with m^n accumulated in
  // the same order as the updates.
  for (double m : {0.0, 0.5, 0.9, 1.0}) {
    ModelState student = proto;
    fill(student, [](std::size_t) { return 0.0; });
    ModelState teacher = proto;
    teacher.set_role(Role::teacher);
    const auto t0 = flat_values(teacher);
    for (std::size_t n = 0; n <= 12; ++n) {
      if (n > 0) ema_update(teacher, student, m);
      const auto tn = flat_values(teacher);
      for (std::size_t j = 0; j < t0.size(); ++j) {
        double expected = t0[j];
        for (std::size_t k = 0; k < n; ++k) expected = m * expected;
        c.require(std::abs(tn[j]) == std::abs(expected),
                  "m " + fmt(m) + " step " + std::to_string(n) + " entry " + std::to_string(j));
        ++checked;
      }
    }
  }

  // Dyadic fixtures with a non-zero student: the gap halves exactly.
  {
    ModelState student = proto;
    fill(student, [](std::size_t) { return 1.0; });
    ModelState teacher = proto;
    fill(teacher, [](std::size_t k) { return 1.0 + static_cast<double>(static_cast<int>(k % 17) - 8); });
    const auto t0 = flat_values(teacher);
    for (std::size_t n = 1; n <= 30; ++n) {
      ema_update(teacher, student, 0.5);
      const auto tn = flat_values(teacher);
      for (std::size_t j = 0; j < t0.size(); ++j) {
        c.require(std::abs(tn[j] - 1.0) == std::ldexp(std::abs(t0[j] - 1.0), -static_cast<int>(n)),
                  "dyadic step " + std::to_string(n));
        ++checked;
      }
    }
  }
  c.note(std::to_string(checked) + " entries compared exactly");
  return c.done();
}

// ---- 4. cyclic pretraining efficacy ---------------------------------------------

Outcome pretraining_efficacy() {
  Check c;
  BenchmarkConfig bc;
  bc.pretrain_tasks = 3;
  bc.seed = kMasterSeed;
  const Benchmark bench = make_benchmark(bc);
  c.require(bench.config.dim == 16 && bench.pretraining.front().train.size() == 500, "benchmark shape");
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig tc;
  tc.seed = kMasterSeed;
  tc.epochs = 50;
  const auto res = cyclic_pretrain(ModelState::create(model_for(bc.dim), infos_of(bench.pretraining), kMasterSeed),
                                   bench.pretraining, tc);
  const double secs = seconds_since(t0);
  for (const auto& d : bench.pretraining) {
    const double acc = task_accuracy(res.student, d.task_id, d.test);
    const double ref = logistic_oracle(d);
    c.note(d.task_id + " " + fmt(acc) + " vs oracle " + fmt(ref));
    c.require(acc >= ref - kOracleMargin, d.task_id + " accuracy " + fmt(acc) + " below oracle " + fmt(ref));
  }
  c.require(secs < kPretrainBudgetSeconds, "runtime " + fmt(secs) + " s");
  c.note(fmt(secs, 3) + " s");
  return c.done();
}

// ---- 5. relevance selection -----------------------------------------------------

Outcome relevance_selection() {
  Check c;
  const auto& p = five_task();
  const std::size_t T = p.bench.pretraining.size();
  for (std::size_t i = 0; i < T; ++i) {
    const auto& d = p.bench.pretraining[i];
    Tensor omegas;
    {
      NoGradGuard guard;
      omegas = forward(p.result.student, features_matrix(d.val), d.task_id).weights.omegas;
    }
    double mean = 0.0;
    for (std::size_t r = 0; r < omegas.rows(); ++r) mean += omegas.at(r, i);
    mean /= static_cast<double>(omegas.rows());
    c.note(d.task_id + " " + fmt(mean, 3));
    c.require(mean > 1.0 / static_cast<double>(T), d.task_id + " mean own weight " + fmt(mean));
  }
  return c.done();
}

// ---- 6. zero-shot transfer ------------------------------------------------------

Outcome zero_shot_transfer() {
  Check c;
  const auto& p = five_task();
  const auto& target = p.bench.zero_shot;
  const CategoryMap map = alignment_by_concept(p.bench.pretraining, target);
  for (const auto& [category, outputs] : map.entries) {
    std::set<std::string> tasks;
    for (const auto& o : outputs) tasks.insert(o.task_id);
    c.require(tasks.size() >= 2, "category " + std::to_string(category) + " shared by fewer than 2 tasks");
  }
  const BootstrapOptions boot{2000, 0.95, derive_seed(kMasterSeed, 0xb007)};
  const auto ev = zero_shot_evaluate(p.result.student, target, map, {}, boot);
  double best = 0.0;
  std::string best_id;
  for (const auto& h : single_head_baselines(p.result.student, target, map))
    if (h.macro_auc > best) best = h.macro_auc, best_id = h.task_id;
  const auto control =
      zero_shot_evaluate(p.result.student, shuffled_labels(target, derive_seed(kMasterSeed, 0x5f)), map, {}, boot);
  const auto& ci = control.metrics.macro_auc_ci;
  const double a = ev.metrics.macro.auc;
  c.note("macro AUC " + fmt(a) + ", best head " + best_id + " " + fmt(best) + ", shuffled " +
         fmt(control.metrics.macro.auc) + " CI [" + fmt(ci.lower) + ", " + fmt(ci.upper) + "]");
  c.require(a >= kZeroShotFloor, "macro AUC " + fmt(a));
  c.require(a >= best, "below the best single head");
  c.require(ci.lower <= 0.5 && 0.5 <= ci.upper, "shuffled control CI excludes 0.5");
  return c.done();
}

// ---- 7. few-shot protocol -------------------------------------------------------

Outcome few_shot() {
  Check c;
  const auto& p = five_task();
  const ProbeConfig probe;
  std::vector<FewShotResult> first, second;
  for (std::size_t k : {1, 3, 5}) {
    first.push_back(few_shot_protocol(p.result.student, p.bench.few_shot, k, 100, kMasterSeed, probe));
    second.push_back(few_shot_protocol(p.result.student, p.bench.few_shot, k, 100, kMasterSeed, probe));
  }
  for (std::size_t i = 0; i < first.size(); ++i) {
    const auto& r = first[i];
    c.require(r.aucs.size() == 100, "k " + std::to_string(r.k) + " produced " + std::to_string(r.aucs.size()));
    c.require(r.aucs == second[i].aucs, "k " + std::to_string(r.k) + " not deterministic");
    c.note("k " + std::to_string(r.k) + " median " + fmt(r.summary.median, 3) + " [" + fmt(r.summary.q1, 3) + ", " +
           fmt(r.summary.q3, 3) + "]");
    if (i > 0) {
      const auto& prev = first[i - 1].summary;
      c.require(r.summary.median >= prev.median || r.summary.median >= prev.q1,
                "median at k " + std::to_string(r.k) + " falls below the previous quartile range");
    }
  }
  return c.done();
}

// ---- 8. incremental learning ----------------------------------------------------

Outcome incremental() {
  Check c;
  const auto& p = five_task();
  const auto& cfg = p.bench.config;
  SyntheticTaskSpec spec;
  spec.task_id = "T6";
  spec.concept_subset = {7, 8, 9};
  spec.transform = DomainTransform::random(cfg.dim, cfg.rotation_strength, cfg.scale_spread, cfg.bias_scale,
                                           cfg.noise, derive_seed(kMasterSeed, 0x6e6577));
  spec.class_priors = geometric_priors(3, 1.0);
  spec.counts = {500, 100, 200};
  const Dataset fresh = generate_task(p.bench.registry, spec, derive_seed(kMasterSeed, 0x6e6577, 1));

  std::vector<double> before;
  for (const auto& d : p.bench.pretraining) before.push_back(task_accuracy(p.result.student, d.task_id, d.test));
  TrainConfig tc;
  tc.seed = kMasterSeed;
  const auto res = incremental_pretrain(p.result.student, p.result.teacher, p.bench.pretraining, fresh, tc);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& d = p.bench.pretraining[i];
    const double after = task_accuracy(res.student, d.task_id, d.test);
    c.note(d.task_id + " " + fmt(before[i], 3) + "->" + fmt(after, 3));
    c.require(after >= before[i] - kRetentionMargin, d.task_id + " dropped to " + fmt(after));
  }
  const double acc = task_accuracy(res.student, fresh.task_id, fresh.test);
  const double ref = logistic_oracle(fresh);
  c.note("new task " + fmt(acc, 3) + " vs oracle " + fmt(ref, 3));
  c.require(acc >= ref - kOracleMargin, "new task accuracy " + fmt(acc));
  return c.done();
}

// ---- 9. federated equivalence ---------------------------------------------------

double union_accuracy(const ModelState& m, const std::vector<Dataset>& tasks) {
  std::size_t hit = 0, total = 0;
  for (const auto& d : tasks) {
    const double a = task_accuracy(m, d.task_id, d.test);
    hit += static_cast<std::size_t>(std::llround(a * static_cast<double>(d.test.size())));
    total += d.test.size();
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

Outcome federated() {
  Check c;
  // Single site: federation equals the centralized run split at round
  // boundaries; with the consistency term off it equals one long run.
  {
    BenchmarkConfig bc;
    bc.pretrain_tasks = 3;
    bc.pretrain_counts = {120, 30, 30};
    bc.seed = kMasterSeed;
    const Benchmark bench = make_benchmark(bc);
    const ModelState initial = ModelState::create(model_for(bc.dim), infos_of(bench.pretraining), 3);
    FederationConfig fc;
    fc.rounds = 3;
    fc.local_iterations = 4;
    for (double cons : {0.5, 0.0}) {
      SiteConfig sc;
      sc.site_id = "solo";
      for (const auto& d : bench.pretraining) sc.tasks.push_back(d.task_id);
      sc.train.seed = kMasterSeed;
      sc.train.weights.cons = cons;
      const std::vector<Site> sites{Site(sc, bench.pretraining)};
      const auto fed = run_federation(initial, sites, fc);

      ModelState central = initial;
      for (std::size_t r = 0; r < fc.rounds; ++r) {
        TrainConfig tc = sc.train;
        tc.epochs = fc.local_iterations;
        tc.iteration_offset = r * fc.local_iterations;
        central = cyclic_pretrain(central, bench.pretraining, tc).student;
      }
      c.require(checkpoint_bytes(fed.global) == checkpoint_bytes(central),
                "single site differs from split centralized run (cons " + fmt(cons) + ")");
      if (cons == 0.0) {
        TrainConfig tc = sc.train;
        tc.epochs = fc.rounds * fc.local_iterations;
        const auto whole = cyclic_pretrain(initial, bench.pretraining, tc).student;
        c.require(checkpoint_bytes(fed.global) == checkpoint_bytes(whole),
                  "single site differs from one uninterrupted run");
      }
    }
  }

  // Three sites against site-only training on the union test set.
  {
    const auto& p = five_task();
    const auto& tasks = p.bench.pretraining;
    const std::vector<std::vector<std::size_t>> owned{{0, 1}, {2}, {3, 4}};
    const ModelState initial = ModelState::create(model_for(p.bench.config.dim), infos_of(tasks), kMasterSeed);
    FederationConfig fc;
    std::vector<Site> sites;
    for (std::size_t s = 0; s < owned.size(); ++s) {
      SiteConfig sc;
      sc.site_id = std::string(1, static_cast<char>('A' + s));
      std::vector<Dataset> ds;
      for (std::size_t t : owned[s]) sc.tasks.push_back(tasks[t].task_id), ds.push_back(tasks[t]);
      sc.train.seed = kMasterSeed;
      sites.emplace_back(sc, ds);
    }
    const auto fed = run_federation(initial, sites, fc);
    const double global = union_accuracy(fed.global, tasks);
    std::string notes = "global " + fmt(global, 3);
    for (std::size_t s = 0; s < sites.size(); ++s) {
      std::vector<Dataset> ds;
      for (std::size_t t : owned[s]) ds.push_back(tasks[t]);
      TrainConfig tc = sites[s].config().train;
      tc.epochs = fc.rounds * fc.local_iterations;
      const auto local = cyclic_pretrain(initial, ds, tc).student;
      const double acc = union_accuracy(local, tasks);
      notes += ", site " + sites[s].id() + " " + fmt(acc, 3);
      c.require(global >= acc, "global below site " + sites[s].id());
    }
    c.note(notes);
  }

  // Scalar fixtures for by-sample weighting.
  {
    const std::vector<std::size_t> counts{100, 300};
    const auto w = aggregation_weights(counts, Weighting::by_samples);
    c.require(w == std::vector<double>{0.25, 0.75}, "weights for 100/300 samples");
    const std::vector<std::vector<double>> values{{4.0, 2.0, 1.0}, {0.0, 2.0, 1.0 / 3.0}};
    const auto mean = weighted_mean(values, w);
    c.require(mean[0] == 1.0 && mean[1] == 2.0, "weighted mean of 4/0 and 2/2");
    c.require(mean[2] == 0.25 * 1.0 + 0.75 * (1.0 / 3.0), "weighted mean of 1 and 1/3");

    ModelConfig mc;
    mc.encoder = {3, 4, 1, 4};
    mc.knowledge_dim = 3;
    const ModelState g = ModelState::create(mc, {{"A", 2}, {"B", 2}}, 1);
    ModelState s1 = g, s2 = g;
    fill(s1, [](std::size_t) { return 1.0; });
    fill(s2, [](std::size_t) { return 2.0; });
    SiteConfig c1{"one", {"A"}, {}}, c2{"two", {"B"}, {}};
    Dataset da, db;
    da.task_id = "A";
    db.task_id = "B";
    const std::vector<Site> sites{Site(c1, {da}), Site(c2, {db})};
    const std::vector<ModelState> states{s1, s2};
    const auto agg = aggregate(g, states, sites, aggregation_weights(std::vector<std::size_t>{50, 50},
                                                                     Weighting::by_samples));
    ModelState copy = agg;
    for (auto& np : copy.named_parameters()) {
      const auto d = np.tensor->data();
      for (std::size_t j = 0; j < d.size(); ++j) {
        // Heads and KB rows follow their owning site; everything else is shared.
        double want = 1.5;
        if (np.owner_task) want = *np.owner_task == "A" ? 1.0 : 2.0;
        if (np.tensor->same_node(copy.kb.rows)) want = j / copy.kb.width == 0 ? 1.0 : 2.0;
        c.require(d[j] == want, "aggregate " + np.name);
      }
    }
  }
  return c.done();
}

// ---- 10. metrics oracle equivalence ---------------------------------------------

double three_sig(double x) {
  if (x == 0.0) return 0.0;
  const double mag = std::pow(10.0, std::floor(std::log10(std::abs(x))) - 2.0);
  return std::round(x / mag) * mag;
}

Outcome metrics_oracles() {
  Check c;
  std::mt19937_64 gen(2024);
  std::size_t datasets = 0;
  for (std::size_t n = 2; n <= 200; ++n) {
    for (int rep = 0; rep < 3; ++rep) {
      std::uniform_int_distribution<int> levels(1, rep == 0 ? 4 : (rep == 1 ? 20 : 1000));
      const int nl = levels(gen);
      std::uniform_int_distribution<int> pick(0, nl);
      std::bernoulli_distribution coin(std::uniform_real_distribution<double>(0.1, 0.9)(gen));
      ScoredLabels sl;
      for (std::size_t i = 0; i < n; ++i) {
        sl.scores.push_back(static_cast<double>(pick(gen)) / static_cast<double>(nl));
        sl.labels.push_back(coin(gen) ? 1 : 0);
      }
      sl.labels[0] = 1;
      sl.labels[1] = 0;
      std::vector<int> pred;
      for (double s : sl.scores) pred.push_back(s >= 0.5 ? 1 : 0);
      const auto counts = oracle::count(pred, sl.labels);
      const std::string tag = "n " + std::to_string(n) + " rep " + std::to_string(rep);
      c.require(auc(sl) == oracle::pair_auc(sl.scores, sl.labels), "AUC " + tag);
      c.require(f1_score(pred, sl.labels) == oracle::f1(counts), "F1 " + tag);
      c.require(mcc(pred, sl.labels) == oracle::mcc(counts), "MCC " + tag);
      c.require(average_precision(sl) == oracle::average_precision(sl.scores, sl.labels), "AP " + tag);
      ++datasets;
    }
  }
  double trap = 0.0;
  for (std::size_t n : {10, 100, 500, 1000}) {
    for (int rep = 0; rep < 5; ++rep) {
      ScoredLabels sl;
      std::uniform_int_distribution<int> pick(0, rep % 2 == 0 ? 9 : 1 << 20);
      for (std::size_t i = 0; i < n; ++i) {
        sl.scores.push_back(pick(gen));
        sl.labels.push_back(static_cast<int>(gen() % 2));
      }
      sl.labels[0] = 1;
      sl.labels[1] = 0;
      trap = std::max(trap, std::abs(trapezoid_area(roc_curve(sl)) - auc(sl)));
    }
  }
  c.require(trap <= kTrapezoidTolerance, "trapezoid gap " + fmt(trap, 3));

  struct Row {
    double df, t, p;
  };
  for (const Row& r : {Row{10, 2.228, 0.05}, Row{5, 2.571, 0.05}, Row{20, 2.845, 0.01}, Row{10, 3.169, 0.01},
                       Row{30, 2.042, 0.05}, Row{1, 12.706, 0.05}}) {
    const double p = student_t_two_sided_p(r.t, r.df);
    c.require(three_sig(p) == three_sig(r.p), "t " + fmt(r.t) + " df " + fmt(r.df) + " gives p " + fmt(p, 6));
  }
  c.note(std::to_string(datasets) + " tied datasets, trapezoid gap " + fmt(trap, 3));
  return c.done();
}

// ---- 11. CLI reproducibility ----------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = slurp(e.path());
  return out;
}

Outcome cli_reproducibility() {
  Check c;
  const fs::path root = fs::temp_directory_path() / ("ratnet_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string bench = "a/gen/";
  const std::string tasks = bench + "T1.csv, " + bench + "T2.csv, " + bench + "T3.csv";
  struct Step {
    std::string name, command, config;
  };
  const std::vector<Step> steps = {
      {"gen", "gen",
       "pretrain_tasks = 3\npretrain_train = 90\npretrain_val = 30\npretrain_test = 30\nzeroshot_test = 90\n"
       "fewshot_train = 24\nfewshot_val = 12\nfewshot_test = 60\nlongtail_classes = 6\nlongtail_train = 200\n"
       "longtail_val = 40\nlongtail_test = 120\n"},
      {"pretrain", "pretrain", "tasks = " + tasks + "\nepochs = 4\ntiming = false\n"},
      {"finetune", "finetune", "checkpoint = a/pretrain/student.ckpt\ndata = " + bench + "FS.csv\nepochs = 3\n"},
      {"probe", "probe", "checkpoint = a/pretrain/student.ckpt\ndata = " + bench +
                    "FS.csv\nfractions = 0.5, 1\nrepeats = 2\nprobe_epochs = 20\n"},
      {"fewshot", "fewshot", "checkpoint = a/pretrain/student.ckpt\ndata = " + bench + "FS.csv\nk = 1, 3\nruns = 5\n"},
      {"zeroshot", "zeroshot", "checkpoint = a/pretrain/student.ckpt\ndata = " + bench + "ZS.csv\nmap = " + bench +
                       "zeroshot_map.txt\nbootstrap_resamples = 50\n"},
      {"increment", "increment", "student = a/pretrain/student.ckpt\nteacher = a/pretrain/teacher.ckpt\nold_tasks = " + tasks +
                        "\nnew_task = " + bench + "FS.csv\nepochs = 2\n"},
      {"federate", "federate", "rounds = 2\nlocal_iterations = 2\n[site A]\ntasks = " + bench + "T1.csv, " + bench +
                       "T2.csv\n[site B]\ntasks = " + bench + "T3.csv\n"},
      {"probe_b", "probe", "checkpoint = a/pretrain/student.ckpt\ndata = " + bench +
                                "FS.csv\nprobe_seed = 8\nprobe_epochs = 20\n"},
      {"probe_c", "probe", "checkpoint = a/pretrain/student.ckpt\ndata = " + bench +
                                "FS.csv\nprobe_seed = 9\nprobe_epochs = 20\n"},
      {"report", "report", "runs = a/probe_b, a/probe_c\n"},
      {"export-embeddings", "export-embeddings", "checkpoint = a/pretrain/student.ckpt\ndata = " + bench + "FS.csv\n"},
  };
  std::size_t files = 0;
  for (const auto& [name, command, config] : steps) {
    const fs::path cfg = root / (name + ".cfg");
    write_text(cfg, config);
    for (const char* run : {"a", "b"}) {
      std::ostringstream sink;
      const std::string out = (root / run / name).string();
      const int code = run_cli({command, "--config", cfg.string(), "--out", out, "--quiet"}, sink, sink);
      c.require(code == 0, name + " exited with " + std::to_string(code) + ": " + sink.str());
    }
    const auto a = tree(root / "a" / name), b = tree(root / "b" / name);
    c.require(!a.empty(), name + " wrote nothing");
    c.require(a == b, name + " outputs differ between runs");
    files += a.size();
  }
  c.note(std::to_string(steps.size()) + " commands, " + std::to_string(files) + " files byte-identical");
  fs::remove_all(root);
  return c.done();
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"closed-form relevance identities", rat_identities},
      {"EMA arithmetic", ema_arithmetic},
      {"cyclic pretraining efficacy", pretraining_efficacy},
      {"relevance selection", relevance_selection},
      {"zero-shot transfer", zero_shot_transfer},
      {"few-shot protocol", few_shot},
      {"incremental learning", incremental},
      {"federated equivalence", federated},
      {"metrics oracle equivalence", metrics_oracles},
      {"CLI reproducibility", cli_reproducibility},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2zu %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                seconds_since(t0), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
