#include "ratnet/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "ratnet/datagen.hpp"
#include "ratnet/federated.hpp"
#include "ratnet/kvtext.hpp"
#include "ratnet/metrics.hpp"
#include "ratnet/model.hpp"
#include "ratnet/training.hpp"
#include "ratnet/transfer.hpp"

namespace ratnet {
namespace {

namespace fs = std::filesystem;

// Config lookups that remember the value actually used, for the manifest.
class Resolved {
 public:
  Resolved(KvTable table, fs::path base, std::optional<std::uint64_t> seed_override, std::string prefix = "")
      : t_(std::move(table)), base_(std::move(base)), seed_(seed_override), prefix_(std::move(prefix)) {}

  std::size_t size(const std::string& key, std::size_t fallback) {
    const auto v = t_.size(key, fallback);
    note(key, std::to_string(v));
    return v;
  }
  double real(const std::string& key, double fallback) {
    const double v = t_.real(key, fallback);
    note(key, format_double(v));
    return v;
  }
  std::optional<double> optional_real(const std::string& key) {
    if (!t_.has(key)) {
      t_.take(key);
      note(key, "model");
      return std::nullopt;
    }
    return real(key, 0.0);
  }
  bool boolean(const std::string& key, bool fallback) {
    const bool v = t_.boolean(key, fallback);
    note(key, v ? "true" : "false");
    return v;
  }
  std::string str(const std::string& key, const std::string& fallback) {
    const auto v = t_.str(key, fallback);
    note(key, v);
    return v;
  }
  std::uint64_t seed(const std::string& key, std::uint64_t fallback) {
    std::uint64_t v = t_.u64(key, fallback);
    if (seed_ && key == "seed") v = *seed_;
    note(key, std::to_string(v));
    return v;
  }
  std::uint64_t u64(const std::string& key, std::uint64_t fallback) {
    const auto v = t_.u64(key, fallback);
    note(key, std::to_string(v));
    return v;
  }
  fs::path path(const std::string& key) {
    const auto s = t_.required(key);
    note(key, s);
    return resolve(s);
  }
  std::vector<fs::path> paths(const std::string& key) {
    const auto items = t_.list(key);
    if (items.empty()) throw ConfigError("missing required config key '" + key + "' in " + t_.context());
    note(key, join_list(items));
    std::vector<fs::path> out;
    for (const auto& s : items) out.push_back(resolve(s));
    return out;
  }
  std::vector<double> reals(const std::string& key, std::vector<double> fallback) {
    const auto items = t_.list(key);
    std::vector<double> out;
    try {
      for (const auto& s : items) out.push_back(parse_double(s));
    } catch (const Error&) {
      throw ConfigError("config key '" + key + "' in " + t_.context() + ": expected a list of numbers");
    }
    if (out.empty()) out = std::move(fallback);
    std::vector<std::string> echo;
    for (double v : out) echo.push_back(format_double(v));
    note(key, join_list(echo));
    return out;
  }
  std::vector<std::size_t> sizes(const std::string& key, std::vector<std::size_t> fallback) {
    const auto items = t_.list(key);
    std::vector<std::size_t> out;
    try {
      for (const auto& s : items) {
        const long long v = parse_int(s);
        if (v < 0) throw Error("negative");
        out.push_back(static_cast<std::size_t>(v));
      }
    } catch (const Error&) {
      throw ConfigError("config key '" + key + "' in " + t_.context() + ": expected a list of nonnegative integers");
    }
    if (out.empty()) out = std::move(fallback);
    std::vector<std::string> echo;
    for (auto v : out) echo.push_back(std::to_string(v));
    note(key, join_list(echo));
    return out;
  }
  void note(const std::string& key, const std::string& value) { echo_.emplace_back(prefix_ + key, value); }
  void finish() const { t_.finish(); }
  const std::vector<std::pair<std::string, std::string>>& echo() const { return echo_; }

 private:
  fs::path resolve(const std::string& s) const {
    fs::path p(s);
    return p.is_absolute() ? p : base_ / p;
  }

  KvTable t_;
  fs::path base_;
  std::optional<std::uint64_t> seed_;
  std::string prefix_;
  std::vector<std::pair<std::string, std::string>> echo_;
};

std::string checksum_of(std::string_view bytes) {
  Fnv64 h;
  h.update(bytes);
  return h.hex();
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Files written by one command run, listed with checksums in the manifest.
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }
  void text(const std::string& name, const std::string& content, bool listed = true) {
    const fs::path p = dir_ / name;
    std::ofstream os(p, std::ios::binary);
    if (!os) throw Error("cannot write " + p.string());
    os << content;
    if (!os) throw Error("write failed for " + p.string());
    if (listed) files_.emplace_back(name, checksum_of(content));
  }
  void checkpoint(const std::string& name, const ModelState& state) { text(name, checkpoint_bytes(state)); }
  void dataset(const std::string& name, const Dataset& d) {
    const fs::path p = dir_ / name;
    write_dataset_csv(d, p);
    files_.emplace_back(name, checksum_of(read_file(p)));
  }
  void manifest(const std::string& command, const std::vector<std::pair<std::string, std::string>>& config) {
    std::ostringstream os;
    os << "format = ratnet-run/1\n";
    os << "command = " << command << "\n";
    os << "\n[config]\n";
    for (const auto& [k, v] : config) os << k << " = " << v << "\n";
    os << "\n[outputs]\n";
    for (const auto& [k, v] : files_) os << k << " = " << v << "\n";
    text("manifest.txt", os.str(), false);
  }

 private:
  fs::path dir_;
  std::vector<std::pair<std::string, std::string>> files_;
};

struct Context {
  std::string command;
  KvFile file;
  fs::path base;
  std::optional<std::uint64_t> seed;
  Outputs out;
  std::ostream& log;
};

Dataset load_dataset(const fs::path& p) { return read_dataset_csv(p); }

ModelConfig read_model(Resolved& r, std::size_t input_dim) {
  ModelConfig m;
  m.encoder.input_dim = input_dim;
  r.note("input_dim", std::to_string(input_dim));
  m.encoder.embedding_dim = r.size("embedding_dim", m.encoder.embedding_dim);
  m.encoder.depth = r.size("depth", m.encoder.depth);
  m.encoder.hidden = r.size("hidden", m.encoder.hidden);
  m.knowledge_dim = r.size("knowledge_dim", m.knowledge_dim);
  m.generator_hidden = r.size("generator_hidden", 2 * m.knowledge_dim);
  m.fusion_hidden = r.size("fusion_hidden", 2 * m.knowledge_dim);
  m.projector_dim = r.size("projector_dim", m.knowledge_dim);
  m.tau = r.real("tau", m.tau);
  m.validate();
  return m;
}

TrainConfig read_train(Resolved& r) {
  TrainConfig t;
  t.epochs = r.size("epochs", t.epochs);
  t.sgd.learning_rate = r.real("learning_rate", t.sgd.learning_rate);
  t.sgd.batch_size = r.size("batch_size", t.sgd.batch_size);
  t.weights.ce = r.real("w_ce", t.weights.ce);
  t.weights.ts = r.real("w_ts", t.weights.ts);
  t.weights.orth = r.real("w_orth", t.weights.orth);
  t.weights.cons = r.real("w_cons", t.weights.cons);
  t.ema_momentum = r.real("ema_momentum", t.ema_momentum);
  const auto freq = r.str("ema_frequency", "per_task_epoch");
  if (freq == "per_task_epoch")
    t.ema_frequency = EmaFrequency::per_task_epoch;
  else if (freq == "per_step")
    t.ema_frequency = EmaFrequency::per_step;
  else
    throw ConfigError("ema_frequency must be per_task_epoch or per_step, got '" + freq + "'");
  t.consistency_warmup = r.size("consistency_warmup", t.consistency_warmup);
  t.augment_sigma = r.real("augment_sigma", t.augment_sigma);
  t.seed = r.seed("seed", t.seed);
  return t;
}

ProbeConfig read_probe(Resolved& r) {
  ProbeConfig p;
  p.epochs = r.size("probe_epochs", p.epochs);
  p.learning_rate = r.real("probe_learning_rate", p.learning_rate);
  p.batch_size = r.size("probe_batch_size", p.batch_size);
  p.seed = r.u64("probe_seed", p.seed);
  p.bootstrap_resamples = r.size("bootstrap_resamples", p.bootstrap_resamples);
  return p;
}

std::vector<TaskInfo> infos_of(std::span<const Dataset> ds) {
  std::vector<TaskInfo> out;
  for (const auto& d : ds) out.push_back({d.task_id, d.num_classes()});
  return out;
}

std::size_t common_dim(std::span<const Dataset> ds) {
  for (const auto& d : ds)
    if (d.dim != ds[0].dim)
      throw Error("dataset " + d.task_id + " has " + std::to_string(d.dim) + " features, expected " +
                  std::to_string(ds[0].dim));
  return ds[0].dim;
}

std::string accuracy_csv(const ModelState& state, std::span<const Dataset> ds) {
  std::ostringstream os;
  os << "task_id,val_accuracy,test_accuracy\n";
  for (const auto& d : ds) {
    os << d.task_id << ',';
    os << (d.val.empty() ? "" : format_double(task_accuracy(state, d.task_id, d.val))) << ',';
    os << (d.test.empty() ? "" : format_double(task_accuracy(state, d.task_id, d.test))) << "\n";
  }
  return os.str();
}

std::string metric_row(const ClassMetrics& m) {
  return format_double(m.auc) + ',' + format_double(m.f1) + ',' + format_double(m.ap) + ',' + format_double(m.mcc);
}

// ---- commands -------------------------------------------------------------------

void cmd_gen(Context& c, Resolved& r) {
  BenchmarkConfig b;
  b.dim = r.size("dim", b.dim);
  b.pretrain_tasks = r.size("pretrain_tasks", b.pretrain_tasks);
  b.classes_per_task = r.size("classes_per_task", b.classes_per_task);
  b.pretrain_counts.train = r.size("pretrain_train", b.pretrain_counts.train);
  b.pretrain_counts.val = r.size("pretrain_val", b.pretrain_counts.val);
  b.pretrain_counts.test = r.size("pretrain_test", b.pretrain_counts.test);
  b.prototype_scale = r.real("prototype_scale", b.prototype_scale);
  b.separation_margin = r.real("separation_margin", b.separation_margin);
  b.noise = r.real("noise", b.noise);
  b.rotation_strength = r.real("rotation_strength", b.rotation_strength);
  b.scale_spread = r.real("scale_spread", b.scale_spread);
  b.bias_scale = r.real("bias_scale", b.bias_scale);
  b.zeroshot_classes = r.size("zeroshot_classes", b.zeroshot_classes);
  b.zeroshot_counts.train = r.size("zeroshot_train", b.zeroshot_counts.train);
  b.zeroshot_counts.val = r.size("zeroshot_val", b.zeroshot_counts.val);
  b.zeroshot_counts.test = r.size("zeroshot_test", b.zeroshot_counts.test);
  b.fewshot_classes = r.size("fewshot_classes", b.fewshot_classes);
  b.fewshot_counts.train = r.size("fewshot_train", b.fewshot_counts.train);
  b.fewshot_counts.val = r.size("fewshot_val", b.fewshot_counts.val);
  b.fewshot_counts.test = r.size("fewshot_test", b.fewshot_counts.test);
  b.longtail_classes = r.size("longtail_classes", b.longtail_classes);
  b.longtail_rho = r.real("longtail_rho", b.longtail_rho);
  b.longtail_counts.train = r.size("longtail_train", b.longtail_counts.train);
  b.longtail_counts.val = r.size("longtail_val", b.longtail_counts.val);
  b.longtail_counts.test = r.size("longtail_test", b.longtail_counts.test);
  b.seed = r.seed("seed", b.seed);
  r.finish();
  b.validate();

  const Benchmark bench = make_benchmark(b);
  for (const auto& d : bench.pretraining) c.out.dataset(d.task_id + ".csv", d);
  c.out.dataset(bench.zero_shot.task_id + ".csv", bench.zero_shot);
  c.out.dataset(bench.few_shot.task_id + ".csv", bench.few_shot);
  c.out.dataset(bench.long_tail.task_id + ".csv", bench.long_tail);
  c.out.text("zeroshot_map.txt", alignment_by_concept(bench.pretraining, bench.zero_shot).to_text());
  c.out.text("benchmark.txt", bench.manifest());
  c.log << "generated " << bench.pretraining.size() << " pretraining tasks and 3 evaluation tasks in "
        << c.out.dir().string() << "\n";
}

void cmd_pretrain(Context& c, Resolved& r) {
  std::vector<Dataset> ds;
  for (const auto& p : r.paths("tasks")) ds.push_back(load_dataset(p));
  const ModelConfig mc = read_model(r, common_dim(ds));
  const TrainConfig tc = read_train(r);
  const auto model_seed = r.u64("model_seed", tc.seed);
  const bool timing = r.boolean("timing", false);
  r.finish();
  tc.validate();

  const auto res = cyclic_pretrain(ModelState::create(mc, infos_of(ds), model_seed), ds, tc);
  c.out.checkpoint("student.ckpt", res.student);
  c.out.checkpoint("teacher.ckpt", res.teacher);
  c.out.text("runlog.csv", res.log.to_csv());
  if (timing) c.out.text("timing.csv", res.log.timing_csv(), false);
  c.out.text("accuracy.csv", accuracy_csv(res.student, ds));
  c.log << accuracy_csv(res.student, ds);
}

void cmd_finetune(Context& c, Resolved& r) {
  const auto ckpt = r.path("checkpoint");
  const Dataset d = load_dataset(r.path("data"));
  const ModelState state = checkpoint_load(ckpt);
  const std::string task_id = r.str("task_id", state.kb.index_of(d.task_id) ? d.task_id + "_ft" : d.task_id);
  const TrainConfig tc = read_train(r);
  r.finish();
  tc.sgd.validate();
  tc.weights.validate();

  const FineTuneResult res = fine_tune(state, d, task_id, tc);
  c.out.checkpoint("model.ckpt", res.state);
  c.out.text("metrics.csv", res.metrics.to_csv());
  c.out.text("metrics.txt", res.metrics.to_table());
  c.log << res.metrics.to_table();
}

void cmd_probe(Context& c, Resolved& r) {
  const auto ckpt = r.path("checkpoint");
  const Dataset d = load_dataset(r.path("data"));
  const auto fractions = r.reals("fractions", {1.0});
  const auto repeats = r.size("repeats", 1);
  const ProbeConfig pc = read_probe(r);
  const auto seed = r.seed("seed", 42);
  r.finish();

  const ModelState state = checkpoint_load(ckpt);
  std::ostringstream runs;
  runs << "group,run,auc,f1,ap,mcc\n";
  if (fractions.size() == 1 && fractions[0] == 1.0 && repeats == 1) {
    const ProbeResult pr = linear_probe(state, d.train, d.test, d.concept_subset, pc);
    runs << "1,0," << metric_row(pr.metrics.macro) << "\n";
    c.out.text("runs.csv", runs.str());
    c.out.text("metrics.csv", pr.metrics.to_csv());
    c.out.text("metrics.txt", pr.metrics.to_table());
    c.log << pr.metrics.to_table();
    return;
  }
  const ReducedDataResult res = reduced_data_protocol(state, d, fractions, repeats, seed, pc);
  for (const auto& row : res.rows) runs << format_double(row.fraction) << ',' << row.repeat << ',' << metric_row(row.macro) << "\n";
  std::ostringstream sum, table;
  sum << "fraction,metric,mean,std,n\n";
  table << std::fixed << std::setprecision(4);
  table << std::left << std::setw(10) << "fraction" << std::right;
  for (const char* m : {"AUC", "F1", "AP", "MCC", "accuracy"}) table << std::setw(20) << m;
  table << "\n";
  for (const auto& s : res.summary) {
    const std::pair<const char*, const RunStats*> stats[] = {
        {"auc", &s.auc}, {"f1", &s.f1}, {"ap", &s.ap}, {"mcc", &s.mcc}, {"accuracy", &s.accuracy}};
    table << std::left << std::setw(10) << format_double(s.fraction) << std::right;
    for (const auto& [name, st] : stats) {
      sum << format_double(s.fraction) << ',' << name << ',' << format_double(st->mean) << ','
          << format_double(st->stddev) << ',' << st->n << "\n";
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << st->mean << " +- " << st->stddev;
      table << std::setw(20) << cell.str();
    }
    table << "\n";
  }
  c.out.text("runs.csv", runs.str());
  c.out.text("summary.csv", sum.str());
  c.out.text("summary.txt", table.str());
  c.log << table.str();
}

void cmd_fewshot(Context& c, Resolved& r) {
  const auto ckpt = r.path("checkpoint");
  const Dataset d = load_dataset(r.path("data"));
  const auto ks = r.sizes("k", {1, 3, 5});
  const auto runs_per_k = r.size("runs", 100);
  const ProbeConfig pc = read_probe(r);
  const auto seed = r.seed("seed", 42);
  r.finish();

  const ModelState state = checkpoint_load(ckpt);
  std::ostringstream runs, sum, table;
  runs << "group,run,auc\n";
  sum << "k,runs,median,q1,q3,whisker_low,whisker_high,outliers\n";
  table << std::fixed << std::setprecision(4);
  table << std::left << std::setw(6) << "k" << std::right << std::setw(8) << "runs";
  for (const char* h : {"median", "q1", "q3", "lo", "hi"}) table << std::setw(10) << h;
  table << std::setw(10) << "outliers" << "\n";
  for (std::size_t k : ks) {
    const FewShotResult res = few_shot_protocol(state, d, k, runs_per_k, seed, pc);
    for (std::size_t i = 0; i < res.aucs.size(); ++i) runs << k << ',' << i << ',' << format_double(res.aucs[i]) << "\n";
    const auto& b = res.summary;
    sum << k << ',' << res.aucs.size() << ',' << format_double(b.median) << ',' << format_double(b.q1) << ','
        << format_double(b.q3) << ',' << format_double(b.whisker_low) << ',' << format_double(b.whisker_high) << ','
        << b.outliers.size() << "\n";
    table << std::left << std::setw(6) << k << std::right << std::setw(8) << res.aucs.size() << std::setw(10)
          << b.median << std::setw(10) << b.q1 << std::setw(10) << b.q3 << std::setw(10) << b.whisker_low
          << std::setw(10) << b.whisker_high << std::setw(10) << b.outliers.size() << "\n";
  }
  c.out.text("runs.csv", runs.str());
  c.out.text("summary.csv", sum.str());
  c.out.text("summary.txt", table.str());
  c.log << table.str();
}

void cmd_zeroshot(Context& c, Resolved& r) {
  const auto ckpt = r.path("checkpoint");
  const Dataset d = load_dataset(r.path("data"));
  const CategoryMap map = CategoryMap::load(r.path("map"));
  ZeroShotOptions zo;
  zo.renormalize = r.boolean("renormalize", true);
  zo.tau = r.optional_real("tau");
  BootstrapOptions bo;
  bo.resamples = r.size("bootstrap_resamples", 2000);
  bo.seed = r.seed("seed", 42);
  const bool baselines = r.boolean("baselines", true);
  const bool control = r.boolean("shuffled_control", true);
  r.finish();

  const ModelState state = checkpoint_load(ckpt);
  const ZeroShotEvaluation ev = zero_shot_evaluate(state, d, map, zo, bo);
  c.out.text("metrics.csv", ev.metrics.to_csv());
  c.out.text("metrics.txt", ev.metrics.to_table());
  c.out.text("roc.csv", ev.roc_csv());

  const auto& p = ev.prediction;
  const std::size_t T = p.task_ids.size();
  std::ostringstream attr;
  attr << "task_id,mean_omega,mean_contribution\n";
  for (std::size_t t = 0; t < T; ++t) {
    double om = 0.0, co = 0.0;
    for (std::size_t i = 0; i < p.samples; ++i) {
      om += p.omegas[i * T + t];
      co += p.contributions[i * T + t];
    }
    attr << p.task_ids[t] << ',' << format_double(om / static_cast<double>(p.samples)) << ','
         << format_double(co / static_cast<double>(p.samples)) << "\n";
  }
  c.out.text("attribution.csv", attr.str());

  if (baselines) {
    std::ostringstream os;
    os << "head,macro_auc\n";
    os << "aggregated," << format_double(ev.metrics.macro.auc) << "\n";
    for (const auto& b : single_head_baselines(state, d, map, zo)) os << b.task_id << ',' << format_double(b.macro_auc) << "\n";
    c.out.text("baselines.csv", os.str());
  }
  if (control) {
    const auto sh = zero_shot_evaluate(state, shuffled_labels(d, derive_seed(bo.seed, 0x5f)), map, zo, bo);
    std::ostringstream os;
    os << "control,macro_auc,ci_lower,ci_upper\n";
    os << "shuffled_labels," << format_double(sh.metrics.macro.auc) << ',' << format_double(sh.metrics.macro_auc_ci.lower)
       << ',' << format_double(sh.metrics.macro_auc_ci.upper) << "\n";
    c.out.text("control.csv", os.str());
  }
  c.log << ev.metrics.to_table();
}

void cmd_increment(Context& c, Resolved& r) {
  const ModelState student = checkpoint_load(r.path("student"));
  const ModelState teacher = checkpoint_load(r.path("teacher"));
  std::vector<Dataset> old;
  for (const auto& p : r.paths("old_tasks")) old.push_back(load_dataset(p));
  const Dataset fresh = load_dataset(r.path("new_task"));
  const TrainConfig tc = read_train(r);
  r.finish();

  const auto res = incremental_pretrain(student, teacher, old, fresh, tc);
  std::ostringstream acc;
  acc << "task_id,before,after\n";
  for (const auto& d : old)
    acc << d.task_id << ',' << format_double(task_accuracy(student, d.task_id, d.test)) << ','
        << format_double(task_accuracy(res.student, d.task_id, d.test)) << "\n";
  acc << fresh.task_id << ",," << format_double(task_accuracy(res.student, fresh.task_id, fresh.test)) << "\n";
  c.out.checkpoint("student.ckpt", res.student);
  c.out.checkpoint("teacher.ckpt", res.teacher);
  c.out.text("runlog.csv", res.log.to_csv());
  c.out.text("accuracy.csv", acc.str());
  c.log << acc.str();
}

void cmd_federate(Context& c, Resolved& r, std::vector<std::pair<std::string, std::string>>& echo) {
  FederationConfig fc;
  fc.rounds = r.size("rounds", fc.rounds);
  fc.local_iterations = r.size("local_iterations", fc.local_iterations);
  fc.weighting = parse_weighting(r.str("weighting", weighting_name(fc.weighting)));
  fc.parallel = r.boolean("parallel", fc.parallel);

  std::vector<std::pair<SiteConfig, std::vector<Dataset>>> specs;
  std::vector<Dataset> registry;
  std::vector<Resolved> site_tables;
  for (const auto& sec : c.file.sections) {
    if (sec.kind != "site") throw ConfigError(c.file.source + ":" + std::to_string(sec.line) + ": unexpected section [" + sec.kind + "]");
    if (sec.name.empty()) throw ConfigError(c.file.source + ":" + std::to_string(sec.line) + ": site section needs a name");
    Resolved sr(c.file.section_table(sec), c.base, std::nullopt, "site." + sec.name + ".");
    SiteConfig sc;
    sc.site_id = sec.name;
    std::vector<Dataset> ds;
    for (const auto& p : sr.paths("tasks")) {
      ds.push_back(load_dataset(p));
      sc.tasks.push_back(ds.back().task_id);
      for (const auto& known : registry)
        if (known.task_id == ds.back().task_id)
          throw ConfigError("task " + known.task_id + " is owned by more than one site entry with separate data");
      registry.push_back(ds.back());
    }
    sr.finish();
    specs.emplace_back(std::move(sc), std::move(ds));
    site_tables.push_back(std::move(sr));
  }
  if (specs.empty()) throw ConfigError("federate: no [site NAME] sections in " + c.file.source);
  const ModelConfig mc = read_model(r, common_dim(registry));
  const TrainConfig tc = read_train(r);
  const auto model_seed = r.u64("model_seed", tc.seed);
  r.finish();
  fc.validate();
  tc.sgd.validate();
  tc.weights.validate();

  std::vector<Site> sites;
  for (auto& [sc, ds] : specs) {
    sc.train = tc;
    sites.emplace_back(sc, std::move(ds));
  }
  for (const auto& st : site_tables) echo.insert(echo.end(), st.echo().begin(), st.echo().end());

  const auto res = run_federation(ModelState::create(mc, infos_of(registry), model_seed), sites, fc);
  c.out.checkpoint("global.ckpt", res.global);
  c.out.text("rounds.csv", round_records_csv(res.records));
  c.out.text("accuracy.csv", accuracy_csv(res.global, registry));
  c.log << accuracy_csv(res.global, registry);
}

struct RunTable {
  std::string label;
  std::vector<std::string> metrics;
  // group -> metric -> values
  std::vector<std::string> groups;
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
};

RunTable read_runs(const fs::path& dir, const std::string& label) {
  const fs::path p = dir / "runs.csv";
  const std::string text = read_file(p);
  RunTable t;
  t.label = label;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw Error(p.string() + ": empty file");
  auto header = split(trim(line), ',');
  if (header.size() < 3 || header[0] != "group" || header[1] != "run") throw Error(p.string() + ": unexpected header");
  t.metrics.assign(header.begin() + 2, header.end());
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cols = split(trim(line), ',');
    if (cols.size() != header.size()) throw Error(p.string() + ":" + std::to_string(lineno) + ": column count");
    if (!t.values.count(cols[0])) t.groups.push_back(cols[0]);
    for (std::size_t m = 0; m < t.metrics.size(); ++m) t.values[cols[0]][t.metrics[m]].push_back(parse_double(cols[m + 2]));
  }
  return t;
}

void cmd_report(Context& c, Resolved& r) {
  const auto dirs = r.paths("runs");
  r.finish();
  std::vector<RunTable> runs;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    std::string label = dirs[i].filename().string();
    if (label.empty()) label = dirs[i].parent_path().filename().string();
    for (const auto& prev : runs)
      if (prev.label == label) label += "#" + std::to_string(i);
    runs.push_back(read_runs(dirs[i], label));
  }
  for (const auto& t : runs)
    if (t.metrics != runs[0].metrics)
      throw Error("incompatible metric sets: " + runs[0].label + " has {" + join_list(runs[0].metrics) + "}, " + t.label +
                  " has {" + join_list(t.metrics) + "}");

  std::ostringstream csv, table;
  csv << "run,group,metric,mean,std,n\n";
  table << std::fixed << std::setprecision(4);
  table << std::left << std::setw(16) << "run" << std::setw(10) << "group" << std::right;
  for (const auto& m : runs[0].metrics) table << std::setw(22) << m;
  table << std::setw(6) << "n" << "\n";
  for (const auto& t : runs)
    for (const auto& g : t.groups) {
      table << std::left << std::setw(16) << t.label << std::setw(10) << g << std::right;
      std::size_t n = 0;
      for (const auto& m : t.metrics) {
        const auto& v = t.values.at(g).at(m);
        const RunStats s = summarize(v);
        n = s.n;
        csv << t.label << ',' << g << ',' << m << ',' << format_double(s.mean) << ',' << format_double(s.stddev) << ','
            << s.n << "\n";
        std::ostringstream cell;
        cell << std::fixed << std::setprecision(4) << s.mean << " +- " << s.stddev;
        table << std::setw(22) << cell.str();
      }
      table << std::setw(6) << n << "\n";
    }
  c.out.text("report.csv", csv.str());

  if (runs.size() > 1) {
    std::ostringstream tt;
    tt << "group,metric,run_a,run_b,t,df,p\n";
    table << "\nWelch two-sided t-tests\n";
    table << std::left << std::setw(10) << "group" << std::setw(12) << "metric" << std::setw(16) << "run_a"
          << std::setw(16) << "run_b" << std::right << std::setw(12) << "t" << std::setw(10) << "df" << std::setw(12)
          << "p" << "\n";
    for (const auto& g : runs[0].groups)
      for (const auto& m : runs[0].metrics)
        for (std::size_t i = 0; i < runs.size(); ++i)
          for (std::size_t j = i + 1; j < runs.size(); ++j) {
            if (!runs[i].values.count(g) || !runs[j].values.count(g)) continue;
            std::string ts = "undefined", df = "undefined", p = "undefined";
            try {
              const auto res = welch_t_test(runs[i].values.at(g).at(m), runs[j].values.at(g).at(m));
              ts = format_double(res.t);
              df = format_double(res.df);
              p = format_double(res.p);
            } catch (const Error&) {
            }
            tt << g << ',' << m << ',' << runs[i].label << ',' << runs[j].label << ',' << ts << ',' << df << ',' << p
               << "\n";
            table << std::left << std::setw(10) << g << std::setw(12) << m << std::setw(16) << runs[i].label
                  << std::setw(16) << runs[j].label << std::right << std::setw(12) << ts << std::setw(10) << df
                  << std::setw(12) << p << "\n";
          }
    c.out.text("ttests.csv", tt.str());
  }
  c.out.text("report.txt", table.str());
  c.log << table.str();
}

void cmd_export(Context& c, Resolved& r) {
  const ModelState state = checkpoint_load(r.path("checkpoint"));
  std::vector<Dataset> ds;
  for (const auto& p : r.paths("data")) ds.push_back(load_dataset(p));
  std::vector<std::string> split_names;
  for (const auto& s : split(r.str("splits", "train,val,test"), ',')) split_names.emplace_back(trim(s));
  r.finish();

  std::ostringstream os;
  std::size_t rows = 0;
  for (const auto& d : ds)
    for (const auto& name : split_names) {
      const auto& samples = d.split(parse_split(name));
      if (samples.empty()) continue;
      const Tensor e = embed(state, features_matrix(samples));
      const std::size_t w = e.cols();
      for (std::size_t i = 0; i < samples.size(); ++i) {
        os << "sample\t" << samples[i].task_id << '\t' << samples[i].global_concept_id;
        for (std::size_t j = 0; j < w; ++j) os << '\t' << format_double(e.data()[i * w + j]);
        os << "\n";
        ++rows;
      }
    }
  const std::size_t E = state.kb.width;
  for (std::size_t t = 0; t < state.kb.size(); ++t) {
    os << "prior\t" << state.kb.task_ids[t] << "\t-";
    for (std::size_t j = 0; j < E; ++j) os << '\t' << format_double(state.kb.rows.data()[t * E + j]);
    os << "\n";
  }
  c.out.text("embeddings.tsv", os.str());
  c.log << "exported " << rows << " sample rows and " << state.kb.size() << " prior rows\n";
}

struct NullBuffer : std::streambuf {
  int overflow(int c) override { return c; }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"RATNet experiments on synthetic multi-domain data", "ratnet"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen", "generate the synthetic benchmark"},
      {"pretrain", "cyclic teacher-student pretraining"},
      {"finetune", "fine-tune a checkpoint on a new task"},
      {"probe", "linear probing, optionally over reduced training fractions"},
      {"fewshot", "k-shot linear probing over repeated runs"},
      {"zeroshot", "zero-shot transfer through the category map"},
      {"increment", "add a task to a pretrained teacher-student pair"},
      {"federate", "federated pretraining across sites"},
      {"report", "compare run directories"},
      {"export-embeddings", "write fused embeddings and prior rows"},
  };
  for (const auto& [name, help] : commands) {
    auto* sc = app.add_subcommand(name, help);
    sc->add_option("--config", config_path, "key-value config file");
    sc->add_option("--out", out_dir, "output directory")->required();
    sc->add_option("--seed", seed, "override the master seed");
    sc->add_flag("--quiet", quiet, "suppress progress output");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  NullBuffer null_buf;
  std::ostream null_stream(&null_buf);
  try {
    KvFile file;
    fs::path base = fs::current_path();
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw ConfigError("config file not found: " + config_path);
      file = KvFile::load(config_path);
      base = fs::absolute(config_path).parent_path();
    } else {
      file.source = "<defaults>";
    }
    if (command != "federate" && !file.sections.empty())
      throw ConfigError(file.source + ":" + std::to_string(file.sections.front().line) + ": unexpected section [" +
                        file.sections.front().kind + "]");
    fs::create_directories(out_dir);
    Context ctx{command, file, base, seed, Outputs(out_dir), quiet ? null_stream : out};
    Resolved r(file.root_table(), base, seed);
    std::vector<std::pair<std::string, std::string>> extra;
    if (command == "gen") cmd_gen(ctx, r);
    else if (command == "pretrain") cmd_pretrain(ctx, r);
    else if (command == "finetune") cmd_finetune(ctx, r);
    else if (command == "probe") cmd_probe(ctx, r);
    else if (command == "fewshot") cmd_fewshot(ctx, r);
    else if (command == "zeroshot") cmd_zeroshot(ctx, r);
    else if (command == "increment") cmd_increment(ctx, r);
    else if (command == "federate") cmd_federate(ctx, r, extra);
    else if (command == "report") cmd_report(ctx, r);
    else cmd_export(ctx, r);
    auto echo = r.echo();
    echo.insert(echo.end(), extra.begin(), extra.end());
    ctx.out.manifest(command, echo);
    return 0;
  } catch (const ConfigError& e) {
    err << "ratnet " << command << ": config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "ratnet " << command << ": error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ratnet
