#include "ratnet/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ratnet {

// ---- registry ---------------------------------------------------------------

ConceptRegistry::ConceptRegistry(std::size_t dim, std::vector<int> ids, std::vector<std::vector<double>> prototypes)
    : dim_(dim), ids_(std::move(ids)), prototypes_(std::move(prototypes)) {
  if (ids_.size() != prototypes_.size()) throw Error("ConceptRegistry: ids/prototypes length mismatch");
  std::set<int> seen;
  for (int id : ids_)
    if (!seen.insert(id).second) throw Error("ConceptRegistry: duplicate concept id " + std::to_string(id));
  for (const auto& p : prototypes_)
    if (p.size() != dim_) throw ShapeError("ConceptRegistry: prototype width differs from dim");
}

ConceptRegistry ConceptRegistry::generate(std::size_t count, std::size_t dim, double scale, double margin,
                                          std::uint64_t seed) {
  if (dim == 0) throw ConfigError("ConceptRegistry: dim must be >= 1");
  Rng rng(seed);
  std::vector<int> ids;
  std::vector<std::vector<double>> protos;
  constexpr int kMaxAttempts = 10000;
  for (std::size_t c = 0; c < count; ++c) {
    int attempt = 0;
    while (true) {
      if (++attempt > kMaxAttempts)
        throw ConfigError("ConceptRegistry: cannot place " + std::to_string(count) + " prototypes with margin " +
                          format_double(margin));
      std::vector<double> p(dim);
      for (double& v : p) v = scale * rng.normal();
      bool ok = true;
      for (const auto& q : protos) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < dim; ++j) d2 += (p[j] - q[j]) * (p[j] - q[j]);
        if (std::sqrt(d2) < margin || d2 == 0.0) {
          ok = false;
          break;
        }
      }
      if (ok) {
        protos.push_back(std::move(p));
        break;
      }
    }
    ids.push_back(static_cast<int>(c));
  }
  return ConceptRegistry(dim, std::move(ids), std::move(protos));
}

bool ConceptRegistry::contains(int id) const { return std::find(ids_.begin(), ids_.end(), id) != ids_.end(); }

const std::vector<double>& ConceptRegistry::prototype(int id) const {
  auto it = std::find(ids_.begin(), ids_.end(), id);
  if (it == ids_.end()) throw Error("unknown concept id " + std::to_string(id));
  return prototypes_[static_cast<std::size_t>(it - ids_.begin())];
}

double ConceptRegistry::min_pairwise_distance() const {
  double best = INFINITY;
  for (std::size_t a = 0; a < prototypes_.size(); ++a)
    for (std::size_t b = a + 1; b < prototypes_.size(); ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < dim_; ++j)
        d2 += (prototypes_[a][j] - prototypes_[b][j]) * (prototypes_[a][j] - prototypes_[b][j]);
      best = std::min(best, std::sqrt(d2));
    }
  return best;
}

std::string ConceptRegistry::checksum() const {
  Fnv64 h;
  h.update_u64(dim_);
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    h.update_u64(static_cast<std::uint64_t>(ids_[i]));
    h.update_doubles(prototypes_[i]);
  }
  return h.hex();
}

// ---- domain transform -------------------------------------------------------

DomainTransform DomainTransform::identity(std::size_t dim) {
  DomainTransform t;
  t.dim = dim;
  t.rotation.assign(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) t.rotation[i * dim + i] = 1.0;
  t.scaling.assign(dim, 1.0);
  t.bias.assign(dim, 0.0);
  return t;
}

DomainTransform DomainTransform::random(std::size_t dim, double rotation_strength, double scale_spread,
                                        double bias_scale, double noise, std::uint64_t seed) {
  if (scale_spread < 0.0 || scale_spread >= 1.0) throw ConfigError("DomainTransform: scale_spread must be in [0,1)");
  Rng rng(seed);
  DomainTransform t = identity(dim);
  // Columns of I + s*G, orthonormalised by modified Gram-Schmidt (two passes).
  std::vector<std::vector<double>> cols(dim, std::vector<double>(dim));
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) cols[j][i] = (i == j ? 1.0 : 0.0) + rotation_strength * rng.normal();
  for (std::size_t j = 0; j < dim; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += cols[j][i] * cols[k][i];
        for (std::size_t i = 0; i < dim; ++i) cols[j][i] -= dot * cols[k][i];
      }
    }
    double n = 0.0;
    for (double v : cols[j]) n += v * v;
    n = std::sqrt(n);
    if (!(n > 1e-12)) throw Error("DomainTransform: rank-deficient rotation draw");
    for (double& v : cols[j]) v /= n;
  }
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) t.rotation[i * dim + j] = cols[j][i];
  for (double& s : t.scaling) s = 1.0 - scale_spread + 2.0 * scale_spread * rng.uniform();
  for (double& b : t.bias) b = bias_scale * rng.normal();
  t.noise = noise;
  return t;
}

std::vector<double> DomainTransform::apply(std::span<const double> latent) const {
  if (latent.size() != dim) throw ShapeError("DomainTransform::apply: latent width mismatch");
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    double s = bias[i];
    for (std::size_t j = 0; j < dim; ++j) s += rotation[i * dim + j] * scaling[j] * latent[j];
    out[i] = s;
  }
  return out;
}

std::vector<double> DomainTransform::invert(std::span<const double> features) const {
  if (features.size() != dim) throw ShapeError("DomainTransform::invert: feature width mismatch");
  std::vector<double> out(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < dim; ++i) s += rotation[i * dim + j] * (features[i] - bias[i]);
    out[j] = s / scaling[j];
  }
  return out;
}

void DomainTransform::validate() const {
  if (rotation.size() != dim * dim || scaling.size() != dim || bias.size() != dim)
    throw ShapeError("DomainTransform: component sizes do not match dim");
  for (std::size_t a = 0; a < dim; ++a)
    for (std::size_t b = 0; b < dim; ++b) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += rotation[i * dim + a] * rotation[i * dim + b];
      if (std::abs(dot - (a == b ? 1.0 : 0.0)) > 1e-9) throw Error("DomainTransform: rotation is not orthogonal");
    }
  for (double s : scaling)
    if (!(s > 0.0)) throw Error("DomainTransform: scaling entries must be positive");
  if (!(noise >= 0.0)) throw Error("DomainTransform: noise must be >= 0");
}

std::vector<double> geometric_priors(std::size_t classes, double rho) {
  if (classes == 0) throw ConfigError("geometric_priors: need at least one class");
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("geometric_priors: rho must be in (0, 1]");
  std::vector<double> p(classes);
  double w = 1.0, total = 0.0;
  for (auto& v : p) {
    v = w;
    total += w;
    w *= rho;
  }
  for (auto& v : p) v /= total;
  return p;
}

void SyntheticTaskSpec::validate(const ConceptRegistry& registry) const {
  if (concept_subset.empty()) throw Error("task " + task_id + ": concept subset is empty");
  std::set<int> seen;
  for (int c : concept_subset) {
    if (!registry.contains(c)) throw Error("task " + task_id + ": unknown concept id " + std::to_string(c));
    if (!seen.insert(c).second) throw Error("task " + task_id + ": duplicate concept id " + std::to_string(c));
  }
  if (class_priors.size() != concept_subset.size())
    throw Error("task " + task_id + ": priors length differs from class count");
  double total = 0.0;
  for (double p : class_priors) {
    if (!(p >= 0.0)) throw Error("task " + task_id + ": negative prior");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("task " + task_id + ": priors do not sum to 1");
  if (transform.dim != registry.dim()) throw ShapeError("task " + task_id + ": transform width differs from registry");
  transform.validate();
}

// ---- samples ----------------------------------------------------------------

const char* split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error("unknown split '" + std::string(s) + "'");
}

const std::vector<Sample>& Dataset::split(Split s) const {
  switch (s) {
    case Split::train:
      return train;
    case Split::val:
      return val;
    case Split::test:
      return test;
  }
  return train;
}

std::optional<std::size_t> Dataset::local_label_of(int concept_id) const {
  auto it = std::find(concept_subset.begin(), concept_subset.end(), concept_id);
  if (it == concept_subset.end()) return std::nullopt;
  return static_cast<std::size_t>(it - concept_subset.begin());
}

std::string Dataset::split_checksum(Split s) const {
  Fnv64 h;
  h.update(task_id);
  for (const Sample& x : split(s)) {
    h.update_u64(static_cast<std::uint64_t>(x.global_concept_id));
    h.update_u64(x.local_label);
    h.update_doubles(x.features);
  }
  return h.hex();
}

std::string Dataset::checksum() const {
  Fnv64 h;
  for (Split s : {Split::train, Split::val, Split::test}) h.update(split_checksum(s));
  return h.hex();
}

Dataset generate_task(const ConceptRegistry& registry, const SyntheticTaskSpec& spec, std::uint64_t seed) {
  spec.validate(registry);
  const std::size_t classes = spec.concept_subset.size();
  Dataset ds;
  ds.task_id = spec.task_id;
  ds.dim = registry.dim();
  ds.concept_subset = spec.concept_subset;

  const std::pair<Split, std::size_t> plan[] = {
      {Split::train, spec.counts.train}, {Split::val, spec.counts.val}, {Split::test, spec.counts.test}};
  for (const auto& [split, count] : plan) {
    if (count == 0) continue;
    if (count < classes)
      throw Error("task " + spec.task_id + ": " + split_name(split) + " count " + std::to_string(count) +
                  " is below the class count " + std::to_string(classes));
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(split) + 1));
    std::vector<std::size_t> labels;
    labels.reserve(count);
    if (spec.cover_all_classes)
      for (std::size_t c = 0; c < classes; ++c) labels.push_back(c);
    while (labels.size() < count) {
      const double u = rng.uniform();
      double acc = 0.0;
      std::size_t c = 0;
      for (; c + 1 < classes; ++c) {
        acc += spec.class_priors[c];
        if (u < acc) break;
      }
      labels.push_back(c);
    }
    rng.shuffle(labels);

    auto& out = split == Split::train ? ds.train : split == Split::val ? ds.val : ds.test;
    out.reserve(count);
    for (std::size_t label : labels) {
      const int concept_id = spec.concept_subset[label];
      Sample s;
      s.task_id = spec.task_id;
      s.split = split;
      s.global_concept_id = concept_id;
      s.local_label = label;
      s.features = spec.transform.apply(registry.prototype(concept_id));
      if (spec.transform.noise > 0.0)
        for (double& v : s.features) v += spec.transform.noise * rng.normal();
      out.push_back(std::move(s));
    }
  }
  return ds;
}

// ---- benchmark ----------------------------------------------------------------

void BenchmarkConfig::validate() const {
  if (dim == 0) throw ConfigError("benchmark: dim must be >= 1");
  if (pretrain_tasks < 2) throw ConfigError("benchmark: need at least 2 pretraining tasks");
  if (classes_per_task < 2) throw ConfigError("benchmark: classes_per_task must be >= 2");
  if (zeroshot_classes < 2) throw ConfigError("benchmark: zeroshot_classes must be >= 2");
  if (fewshot_classes < 2) throw ConfigError("benchmark: fewshot_classes must be >= 2");
  if (longtail_classes < 2) throw ConfigError("benchmark: longtail_classes must be >= 2");
  if (!(noise >= 0.0)) throw ConfigError("benchmark: noise must be >= 0");
}

namespace {

SyntheticTaskSpec task_spec(const BenchmarkConfig& cfg, std::string id, std::vector<int> concepts,
                            std::vector<double> priors, SplitCounts counts, std::uint64_t transform_seed) {
  SyntheticTaskSpec spec;
  spec.task_id = std::move(id);
  spec.concept_subset = std::move(concepts);
  spec.class_priors = std::move(priors);
  spec.counts = counts;
  spec.transform = DomainTransform::random(cfg.dim, cfg.rotation_strength, cfg.scale_spread, cfg.bias_scale,
                                           cfg.noise, transform_seed);
  return spec;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

Benchmark make_benchmark(const BenchmarkConfig& cfg) {
  cfg.validate();
  Benchmark b;
  b.config = cfg;
  const std::size_t span = cfg.pretrain_tasks + cfg.classes_per_task - 1;
  const std::size_t registry_size = std::max(span + cfg.fewshot_classes, cfg.longtail_classes);
  b.registry = ConceptRegistry::generate(registry_size, cfg.dim, cfg.prototype_scale, cfg.separation_margin,
                                         derive_seed(cfg.seed, 0));

  // Pretraining task t covers a sliding window of concepts, so neighbouring
  // tasks share classes.
  std::map<int, std::size_t> coverage;
  std::uint64_t stream = 1;
  for (std::size_t t = 0; t < cfg.pretrain_tasks; ++t) {
    std::vector<int> concepts;
    for (std::size_t c = 0; c < cfg.classes_per_task; ++c) {
      concepts.push_back(static_cast<int>(t + c));
      ++coverage[static_cast<int>(t + c)];
    }
    auto spec = task_spec(cfg, "T" + std::to_string(t + 1), concepts,
                          geometric_priors(concepts.size(), 1.0), cfg.pretrain_counts, derive_seed(cfg.seed, 1, t));
    const std::uint64_t seed = derive_seed(cfg.seed, 2, stream++);
    b.task_seeds.push_back(seed);
    b.pretraining.push_back(generate_task(b.registry, spec, seed));
  }

  std::vector<int> eligible;
  for (const auto& [concept_id, n] : coverage)
    if (n >= 2) eligible.push_back(concept_id);
  if (eligible.empty()) throw Error("zero-shot target unmappable");
  if (eligible.size() < cfg.zeroshot_classes)
    throw ConfigError("benchmark: only " + std::to_string(eligible.size()) +
                      " concepts are shared by >= 2 pretraining tasks");
  // Evenly spaced over the shared concepts, so that no single pretraining
  // task sees all of them when the window allows it.
  std::vector<int> zs;
  for (std::size_t i = 0; i < cfg.zeroshot_classes; ++i) {
    const std::size_t pos = cfg.zeroshot_classes == 1
                                ? (eligible.size() - 1) / 2
                                : (i * (eligible.size() - 1) + (cfg.zeroshot_classes - 1) / 2) / (cfg.zeroshot_classes - 1);
    zs.push_back(eligible[pos]);
  }
  {
    auto spec = task_spec(cfg, "ZS", zs, geometric_priors(zs.size(), 1.0), cfg.zeroshot_counts,
                          derive_seed(cfg.seed, 1, 1000));
    const std::uint64_t seed = derive_seed(cfg.seed, 2, stream++);
    b.task_seeds.push_back(seed);
    b.zero_shot = generate_task(b.registry, spec, seed);
  }
  {
    std::vector<int> rare;
    for (std::size_t c = 0; c < cfg.fewshot_classes; ++c) rare.push_back(static_cast<int>(span + c));
    auto spec = task_spec(cfg, "FS", rare, geometric_priors(rare.size(), 1.0), cfg.fewshot_counts,
                          derive_seed(cfg.seed, 1, 1001));
    const std::uint64_t seed = derive_seed(cfg.seed, 2, stream++);
    b.task_seeds.push_back(seed);
    b.few_shot = generate_task(b.registry, spec, seed);
  }
  {
    std::vector<int> lt;
    for (std::size_t c = 0; c < cfg.longtail_classes; ++c) lt.push_back(static_cast<int>(c));
    auto spec = task_spec(cfg, "LT", lt, geometric_priors(lt.size(), cfg.longtail_rho), cfg.longtail_counts,
                          derive_seed(cfg.seed, 1, 1002));
    const std::uint64_t seed = derive_seed(cfg.seed, 2, stream++);
    b.task_seeds.push_back(seed);
    b.long_tail = generate_task(b.registry, spec, seed);
  }
  return b;
}

std::string Benchmark::manifest() const {
  std::ostringstream os;
  const auto& c = config;
  os << "format = ratnet-benchmark/1\n";
  os << "master_seed = " << c.seed << "\n";
  os << "dim = " << c.dim << "\n";
  os << "pretrain_tasks = " << c.pretrain_tasks << "\n";
  os << "classes_per_task = " << c.classes_per_task << "\n";
  os << "noise = " << format_double(c.noise) << "\n";
  os << "prototype_scale = " << format_double(c.prototype_scale) << "\n";
  os << "separation_margin = " << format_double(c.separation_margin) << "\n";
  os << "rotation_strength = " << format_double(c.rotation_strength) << "\n";
  os << "scale_spread = " << format_double(c.scale_spread) << "\n";
  os << "bias_scale = " << format_double(c.bias_scale) << "\n";
  os << "longtail_rho = " << format_double(c.longtail_rho) << "\n";
  os << "registry.concepts = " << registry.size() << "\n";
  os << "registry.checksum = " << registry.checksum() << "\n";
  std::vector<std::pair<std::string, const Dataset*>> all;
  for (const auto& d : pretraining) all.emplace_back("pretrain", &d);
  all.emplace_back("zeroshot", &zero_shot);
  all.emplace_back("fewshot", &few_shot);
  all.emplace_back("longtail", &long_tail);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& [role, d] = all[i];
    const std::string k = "task." + d->task_id + ".";
    os << k << "role = " << role << "\n";
    os << k << "concepts = " << join_ints(d->concept_subset) << "\n";
    os << k << "seed = " << task_seeds.at(i) << "\n";
    os << k << "counts = " << d->train.size() << "," << d->val.size() << "," << d->test.size() << "\n";
    for (Split s : {Split::train, Split::val, Split::test})
      os << k << "checksum." << split_name(s) << " = " << d->split_checksum(s) << "\n";
  }
  return os.str();
}

// ---- subsampling -------------------------------------------------------------

std::vector<std::vector<Sample>> subsample_fractions(std::span<const Sample> samples, std::size_t num_classes,
                                                     std::span<const double> fractions, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].local_label >= num_classes)
      throw Error("subsample_fractions: label " + std::to_string(samples[i].local_label) + " out of range");
    by_class[samples[i].local_label].push_back(i);
  }
  Rng rng(seed);
  for (auto& idx : by_class) rng.shuffle(idx);

  std::vector<std::vector<Sample>> out;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw Error("subsample_fractions: fraction " + format_double(f) + " not in (0, 1]");
    std::vector<char> keep(samples.size(), 0);
    for (std::size_t c = 0; c < num_classes; ++c) {
      const auto take = static_cast<std::size_t>(std::llround(f * static_cast<double>(by_class[c].size())));
      if (take == 0)
        throw Error("subsample_fractions: fraction " + format_double(f) + " leaves class " + std::to_string(c) +
                    " empty");
      for (std::size_t j = 0; j < take; ++j) keep[by_class[c][j]] = 1;
    }
    std::vector<Sample> subset;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (keep[i]) subset.push_back(samples[i]);
    out.push_back(std::move(subset));
  }
  return out;
}

Tensor features_matrix(std::span<const Sample> samples) {
  if (samples.empty()) throw Error("features_matrix: no samples");
  const std::size_t d = samples.front().features.size();
  std::vector<double> v;
  v.reserve(samples.size() * d);
  for (const Sample& s : samples) {
    if (s.features.size() != d) throw ShapeError("features_matrix: ragged feature widths");
    v.insert(v.end(), s.features.begin(), s.features.end());
  }
  return Tensor::matrix(samples.size(), d, std::move(v));
}

std::vector<std::size_t> labels_of(std::span<const Sample> samples) {
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(s.local_label);
  return out;
}

// ---- files ------------------------------------------------------------------

void write_dataset_csv(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "task_id,split,global_concept_id,local_label";
  for (std::size_t j = 0; j < dataset.dim; ++j) os << ",f" << j;
  os << "\n";
  for (Split s : {Split::train, Split::val, Split::test})
    for (const Sample& x : dataset.split(s)) {
      os << x.task_id << ',' << split_name(s) << ',' << x.global_concept_id << ',' << x.local_label;
      for (double v : x.features) os << ',' << format_double(v);
      os << "\n";
    }
  if (!os) throw Error("write failed for " + path.string());
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read dataset " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw Error(path.string() + ": empty file");
  auto header = split(trim(line), ',');
  if (header.size() < 5 || header[0] != "task_id" || header[1] != "split" || header[2] != "global_concept_id" ||
      header[3] != "local_label")
    throw Error(path.string() + ": unexpected header");
  Dataset ds;
  ds.dim = header.size() - 4;
  std::map<std::size_t, int> label_to_concept;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cols = split(trim(line), ',');
    if (cols.size() != header.size())
      throw Error(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                  " columns");
    Sample s;
    s.task_id = cols[0];
    s.split = parse_split(cols[1]);
    s.global_concept_id = static_cast<int>(parse_int(cols[2]));
    const long long label = parse_int(cols[3]);
    if (label < 0) throw Error(path.string() + ":" + std::to_string(lineno) + ": negative label");
    s.local_label = static_cast<std::size_t>(label);
    s.features.reserve(ds.dim);
    for (std::size_t j = 4; j < cols.size(); ++j) s.features.push_back(parse_double(cols[j]));
    if (ds.task_id.empty()) ds.task_id = s.task_id;
    if (s.task_id != ds.task_id) throw Error(path.string() + ": mixed task ids");
    auto [it, fresh] = label_to_concept.emplace(s.local_label, s.global_concept_id);
    if (!fresh && it->second != s.global_concept_id)
      throw Error(path.string() + ": local label " + std::to_string(s.local_label) + " maps to two concepts");
    auto& dst = s.split == Split::train ? ds.train : s.split == Split::val ? ds.val : ds.test;
    dst.push_back(std::move(s));
  }
  for (std::size_t c = 0; c < label_to_concept.size(); ++c) {
    auto it = label_to_concept.find(c);
    if (it == label_to_concept.end()) throw Error(path.string() + ": local labels are not contiguous");
    ds.concept_subset.push_back(it->second);
  }
  return ds;
}

}  // namespace ratnet
