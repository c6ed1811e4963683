#include "ratnet/federated.hpp"

#include <exception>
#include <sstream>
#include <thread>

namespace ratnet {

Site::Site(SiteConfig config, std::vector<Dataset> datasets) : config_(std::move(config)), datasets_(std::move(datasets)) {
  if (config_.site_id.empty()) throw ConfigError("site id must not be empty");
  if (config_.tasks.empty()) throw ConfigError("site " + config_.site_id + " owns no task");
  for (const auto& t : config_.tasks) {
    std::size_t found = 0;
    for (const auto& d : datasets_) found += d.task_id == t;
    if (found != 1)
      throw ConfigError("site " + config_.site_id + ": expected exactly one dataset for task " + t + ", got " +
                        std::to_string(found));
  }
  if (datasets_.size() != config_.tasks.size())
    throw ConfigError("site " + config_.site_id + ": datasets given for tasks it does not own");
}

bool Site::owns(const std::string& task_id) const {
  for (const auto& t : config_.tasks)
    if (t == task_id) return true;
  return false;
}

std::size_t Site::sample_count() const {
  std::size_t n = 0;
  for (const auto& d : datasets_) n += d.train.size();
  return n;
}

const Dataset& Site::dataset(const std::string& task_id, const std::string& requester) const {
  if (requester != config_.site_id)
    throw Error("site " + config_.site_id + ": data access denied for requester " + requester);
  for (const auto& d : datasets_)
    if (d.task_id == task_id) return d;
  throw Error("site " + config_.site_id + " does not own task " + task_id);
}

ModelState Site::train_round(const ModelState& global, std::size_t round, std::size_t local_iterations) const {
  std::vector<Dataset> ordered;
  for (const auto& t : config_.tasks) ordered.push_back(dataset(t, config_.site_id));
  TrainConfig cfg = config_.train;
  cfg.epochs = local_iterations;
  cfg.iteration_offset = config_.train.iteration_offset + round * local_iterations;
  return cyclic_pretrain(global, ordered, cfg).student;
}

double Site::validation_accuracy(const ModelState& state) const {
  double sum = 0.0;
  for (const auto& d : datasets_) {
    const auto& ev = d.val.empty() ? d.test : d.val;
    sum += ev.empty() ? 0.0 : task_accuracy(state, d.task_id, ev);
  }
  return sum / static_cast<double>(datasets_.size());
}

const char* weighting_name(Weighting w) { return w == Weighting::by_samples ? "by_samples" : "uniform"; }

Weighting parse_weighting(std::string_view s) {
  if (s == "by_samples") return Weighting::by_samples;
  if (s == "uniform") return Weighting::uniform;
  throw ConfigError("unknown weighting '" + std::string(s) + "' (expected by_samples or uniform)");
}

void FederationConfig::validate() const {
  if (rounds < 1) throw ConfigError("federation: rounds must be >= 1");
  if (local_iterations < 1) throw ConfigError("federation: local_iterations must be >= 1");
}

std::string round_records_csv(std::span<const RoundRecord> records) {
  std::ostringstream os;
  os << "round,site,pre_checksum,post_checksum,global_checksum,local_val_accuracy,global_val_accuracy\n";
  for (const auto& r : records)
    for (const auto& s : r.sites)
      os << r.round << ',' << s.site_id << ',' << s.pre_checksum << ',' << s.post_checksum << ',' << r.global_checksum
         << ',' << format_double(s.local_val_accuracy) << ',' << format_double(s.global_val_accuracy) << "\n";
  return os.str();
}

std::vector<double> aggregation_weights(std::span<const std::size_t> sample_counts, Weighting mode) {
  if (sample_counts.empty()) throw Error("aggregation_weights: no sites");
  std::vector<double> w(sample_counts.size());
  if (mode == Weighting::uniform) {
    for (double& x : w) x = 1.0 / static_cast<double>(w.size());
    return w;
  }
  double total = 0.0;
  for (std::size_t n : sample_counts) total += static_cast<double>(n);
  if (!(total > 0.0)) throw Error("aggregation_weights: sites hold no samples");
  for (std::size_t s = 0; s < w.size(); ++s) w[s] = static_cast<double>(sample_counts[s]) / total;
  return w;
}

std::vector<double> weighted_mean(std::span<const std::vector<double>> values, std::span<const double> weights) {
  if (values.empty() || values.size() != weights.size()) throw Error("weighted_mean: one weight per value set");
  std::vector<double> acc(values[0].size());
  for (std::size_t s = 0; s < values.size(); ++s) {
    if (values[s].size() != acc.size()) throw ShapeError("weighted_mean: length mismatch at site " + std::to_string(s));
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] = s == 0 ? weights[0] * values[0][j] : acc[j] + weights[s] * values[s][j];
  }
  return acc;
}

namespace {

void check_compatible(const ModelState& global, const ModelState& local, const std::string& site) {
  auto g = const_cast<ModelState&>(global).named_parameters();
  auto l = const_cast<ModelState&>(local).named_parameters();
  if (g.size() != l.size()) throw ShapeError("federation: shape drift at site " + site + ": parameter count differs");
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i].name != l[i].name || g[i].tensor->shape() != l[i].tensor->shape())
      throw ShapeError("federation: shape drift at site " + site + " in " + g[i].name);
}

// Weighted mean over the selected sites with weights renormalised to them.
void average_into(std::span<double> dst, const std::vector<std::span<const double>>& src,
                  std::span<const double> weights, const std::vector<std::size_t>& sel) {
  if (sel.size() == 1) {
    std::copy(src[sel[0]].begin(), src[sel[0]].end(), dst.begin());
    return;
  }
  double total = 0.0;
  for (std::size_t s : sel) total += weights[s];
  std::vector<std::vector<double>> vals;
  std::vector<double> w;
  for (std::size_t s : sel) {
    vals.emplace_back(src[s].begin(), src[s].end());
    w.push_back(sel.size() == weights.size() ? weights[s] : weights[s] / total);
  }
  const auto m = weighted_mean(vals, w);
  std::copy(m.begin(), m.end(), dst.begin());
}

}  // namespace

ModelState aggregate(const ModelState& global, std::span<const ModelState> site_states, std::span<const Site> sites,
                     std::span<const double> weights) {
  if (site_states.size() != sites.size() || weights.size() != sites.size())
    throw Error("aggregate: one state and one weight per site");
  for (std::size_t s = 0; s < sites.size(); ++s) check_compatible(global, site_states[s], sites[s].id());

  std::vector<std::size_t> all(sites.size());
  for (std::size_t s = 0; s < all.size(); ++s) all[s] = s;
  auto owners_of = [&](const std::string& task) {
    std::vector<std::size_t> o;
    for (std::size_t s = 0; s < sites.size(); ++s)
      if (sites[s].owns(task)) o.push_back(s);
    return o;
  };

  ModelState out = global;
  auto dst = out.named_parameters();
  std::vector<std::vector<NamedParam>> src;
  for (const auto& st : site_states) src.push_back(const_cast<ModelState&>(st).named_parameters());

  for (std::size_t p = 0; p < dst.size(); ++p) {
    std::vector<std::span<const double>> vals;
    for (const auto& sp : src) vals.push_back(sp[p].tensor->data());
    auto target = dst[p].tensor->mutable_data();
    if (dst[p].owner_task) {
      const auto owners = owners_of(*dst[p].owner_task);
      if (!owners.empty()) average_into(target, vals, weights, owners);
    } else if (dst[p].name == "knowledge_base") {
      const std::size_t e = out.kb.width;
      for (std::size_t t = 0; t < out.kb.size(); ++t) {
        auto owners = owners_of(out.kb.task_ids[t]);
        if (owners.empty()) owners = all;
        std::vector<std::span<const double>> rows;
        for (const auto& v : vals) rows.push_back(v.subspan(t * e, e));
        average_into(target.subspan(t * e, e), rows, weights, owners);
      }
    } else {
      average_into(target, vals, weights, all);
    }
  }
  return out;
}

RoundResult fed_round(const ModelState& global, std::span<const Site> sites, const FederationConfig& config,
                      std::size_t round) {
  config.validate();
  if (sites.empty()) throw Error("federation: no sites");
  for (const auto& site : sites)
    for (const auto& t : site.tasks())
      if (!global.kb.index_of(t)) throw Error("federation: site " + site.id() + " owns unregistered task " + t);

  std::vector<ModelState> local(sites.size());
  std::vector<std::exception_ptr> failure(sites.size());
  auto work = [&](std::size_t s) {
    try {
      local[s] = sites[s].train_round(global, round, config.local_iterations);
    } catch (...) {
      failure[s] = std::current_exception();
    }
  };
  if (config.parallel && sites.size() > 1) {
    std::vector<std::thread> threads;
    for (std::size_t s = 0; s < sites.size(); ++s) threads.emplace_back(work, s);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t s = 0; s < sites.size(); ++s) work(s);
  }
  for (std::size_t s = 0; s < sites.size(); ++s) {
    if (!failure[s]) continue;
    try {
      std::rethrow_exception(failure[s]);
    } catch (const std::exception& e) {
      throw Error("federation round " + std::to_string(round) + " aborted: site " + sites[s].id() + " failed: " +
                  e.what());
    }
  }

  std::vector<std::size_t> counts;
  for (const auto& site : sites) counts.push_back(site.sample_count());
  const auto weights = aggregation_weights(counts, config.weighting);
  RoundResult r{aggregate(global, local, sites, weights), {}};
  r.record.round = round;
  r.record.global_checksum = r.global.checksum();
  for (std::size_t s = 0; s < sites.size(); ++s)
    r.record.sites.push_back({sites[s].id(), local[s].checksum(), r.record.global_checksum,
                              sites[s].validation_accuracy(local[s]), sites[s].validation_accuracy(r.global)});
  return r;
}

FederationResult run_federation(const ModelState& initial, std::span<const Site> sites, const FederationConfig& config) {
  config.validate();
  FederationResult out{initial, {}};
  out.global.set_role(Role::student);
  for (std::size_t round = 0; round < config.rounds; ++round) {
    RoundResult r = fed_round(out.global, sites, config, round);
    out.global = std::move(r.global);
    out.records.push_back(std::move(r.record));
  }
  return out;
}

}  // namespace ratnet
