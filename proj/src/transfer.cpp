#include "ratnet/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "ratnet/kvtext.hpp"

namespace ratnet {

// ---- category map ---------------------------------------------------------------

void CategoryMap::validate(const ModelState& state) const {
  if (entries.empty()) throw Error("zero-shot target unmappable: the category map is empty");
  for (const auto& [cat, outs] : entries) {
    if (outs.empty()) throw Error("zero-shot target unmappable: category " + std::to_string(cat) + " has no mapped head");
    for (const auto& o : outs) {
      const auto idx = state.kb.index_of(o.task_id);
      if (!idx)
        throw Error("invalid category map entry " + std::to_string(cat) + " -> " + o.task_id + ":" +
                    std::to_string(o.label) + ": task not registered");
      if (o.label >= state.heads[*idx].classes())
        throw Error("invalid category map entry " + std::to_string(cat) + " -> " + o.task_id + ":" +
                    std::to_string(o.label) + ": label out of range (head has " +
                    std::to_string(state.heads[*idx].classes()) + " classes)");
    }
  }
}

std::vector<int> CategoryMap::category_ids() const {
  std::vector<int> out;
  for (const auto& kv : entries) out.push_back(kv.first);
  return out;
}

CategoryMap CategoryMap::parse(std::string_view text, const std::string& source) {
  const KvFile f = KvFile::parse(text, source);
  f.root_table().finish();
  CategoryMap m;
  for (const auto& sec : f.sections) {
    const std::string where = source + ":" + std::to_string(sec.line);
    if (sec.kind != "category") throw ConfigError(where + ": unexpected section [" + sec.kind + "]");
    int id = 0;
    try {
      id = static_cast<int>(parse_int(sec.name));
    } catch (const Error&) {
      throw ConfigError(where + ": category id must be an integer, got '" + sec.name + "'");
    }
    if (m.entries.count(id)) throw ConfigError(where + ": duplicate category " + sec.name);
    KvTable t = f.section_table(sec);
    auto& outs = m.entries[id];
    for (const auto& v : t.take_all("map")) {
      const auto colon = v.rfind(':');
      if (colon == std::string::npos || colon == 0)
        throw ConfigError(where + ": invalid map entry '" + v + "', expected TASK:LABEL");
      HeadOutput o;
      o.task_id = std::string(trim(std::string_view(v).substr(0, colon)));
      try {
        const long long l = parse_int(std::string_view(v).substr(colon + 1));
        if (l < 0) throw Error("negative");
        o.label = static_cast<std::size_t>(l);
      } catch (const Error&) {
        throw ConfigError(where + ": invalid map entry '" + v + "', label must be a nonnegative integer");
      }
      outs.push_back(std::move(o));
    }
    t.finish();
  }
  return m;
}

CategoryMap CategoryMap::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read category map " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

std::string CategoryMap::to_text() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& [cat, outs] : entries) {
    if (!first) os << "\n";
    first = false;
    os << "[category " << cat << "]\n";
    for (const auto& o : outs) os << "map = " << o.task_id << ":" << o.label << "\n";
  }
  return os.str();
}

void CategoryMap::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot write category map " + path.string());
  os << to_text();
}

CategoryMap alignment_by_concept(std::span<const Dataset> pretraining, const Dataset& target) {
  CategoryMap m;
  for (int c : target.concept_subset) {
    auto& outs = m.entries[c];
    for (const auto& d : pretraining)
      if (auto l = d.local_label_of(c)) outs.push_back({d.task_id, *l});
    if (outs.empty())
      throw Error("zero-shot target unmappable: concept " + std::to_string(c) + " is not seen by any pretraining task");
  }
  return m;
}

// ---- prediction -------------------------------------------------------------------

std::span<const double> ZeroShotPrediction::row(std::size_t i) const {
  const std::size_t k = category_ids.size();
  return std::span<const double>(probs).subspan(i * k, k);
}

ZeroShotPrediction aggregate_heads(std::size_t samples, std::span<const double> omegas,
                                   const std::vector<HeadProbs>& heads, const CategoryMap& map, bool renormalize) {
  const std::size_t T = heads.size();
  if (omegas.size() != samples * T) throw ShapeError("aggregate_heads: omegas must be samples x heads");
  for (const auto& h : heads)
    if (h.probs.size() != samples * h.classes) throw ShapeError("aggregate_heads: head " + h.task_id + " output size");
  if (map.entries.empty()) throw Error("zero-shot target unmappable: the category map is empty");

  // Entries in canonical (head index, label) order so that the result does not
  // depend on the order in which the map lists them.
  struct Ref {
    std::size_t head, label;
    bool operator<(const Ref& o) const { return head != o.head ? head < o.head : label < o.label; }
  };
  std::vector<std::vector<Ref>> refs;
  for (const auto& [cat, outs] : map.entries) {
    if (outs.empty()) throw Error("zero-shot target unmappable: category " + std::to_string(cat) + " has no mapped head");
    std::vector<Ref> r;
    for (const auto& o : outs) {
      std::size_t h = 0;
      while (h < T && heads[h].task_id != o.task_id) ++h;
      if (h == T || o.label >= heads[h].classes)
        throw Error("invalid category map entry " + std::to_string(cat) + " -> " + o.task_id + ":" +
                    std::to_string(o.label));
      r.push_back({h, o.label});
    }
    std::sort(r.begin(), r.end());
    refs.push_back(std::move(r));
  }

  ZeroShotPrediction p;
  p.category_ids = map.category_ids();
  for (const auto& h : heads) p.task_ids.push_back(h.task_id);
  p.samples = samples;
  const std::size_t K = refs.size();
  p.probs.assign(samples * K, 0.0);
  p.omegas.assign(omegas.begin(), omegas.end());
  p.contributions.assign(samples * T, 0.0);

  for (std::size_t i = 0; i < samples; ++i) {
    double* row = p.probs.data() + i * K;
    double* contrib = p.contributions.data() + i * T;
    for (std::size_t c = 0; c < K; ++c) {
      double s = 0.0;
      for (const auto& r : refs[c]) {
        const double v = omegas[i * T + r.head] * heads[r.head].probs[i * heads[r.head].classes + r.label];
        s += v;
        contrib[r.head] += v;
      }
      row[c] = s;
    }
    double total = 0.0;
    for (std::size_t c = 0; c < K; ++c) total += row[c];
    if (!(total > 0.0) || !std::isfinite(total))
      throw Error("zero-shot scores vanish for sample " + std::to_string(i));
    // A sum already equal to 1 up to rounding is left untouched.
    const bool normalise = renormalize && std::abs(total - 1.0) > 4.0 * std::numeric_limits<double>::epsilon();
    if (normalise)
      for (std::size_t c = 0; c < K; ++c) row[c] /= total;
    const double denom = renormalize ? total : 1.0;
    for (std::size_t t = 0; t < T; ++t) contrib[t] /= denom;
  }
  return p;
}

ZeroShotPrediction zero_shot_predict(const ModelState& state, const Tensor& features, const CategoryMap& map,
                                     const ZeroShotOptions& options) {
  map.validate(state);
  NoGradGuard guard;
  const double tau = options.tau.value_or(state.config().tau);
  const Tensor v_e = encode(state, features);
  const Tensor k_p = posterior_knowledge(v_e, state.posterior_template, state.generator);
  const RelevanceWeights w = relevance_weights(k_p, state.kb, tau);
  const Tensor fused = fuse(k_p, aggregate_prior(w, state.kb), state.fusion);
  const std::size_t n = features.rows(), T = state.kb.size();

  std::vector<double> omegas(w.omegas.data().begin(), w.omegas.data().end());
  if (options.force_task) {
    const std::size_t j = state.kb.require_index(*options.force_task);
    std::fill(omegas.begin(), omegas.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) omegas[i * T + j] = 1.0;
  }
  std::vector<HeadProbs> heads;
  for (const auto& h : state.heads) {
    HeadProbs hp{h.task_id, h.classes(), {}};
    const Tensor p = softmax_with_temperature(h.map(fused), 1.0);
    hp.probs.assign(p.data().begin(), p.data().end());
    heads.push_back(std::move(hp));
  }
  return aggregate_heads(n, omegas, heads, map, options.renormalize);
}

// ---- evaluation -----------------------------------------------------------------

namespace {

const std::vector<Sample>& eval_samples(const Dataset& d) {
  if (!d.test.empty()) return d.test;
  if (!d.val.empty()) return d.val;
  return d.train;
}

MultiScored scored(const ZeroShotPrediction& p, std::span<const Sample> samples, const std::string& task_id) {
  MultiScored ms;
  ms.classes = p.category_ids.size();
  ms.probs = p.probs;
  for (const Sample& s : samples) {
    const auto it = std::lower_bound(p.category_ids.begin(), p.category_ids.end(), s.global_concept_id);
    if (it == p.category_ids.end() || *it != s.global_concept_id)
      throw Error("unmapped concept " + std::to_string(s.global_concept_id) + " in dataset " + task_id);
    ms.labels.push_back(static_cast<int>(it - p.category_ids.begin()));
  }
  return ms;
}

}  // namespace

ZeroShotEvaluation zero_shot_evaluate(const ModelState& state, const Dataset& dataset, const CategoryMap& map,
                                      const ZeroShotOptions& options, const BootstrapOptions& bootstrap) {
  const auto& samples = eval_samples(dataset);
  if (samples.empty()) throw Error("zero_shot_evaluate: dataset " + dataset.task_id + " has no samples");
  for (const Sample& s : samples)
    if (!map.entries.count(s.global_concept_id))
      throw Error("unmapped concept " + std::to_string(s.global_concept_id) + " in dataset " + dataset.task_id);
  ZeroShotEvaluation ev;
  ev.prediction = zero_shot_predict(state, features_matrix(samples), map, options);
  const MultiScored ms = scored(ev.prediction, samples, dataset.task_id);
  if (ms.distinct_labels() < 2) throw Error("AUC undefined for single class");
  ev.metrics = evaluate_multiclass(ms, ev.prediction.category_ids, bootstrap);
  for (std::size_t c = 0; c < ms.classes; ++c) {
    const ScoredLabels sl = ms.one_vs_rest(c);
    ev.roc.push_back(sl.distinct_labels() == 2 ? roc_curve(sl) : std::vector<RocPoint>{});
  }
  return ev;
}

std::string ZeroShotEvaluation::roc_csv() const {
  std::ostringstream os;
  os << "category,fpr,tpr,threshold\n";
  for (std::size_t c = 0; c < roc.size(); ++c)
    for (const auto& pt : roc[c])
      os << prediction.category_ids[c] << ',' << format_double(pt.fpr) << ',' << format_double(pt.tpr) << ','
         << format_double(pt.threshold) << "\n";
  return os.str();
}

std::vector<HeadBaseline> single_head_baselines(const ModelState& state, const Dataset& dataset,
                                                const CategoryMap& map, const ZeroShotOptions& options) {
  std::vector<HeadBaseline> out;
  for (const auto& id : state.task_ids()) {
    bool mapped = false;
    for (const auto& kv : map.entries)
      for (const auto& e : kv.second) mapped = mapped || e.task_id == id;
    if (!mapped) {
      // A head without mapped outputs cannot rank any category.
      out.push_back({id, 0.5});
      continue;
    }
    ZeroShotOptions o = options;
    o.force_task = id;
    out.push_back({id, zero_shot_evaluate(state, dataset, map, o).metrics.macro.auc});
  }
  return out;
}

Dataset shuffled_labels(const Dataset& dataset, std::uint64_t seed) {
  Dataset d = dataset;
  for (auto* split : {&d.train, &d.val, &d.test}) {
    std::vector<std::size_t> perm(split->size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng rng(derive_seed(seed, split == &d.train ? 1 : split == &d.val ? 2 : 3));
    rng.shuffle(perm);
    std::vector<Sample> orig = *split;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      (*split)[i].global_concept_id = orig[perm[i]].global_concept_id;
      (*split)[i].local_label = orig[perm[i]].local_label;
    }
  }
  return d;
}

}  // namespace ratnet
