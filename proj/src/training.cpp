#include "ratnet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace ratnet {

void LossWeights::validate() const {
  for (double w : {ce, ts, orth, cons})
    if (!(w >= 0.0)) throw ConfigError("loss weights must be nonnegative");
  if (ce == 0.0 && ts == 0.0 && orth == 0.0 && cons == 0.0) throw ConfigError("at least one loss weight must be > 0");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  sgd.validate();
  weights.validate();
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ConfigError("ema_momentum must lie in [0, 1]");
  if (!(augment_sigma >= 0.0)) throw ConfigError("augment_sigma must be >= 0");
}

LossParts composite_loss(const TaskForward& tf, std::span<const std::size_t> labels, const ModelState& state,
                         const TaskForward* teacher, const LossWeights& w) {
  LossParts parts;
  std::optional<Tensor> total;
  auto accumulate = [&total](const Tensor& term, double weight) {
    Tensor t = scale(term, weight);
    total = total ? add(*total, t) : t;
  };
  if (w.ce > 0.0) {
    Tensor ce = cross_entropy(tf.logits, labels);
    parts.ce = ce.item();
    accumulate(ce, w.ce);
  } else {
    for (std::size_t l : labels)
      if (l >= tf.logits.cols()) throw Error("label " + std::to_string(l) + " out of range");
  }
  if (w.ts > 0.0) {
    Tensor ts = task_similarity_loss(tf.k_a, select_row(state.kb.rows, tf.task_index));
    parts.ts = ts.item();
    accumulate(ts, w.ts);
  }
  if (w.orth > 0.0) {
    Tensor orth = orthogonality_loss(state.kb);
    parts.orth = orth.item();
    accumulate(orth, w.orth);
  }
  if (w.cons > 0.0) {
    if (!teacher) throw Error("composite_loss: consistency weight set but no teacher forward given");
    Tensor cons = consistency_loss(tf.projected, teacher->projected);
    parts.cons = cons.item();
    accumulate(cons, w.cons);
  }
  parts.total = total ? *total : Tensor::scalar(0.0);
  return parts;
}

std::string RunLog::to_csv() const {
  std::ostringstream os;
  os << "iteration,task_id,loss,ce,ts,orth,cons,val_accuracy,gram_offdiag\n";
  for (const auto& r : records)
    os << r.iteration << ',' << r.task_id << ',' << format_double(r.loss) << ',' << format_double(r.ce) << ','
       << format_double(r.ts) << ',' << format_double(r.orth) << ',' << format_double(r.cons) << ','
       << format_double(r.val_accuracy) << ',' << format_double(r.gram_offdiag) << "\n";
  return os.str();
}

std::string RunLog::timing_csv() const {
  std::ostringstream os;
  os << "iteration,task_id,wall_ms\n";
  for (const auto& r : records) os << r.iteration << ',' << r.task_id << ',' << format_double(r.wall_ms) << "\n";
  return os.str();
}

namespace {

std::uint64_t task_stream(const std::string& id) {
  Fnv64 h;
  h.update(id);
  return h.value();
}

// Parameters that receive a gradient from the active loss terms.
std::vector<Tensor> trainable(ModelState& s, std::size_t task_index, const LossWeights& w) {
  const bool via_fused = w.ce > 0.0 || w.cons > 0.0;
  const bool via_kp = via_fused || w.ts > 0.0;
  std::vector<Tensor> out;
  if (via_kp) {
    for (auto& l : s.encoder) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    out.push_back(s.posterior_template.t_pk);
    for (Tensor* t : {&s.generator.mlp.w1, &s.generator.mlp.b1, &s.generator.mlp.w2, &s.generator.mlp.b2})
      out.push_back(*t);
  }
  if (via_fused)
    for (Tensor* t : {&s.fusion.mlp.w1, &s.fusion.mlp.b1, &s.fusion.mlp.w2, &s.fusion.mlp.b2}) out.push_back(*t);
  out.push_back(s.kb.rows);
  if (w.cons > 0.0) out.push_back(s.projector.weight);
  if (w.ce > 0.0) {
    out.push_back(s.heads[task_index].map.weight);
    out.push_back(s.heads[task_index].map.bias);
  }
  return out;
}

const std::vector<Sample>& eval_split(const Dataset& d) { return d.val.empty() ? d.test : d.val; }

}  // namespace

PretrainResult cyclic_pretrain(ModelState student, std::span<const Dataset> tasks, const TrainConfig& config,
                               std::optional<ModelState> teacher) {
  config.validate();
  if (tasks.empty()) throw Error("cyclic_pretrain: no tasks given");
  for (const Dataset& d : tasks) {
    const std::size_t idx = student.task_index(d.task_id);
    if (d.train.empty()) throw Error("cyclic_pretrain: empty task dataset " + d.task_id);
    if (student.heads[idx].classes() != d.num_classes())
      throw ShapeError("cyclic_pretrain: head of " + d.task_id + " has " + std::to_string(student.heads[idx].classes()) +
                       " classes, dataset has " + std::to_string(d.num_classes()));
  }
  student.set_role(Role::student);
  ModelState tch = teacher ? std::move(*teacher) : student;
  tch.set_role(Role::teacher);

  PretrainResult result{student, tch, {}};
  ModelState& s = result.student;
  ModelState& t = result.teacher;
  const auto bs = config.sgd.batch_size;

  for (std::size_t it = 0; it < config.epochs; ++it) {
    const std::size_t global_it = config.iteration_offset + it;
    for (const Dataset& d : tasks) {
      const auto start = std::chrono::steady_clock::now();
      const std::size_t task_index = s.task_index(d.task_id);
      LossWeights w = config.weights;
      if (global_it < config.consistency_warmup) w.cons = 0.0;

      std::vector<std::size_t> order(d.train.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(derive_seed(config.seed, global_it, task_stream(d.task_id)));
      rng.shuffle(order);

      RunRecord rec;
      rec.iteration = global_it;
      rec.task_id = d.task_id;
      std::size_t batches = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
        std::vector<Sample> batch;
        for (std::size_t i = b0; i < std::min(order.size(), b0 + bs); ++i) batch.push_back(d.train[order[i]]);
        Tensor x = features_matrix(batch);
        if (config.augment_sigma > 0.0) {
          Rng jitter(derive_seed(config.seed ^ 0x6a6974746572ULL, global_it, task_stream(d.task_id) + batches));
          std::vector<double> v(x.data().begin(), x.data().end());
          for (double& f : v) f += config.augment_sigma * jitter.normal();
          x = Tensor::matrix(x.rows(), x.cols(), std::move(v));
        }
        const auto labels = labels_of(batch);

        TaskForward tf = forward(s, x, d.task_id);
        std::optional<TaskForward> tt;
        if (w.cons > 0.0) {
          NoGradGuard guard;
          tt = forward(t, x, d.task_id);
        }
        LossParts parts = composite_loss(tf, labels, s, tt ? &*tt : nullptr, w);
        const double loss = parts.total.item();
        if (!std::isfinite(loss))
          throw Error("non-finite loss at iteration " + std::to_string(global_it) + ", task " + d.task_id +
                      ", batch " + std::to_string(batches));
        backward(parts.total);
        auto params = trainable(s, task_index, w);
        sgd_step(params, config.sgd);
        for (auto& p : s.named_parameters()) p.tensor->zero_grad();
        if (config.ema_frequency == EmaFrequency::per_step) ema_update(t, s, config.ema_momentum);

        rec.loss += loss;
        rec.ce += parts.ce;
        rec.ts += parts.ts;
        rec.orth += parts.orth;
        rec.cons += parts.cons;
        ++batches;
      }
      if (config.ema_frequency == EmaFrequency::per_task_epoch) ema_update(t, s, config.ema_momentum);

      const double nb = static_cast<double>(batches);
      rec.loss /= nb;
      rec.ce /= nb;
      rec.ts /= nb;
      rec.orth /= nb;
      rec.cons /= nb;
      const auto& ev = eval_split(d);
      rec.val_accuracy = ev.empty() ? 0.0 : task_accuracy(s, d.task_id, ev);
      rec.gram_offdiag = mean_abs_offdiag(s.kb.rows);
      rec.wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      result.log.records.push_back(std::move(rec));
    }
  }
  return result;
}

MultiScored task_scores(const ModelState& state, const std::string& task_id, std::span<const Sample> samples) {
  NoGradGuard guard;
  TaskForward tf = forward(state, features_matrix(samples), task_id);
  Tensor p = softmax_with_temperature(tf.logits, 1.0);
  MultiScored ms;
  ms.classes = tf.logits.cols();
  ms.probs.assign(p.data().begin(), p.data().end());
  for (const Sample& s : samples) ms.labels.push_back(static_cast<int>(s.local_label));
  return ms;
}

double task_accuracy(const ModelState& state, const std::string& task_id, std::span<const Sample> samples) {
  const MultiScored ms = task_scores(state, task_id, samples);
  const auto pred = ms.argmax();
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == ms.labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

FineTuneResult fine_tune(const ModelState& state, const Dataset& target, const std::string& new_task_id,
                         const TrainConfig& config) {
  for (const Dataset* split : {&target})
    if (split->train.empty()) throw Error("fine_tune: target has no training samples");
  std::vector<std::size_t> per_class(target.num_classes(), 0);
  for (const Sample& s : target.train) ++per_class.at(s.local_label);
  for (std::size_t c = 0; c < per_class.size(); ++c)
    if (per_class[c] == 0) throw Error("fine_tune: class " + std::to_string(c) + " has no training sample");

  ModelState s = state;
  s.set_role(Role::student);
  s.add_task(TaskInfo{new_task_id, target.num_classes()}, derive_seed(config.seed, task_stream(new_task_id)));
  Dataset renamed = target;
  renamed.task_id = new_task_id;
  FineTuneResult out;
  if (config.epochs > 0) {
    TrainConfig cfg = config;
    cfg.weights.cons = 0.0;
    out.state = cyclic_pretrain(std::move(s), std::span<const Dataset>(&renamed, 1), cfg).student;
  } else {
    out.state = std::move(s);
  }
  const auto& eval = renamed.test.empty() ? renamed.val : renamed.test;
  if (!eval.empty()) {
    out.metrics = evaluate_multiclass(task_scores(out.state, new_task_id, eval), renamed.concept_subset, {0});
    out.accuracy = out.metrics.accuracy;
  }
  return out;
}

// ---- linear probing ------------------------------------------------------------

MultiScored LinearClassifier::predict(const Tensor& embeddings, std::span<const std::size_t> labels) const {
  NoGradGuard guard;
  Tensor p = softmax_with_temperature(add(matmul(embeddings, weight), bias), 1.0);
  MultiScored ms;
  ms.classes = weight.cols();
  ms.probs.assign(p.data().begin(), p.data().end());
  for (std::size_t l : labels) ms.labels.push_back(static_cast<int>(l));
  return ms;
}

namespace {

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> idx) {
  const std::size_t c = m.cols();
  std::vector<double> v;
  v.reserve(idx.size() * c);
  for (std::size_t i : idx)
    v.insert(v.end(), m.data().begin() + static_cast<std::ptrdiff_t>(i * c),
             m.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
  return Tensor::matrix(idx.size(), c, std::move(v));
}

LinearClassifier train_probe(const Tensor& emb, std::span<const std::size_t> labels, std::size_t classes,
                             const ProbeConfig& cfg) {
  if (cfg.epochs > 0 && !(cfg.learning_rate > 0.0)) throw ConfigError("probe: learning_rate must be > 0");
  if (cfg.batch_size < 1) throw ConfigError("probe: batch_size must be >= 1");
  LinearClassifier clf{Tensor::zeros({emb.cols(), classes}, true), Tensor::zeros({classes}, true)};
  std::vector<Tensor> params{clf.weight, clf.bias};
  const SgdConfig sgd{cfg.learning_rate, cfg.batch_size};
  std::vector<std::size_t> order(labels.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, e));
    rng.shuffle(order);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b0 + cfg.batch_size)));
      std::vector<std::size_t> y;
      for (std::size_t i : idx) y.push_back(labels[i]);
      Tensor loss = cross_entropy(add(matmul(gather_rows(emb, idx), clf.weight), clf.bias), y);
      backward(loss);
      sgd_step(params, sgd);
    }
  }
  return clf;
}

ProbeResult probe_on_embeddings(const Tensor& train_emb, std::span<const std::size_t> train_labels,
                                const Tensor& test_emb, std::span<const std::size_t> test_labels,
                                const std::vector<int>& class_ids, const ProbeConfig& cfg) {
  ProbeResult r;
  r.classifier = train_probe(train_emb, train_labels, class_ids.size(), cfg);
  BootstrapOptions bo;
  bo.resamples = cfg.bootstrap_resamples;
  bo.seed = derive_seed(cfg.seed, 0xb007);
  r.metrics = evaluate_multiclass(r.classifier.predict(test_emb, test_labels), class_ids, bo);
  r.accuracy = r.metrics.accuracy;
  return r;
}

}  // namespace

ProbeResult linear_probe(const ModelState& state, std::span<const Sample> train, std::span<const Sample> test,
                         const std::vector<int>& class_ids, const ProbeConfig& config) {
  if (train.empty() || test.empty()) throw Error("linear_probe: empty train or test split");
  for (const Sample& s : train)
    if (s.local_label >= class_ids.size()) throw Error("linear_probe: label out of range");
  return probe_on_embeddings(embed(state, features_matrix(train)), labels_of(train),
                             embed(state, features_matrix(test)), labels_of(test), class_ids, config);
}

BoxSummary box_summary(std::span<const double> values) {
  if (values.empty()) throw Error("box_summary: no values");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  BoxSummary b;
  b.median = quantile_sorted(v, 0.5);
  b.q1 = quantile_sorted(v, 0.25);
  b.q3 = quantile_sorted(v, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  b.whisker_low = b.q1;
  b.whisker_high = b.q3;
  bool have_low = false;
  for (double x : v) {
    if (x < lo || x > hi) {
      b.outliers.push_back(x);
      continue;
    }
    if (!have_low) {
      b.whisker_low = x;
      have_low = true;
    }
    b.whisker_high = x;
  }
  return b;
}

FewShotResult few_shot_protocol(const ModelState& state, const Dataset& task, std::size_t k, std::size_t runs,
                                std::uint64_t master_seed, const ProbeConfig& probe) {
  if (k < 1) throw Error("few_shot_protocol: k must be >= 1");
  if (runs < 1) throw Error("few_shot_protocol: runs must be >= 1");
  if (task.test.empty()) throw Error("few_shot_protocol: task has no test split");
  const std::size_t classes = task.num_classes();
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < task.train.size(); ++i) by_class.at(task.train[i].local_label).push_back(i);
  for (std::size_t c = 0; c < classes; ++c)
    if (by_class[c].size() < k)
      throw Error("few_shot_protocol: insufficient samples, class " + std::to_string(c) + " has " +
                  std::to_string(by_class[c].size()) + " < k = " + std::to_string(k));

  const Tensor train_emb = embed(state, features_matrix(task.train));
  const Tensor test_emb = embed(state, features_matrix(task.test));
  const auto train_labels = labels_of(task.train);
  const auto test_labels = labels_of(task.test);

  FewShotResult out;
  out.k = k;
  for (std::size_t r = 0; r < runs; ++r) {
    Rng rng(derive_seed(master_seed, k, r));
    std::vector<std::size_t> chosen;
    for (auto idx : by_class) {
      rng.shuffle(idx);
      chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }
    std::sort(chosen.begin(), chosen.end());
    std::vector<std::size_t> y;
    for (std::size_t i : chosen) y.push_back(train_labels[i]);
    ProbeResult pr =
        probe_on_embeddings(gather_rows(train_emb, chosen), y, test_emb, test_labels, task.concept_subset, probe);
    out.aucs.push_back(pr.metrics.macro.auc);
  }
  out.summary = box_summary(out.aucs);
  return out;
}

std::vector<VariantComparison> compare_variants(const std::vector<std::pair<std::string, std::vector<double>>>& runs) {
  std::vector<VariantComparison> out;
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (std::size_t j = i + 1; j < runs.size(); ++j)
      out.push_back({runs[i].first, runs[j].first, welch_t_test(runs[i].second, runs[j].second)});
  return out;
}

ReducedDataResult reduced_data_protocol(const ModelState& state, const Dataset& dataset,
                                        std::span<const double> fractions, std::size_t repeats,
                                        std::uint64_t master_seed, const ProbeConfig& probe) {
  if (repeats < 1) throw Error("reduced_data_protocol: repeats must be >= 1");
  if (dataset.test.empty()) throw Error("reduced_data_protocol: dataset has no test split");
  const Tensor test_emb = embed(state, features_matrix(dataset.test));
  const auto test_labels = labels_of(dataset.test);

  std::vector<std::vector<ReducedRow>> by_fraction(fractions.size());
  for (std::size_t r = 0; r < repeats; ++r) {
    auto subsets = subsample_fractions(dataset.train, dataset.num_classes(), fractions, derive_seed(master_seed, r));
    for (std::size_t f = 0; f < fractions.size(); ++f) {
      ProbeConfig cfg = probe;
      cfg.seed = derive_seed(master_seed, r, 0x9e);
      ProbeResult pr = probe_on_embeddings(embed(state, features_matrix(subsets[f])), labels_of(subsets[f]),
                                           test_emb, test_labels, dataset.concept_subset, cfg);
      by_fraction[f].push_back({fractions[f], r, subsets[f].size(), pr.metrics.macro, pr.accuracy});
    }
  }
  ReducedDataResult out;
  for (std::size_t f = 0; f < fractions.size(); ++f) {
    std::vector<double> a, f1, ap, m, acc;
    for (const auto& row : by_fraction[f]) {
      out.rows.push_back(row);
      a.push_back(row.macro.auc);
      f1.push_back(row.macro.f1);
      ap.push_back(row.macro.ap);
      m.push_back(row.macro.mcc);
      acc.push_back(row.accuracy);
    }
    out.summary.push_back({fractions[f], summarize(a), summarize(f1), summarize(ap), summarize(m), summarize(acc)});
  }
  return out;
}

PretrainResult incremental_pretrain(const ModelState& student, const ModelState& teacher,
                                    std::span<const Dataset> old_tasks, const Dataset& new_task,
                                    const TrainConfig& config) {
  if (student.kb.index_of(new_task.task_id)) throw Error("duplicate id " + new_task.task_id);
  ModelState s = student;
  s.set_role(Role::student);
  s.add_task(TaskInfo{new_task.task_id, new_task.num_classes()}, derive_seed(config.seed, task_stream(new_task.task_id)));

  ModelState t = teacher;
  t.set_role(Role::student);
  t.add_task(TaskInfo{new_task.task_id, new_task.num_classes()}, derive_seed(config.seed, task_stream(new_task.task_id)));
  // The teacher starts the new task from the student's initialisation.
  {
    const std::size_t e = s.kb.width, last = s.kb.size() - 1;
    auto dst = t.kb.rows.mutable_data();
    auto src = s.kb.rows.data();
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(last * e), e, dst.begin() + static_cast<std::ptrdiff_t>(last * e));
    t.heads.back().map.weight = s.heads.back().map.weight.clone();
    t.heads.back().map.bias = s.heads.back().map.bias.clone();
  }
  t.set_role(Role::teacher);

  std::vector<Dataset> all(old_tasks.begin(), old_tasks.end());
  all.push_back(new_task);
  return cyclic_pretrain(std::move(s), all, config, std::move(t));
}

}  // namespace ratnet
