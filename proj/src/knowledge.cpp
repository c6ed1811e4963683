#include "ratnet/knowledge.hpp"

#include <algorithm>
#include <cmath>

namespace ratnet {

Mlp2 Mlp2::init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  auto draw = [&rng](std::size_t r, std::size_t c) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(r));
    std::vector<double> v(r * c);
    for (double& x : v) x = sd * rng.normal();
    return Tensor::matrix(r, c, std::move(v), true);
  };
  Mlp2 m;
  m.w1 = draw(in, hidden);
  m.b1 = Tensor::zeros({hidden}, true);
  m.w2 = draw(hidden, out);
  m.b2 = Tensor::zeros({out}, true);
  return m;
}

Mlp2 Mlp2::zeros(std::size_t in, std::size_t hidden, std::size_t out) {
  return Mlp2{Tensor::zeros({in, hidden}, true), Tensor::zeros({hidden}, true), Tensor::zeros({hidden, out}, true),
              Tensor::zeros({out}, true)};
}

Tensor Mlp2::operator()(const Tensor& x) const {
  if (x.cols() != in_width())
    throw ShapeError("mlp: input width " + std::to_string(x.cols()) + " != " + std::to_string(in_width()));
  return add(matmul(ratnet::tanh(add(matmul(x, w1), b1)), w2), b2);
}

// ---- knowledge base --------------------------------------------------------

namespace {

double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Removes the components of v along each (not necessarily unit) basis row,
// twice for numerical stability.
void orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& b : basis) {
      double dot = 0.0, bb = 0.0;
      for (std::size_t j = 0; j < v.size(); ++j) {
        dot += v[j] * b[j];
        bb += b[j] * b[j];
      }
      for (std::size_t j = 0; j < v.size(); ++j) v[j] -= dot / bb * b[j];
    }
}

}  // namespace

Tensor KnowledgeBase::raw_gaussian_rows(std::size_t count, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(count * width);
  for (double& x : v) x = rng.normal();
  return Tensor::matrix(count, width, std::move(v));
}

KnowledgeBase KnowledgeBase::initialize(const std::vector<std::string>& task_ids, std::size_t width,
                                        std::uint64_t seed) {
  if (width == 0) throw ConfigError("knowledge base width must be >= 1");
  if (task_ids.size() > width) throw Error("knowledge base at capacity");
  for (std::size_t i = 0; i < task_ids.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (task_ids[i] == task_ids[j]) throw Error("duplicate id " + task_ids[i]);
  const std::size_t t = task_ids.size();
  Tensor raw = raw_gaussian_rows(t, width, seed);
  std::vector<std::vector<double>> basis;
  std::vector<double> data;
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> v(raw.data().begin() + static_cast<std::ptrdiff_t>(i * width),
                          raw.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
    orthogonalize(v, basis);
    const double n = norm_of(v);
    if (!(n > 1e-8)) throw DegenerateVectorError("KnowledgeBase::initialize");
    for (double& x : v) x /= n;
    basis.push_back(v);
    data.insert(data.end(), v.begin(), v.end());
  }
  KnowledgeBase kb;
  kb.rows = Tensor::matrix(t, width, std::move(data), true);
  kb.task_ids = task_ids;
  kb.width = width;
  return kb;
}

std::optional<std::size_t> KnowledgeBase::index_of(const std::string& task_id) const {
  auto it = std::find(task_ids.begin(), task_ids.end(), task_id);
  if (it == task_ids.end()) return std::nullopt;
  return static_cast<std::size_t>(it - task_ids.begin());
}

std::size_t KnowledgeBase::require_index(const std::string& task_id) const {
  if (auto i = index_of(task_id)) return *i;
  std::string known;
  for (const auto& id : task_ids) known += (known.empty() ? "" : ", ") + id;
  throw Error("unregistered task '" + task_id + "' (known tasks: " + known + ")");
}

// ---- RAT operations --------------------------------------------------------

Tensor posterior_knowledge(const Tensor& v_e, const PosteriorTemplate& tmpl, const PosteriorGenerator& gen) {
  const std::size_t e = tmpl.t_pk.size();
  if (v_e.cols() + e != gen.mlp.in_width())
    throw ShapeError("posterior_knowledge: [v_e, t_pk] width " + std::to_string(v_e.cols() + e) +
                     " != generator input " + std::to_string(gen.mlp.in_width()));
  if (gen.mlp.out_width() != e) throw ShapeError("posterior_knowledge: generator output width != template width");
  return gen.mlp(concat(v_e, repeat_rows(tmpl.t_pk, v_e.rows())));
}

RelevanceWeights relevance_weights(const Tensor& k_p, const KnowledgeBase& kb, double tau) {
  if (!(tau > 0.0)) throw Error("relevance_weights: tau must be > 0, got " + format_double(tau));
  if (kb.size() == 0) throw Error("relevance_weights: knowledge base is empty");
  if (k_p.cols() != kb.rows.cols()) throw ShapeError("relevance_weights: k_p width != knowledge base width");
  RelevanceWeights w;
  w.tau = tau;
  w.sims = cosine_similarity(k_p, kb.rows);
  w.omegas = softmax_with_temperature(w.sims, tau);
  return w;
}

Tensor aggregate_prior(const Tensor& omegas, const KnowledgeBase& kb) {
  if (omegas.cols() != kb.size())
    throw ShapeError("aggregate_prior: " + std::to_string(omegas.cols()) + " weights for " +
                     std::to_string(kb.size()) + " knowledge rows");
  return matmul(omegas, kb.rows);
}

Tensor task_similarity_loss(const Tensor& k_a, const Tensor& b_i) {
  if (b_i.rows() != 1) throw ShapeError("task_similarity_loss: b_i must be a single row");
  if (b_i.cols() != k_a.cols()) throw ShapeError("task_similarity_loss: width mismatch");
  const Tensor target = k_a.rows() == 1 ? b_i : repeat_rows(b_i, k_a.rows());
  return mean_squared_terms(shift(scale(rowwise_cosine(k_a, target), -1.0), 1.0));
}

Tensor orthogonality_loss(const KnowledgeBase& kb) {
  const std::size_t t = kb.size();
  if (t == 0) return Tensor::scalar(0.0);
  std::vector<double> eye(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) eye[i * t + i] = 1.0;
  return frobenius_norm_squared(sub(cosine_similarity(kb.rows, kb.rows), Tensor::matrix(t, t, std::move(eye))));
}

Tensor fuse(const Tensor& k_p, const Tensor& k_a, const FusionBlock& fusion) {
  if (k_p.rows() != k_a.rows() || k_p.cols() != k_a.cols())
    throw ShapeError("fuse: k_p " + shape_string(k_p.shape()) + " vs k_a " + shape_string(k_a.shape()));
  if (fusion.mlp.in_width() != 2 * k_p.cols()) throw ShapeError("fuse: fusion input width != 2E");
  return fusion.mlp(concat(k_p, k_a));
}

KnowledgeBase append_task(const KnowledgeBase& kb, const std::string& task_id, std::uint64_t seed) {
  if (kb.index_of(task_id)) throw Error("duplicate id " + task_id);
  const std::size_t t = kb.size(), e = kb.width;
  if (t >= e) throw Error("knowledge base at capacity");

  std::vector<std::vector<double>> basis;
  double mean_norm = 0.0;
  auto old = kb.rows.data();
  for (std::size_t i = 0; i < t; ++i) {
    basis.emplace_back(old.begin() + static_cast<std::ptrdiff_t>(i * e),
                       old.begin() + static_cast<std::ptrdiff_t>((i + 1) * e));
    mean_norm += norm_of(basis.back());
  }
  mean_norm = t ? mean_norm / static_cast<double>(t) : 1.0;

  Rng rng(seed);
  std::vector<double> v(e);
  for (int attempt = 0;; ++attempt) {
    if (attempt > 100) throw DegenerateVectorError("append_task");
    for (double& x : v) x = rng.normal();
    orthogonalize(v, basis);
    if (norm_of(v) > 1e-6) break;
  }
  const double n = norm_of(v);
  for (double& x : v) x = x / n * mean_norm;

  std::vector<double> data(old.begin(), old.end());
  data.insert(data.end(), v.begin(), v.end());
  KnowledgeBase out;
  out.rows = Tensor::matrix(t + 1, e, std::move(data), kb.rows.requires_grad());
  out.task_ids = kb.task_ids;
  out.task_ids.push_back(task_id);
  out.width = e;
  return out;
}

double mean_abs_offdiag(const Tensor& rows) {
  const std::size_t t = rows.rows();
  if (t < 2) return 0.0;
  NoGradGuard guard;
  Tensor g = cosine_similarity(rows, rows);
  double s = 0.0;
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j)
      if (i != j) s += std::abs(g.at(i, j));
  return s / static_cast<double>(t * (t - 1));
}

}  // namespace ratnet
