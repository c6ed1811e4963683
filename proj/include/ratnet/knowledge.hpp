#pragma once

// Relevance-knowledge acquisition and transfer.
//
// A knowledge base holds one learnable prior row per registered task. For an
// encoded sample, a generator produces posterior knowledge k_p from the
// sample and a shared learnable template; cosine similarities between k_p and
// every prior row are turned into relevance weights by a temperature softmax,
// and the weighted sum of rows is the transferred prior k_a. A fusion MLP then
// merges k_p and k_a.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ratnet/tensor.hpp"

namespace ratnet {

// Two-layer perceptron: out = W2 * tanh(W1 * x + b1) + b2.
struct Mlp2 {
  Tensor w1, b1, w2, b2;

  static Mlp2 init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);
  static Mlp2 zeros(std::size_t in, std::size_t hidden, std::size_t out);

  std::size_t in_width() const { return w1.rows(); }
  std::size_t hidden_width() const { return w1.cols(); }
  std::size_t out_width() const { return w2.cols(); }

  Tensor operator()(const Tensor& x) const;
};

struct KnowledgeBase {
  Tensor rows;  // T x E
  std::vector<std::string> task_ids;
  std::size_t width = 0;

  // Seeded Gaussian rows followed by one Gram-Schmidt pass, unit norm.
  static KnowledgeBase initialize(const std::vector<std::string>& task_ids, std::size_t width, std::uint64_t seed);
  // The Gaussian draw `initialize` starts from, before orthogonalisation.
  static Tensor raw_gaussian_rows(std::size_t count, std::size_t width, std::uint64_t seed);

  std::size_t size() const { return task_ids.size(); }
  std::optional<std::size_t> index_of(const std::string& task_id) const;
  std::size_t require_index(const std::string& task_id) const;
};

struct PosteriorTemplate {
  Tensor t_pk;  // length E
};

struct PosteriorGenerator {
  Mlp2 mlp;  // dim(v_e) + E -> H -> E
};

struct FusionBlock {
  Mlp2 mlp;  // 2E -> H -> E
};

struct RelevanceWeights {
  Tensor sims;    // B x T cosine similarities
  Tensor omegas;  // B x T, rows sum to 1
  double tau = 0.1;
};

Tensor posterior_knowledge(const Tensor& v_e, const PosteriorTemplate& tmpl, const PosteriorGenerator& gen);

RelevanceWeights relevance_weights(const Tensor& k_p, const KnowledgeBase& kb, double tau);

Tensor aggregate_prior(const Tensor& omegas, const KnowledgeBase& kb);
inline Tensor aggregate_prior(const RelevanceWeights& w, const KnowledgeBase& kb) {
  return aggregate_prior(w.omegas, kb);
}

// Batch mean of (1 - cos(k_a, b_i))^2.
Tensor task_similarity_loss(const Tensor& k_a, const Tensor& b_i);

// ||G - I||_F^2 with G the Gram matrix of row-normalised KB rows.
Tensor orthogonality_loss(const KnowledgeBase& kb);

Tensor fuse(const Tensor& k_p, const Tensor& k_a, const FusionBlock& fusion);

// New row: a seeded Gaussian vector orthogonalised against every existing row,
// scaled to the mean existing row norm (unit norm for an empty base).
KnowledgeBase append_task(const KnowledgeBase& kb, const std::string& task_id, std::uint64_t seed);

// Mean |G_ij| over i != j for the normalised Gram matrix (0 when T < 2).
double mean_abs_offdiag(const Tensor& rows);

}  // namespace ratnet
