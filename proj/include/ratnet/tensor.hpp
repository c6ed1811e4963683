#pragma once

// Dense float64 tensors with a dynamic reverse-mode tape.
//
// A Tensor is a shared handle to a graph node: copying the handle aliases the
// node. Use clone() for an independent leaf. Ops produce a recorded node when
// any input requires a gradient and gradient recording is enabled on the
// calling thread (see NoGradGuard). Rank-1 tensors of length n are treated as
// 1 x n matrices by the row-oriented ops.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ratnet/common.hpp"

namespace ratnet {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& s);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor();  // scalar 0, no gradient

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  // Matrix view: rank 0 -> 1x1, rank 1 -> 1xn, rank 2 -> rows x cols.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Writable buffer; only valid on leaves.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Same values, fresh leaf, no history.
  Tensor detach() const;
  // Independent leaf carrying the same requires_grad flag.
  Tensor clone() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct TensorAccess;
};

// Disables recording for the lifetime of the guard on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- op set ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// Same-shape addition, or b broadcast as a row (length == a.cols()) over a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor shift(const Tensor& a, double c);
// Column-wise concatenation of two row-aligned matrices.
Tensor concat(const Tensor& a, const Tensor& b);
// Tiles a single row n times into an n x cols matrix.
Tensor repeat_rows(const Tensor& row, std::size_t n);
// Row i as a 1 x cols matrix.
Tensor select_row(const Tensor& a, std::size_t i);
Tensor select_col(const Tensor& a, std::size_t j);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
// Row-wise unit-norm scaling; a zero row raises DegenerateVectorError.
Tensor l2_normalize(const Tensor& a);
// All-pairs cosine: rows of a against rows of b -> a.rows() x b.rows().
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// Paired cosine of row i of a with row i of b -> column of length rows.
Tensor rowwise_cosine(const Tensor& a, const Tensor& b);
// Row-wise softmax of a / tau.
Tensor softmax_with_temperature(const Tensor& a, double tau);
// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
Tensor row_sum(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Mean of squared entries.
Tensor mean_squared_terms(const Tensor& a);
Tensor frobenius_norm_squared(const Tensor& a);

// Populates grads on every reachable leaf that requires a gradient.
// A graph can be differentiated once; the interior is released afterwards.
void backward(const Tensor& loss);

// ---- optimisation & auditing ------------------------------------------------

struct SgdConfig {
  double learning_rate = 0.003;
  std::size_t batch_size = 64;

  void validate() const;
};

// p <- p - lr * g for each parameter, then clears grads.
void sgd_step(std::span<Tensor> params, const SgdConfig& config);

// Max over all parameter entries of |analytic - central| / max(1, |analytic|).
// `loss` rebuilds the scalar from the current parameter values on each call.
double grad_check(const std::function<Tensor()>& loss, std::span<Tensor> params,
                  double epsilon = 1e-5);

}  // namespace ratnet
