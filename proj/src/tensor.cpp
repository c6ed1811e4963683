#include "ratnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace ratnet {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool leaf = true;
  bool released = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents.
  std::function<void(const std::vector<double>&)> backprop;
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
  static const NodePtr& ptr(const Tensor& t) { return t.node_; }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::size_t rows_of(const Shape& s) {
  if (s.size() <= 1) return 1;
  return s[0];
}

std::size_t cols_of(const Shape& s) {
  if (s.empty()) return 1;
  if (s.size() == 1) return s[0];
  return s[1];
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                   shape_string(b.shape()));
}

// Buffer to accumulate into, or nullptr when the node takes no gradient.
std::vector<double>* grad_buffer(Node& n) {
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad.assign(n.value.size(), 0.0);
    n.has_grad = true;
  }
  return &n.grad;
}

using BackFn = std::function<void(const std::vector<double>&)>;

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs, BackFn fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->leaf = false;
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->parents.push_back(TensorAccess::ptr(*t));
    n->backprop = std::move(fn);
  }
  return TensorAccess::wrap(std::move(n));
}

Node& node_of(const Tensor& t) { return *TensorAccess::ptr(t); }

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(std::string(op) + ": non-finite value produced");
  }
}

Tensor normalize_rows(const Tensor& a, const char* where) {
  const std::size_t r = a.rows(), c = a.cols();
  auto x = a.data();
  std::vector<double> norms(r), out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j] * x[i * c + j];
    const double n = std::sqrt(s);
    if (!(n > 0.0)) throw DegenerateVectorError(where);
    norms[i] = n;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / n;
  }
  NodePtr pa = TensorAccess::ptr(a);
  auto y = out;
  return make_result("l2_normalize", a.shape(), std::move(out), {&a},
                     [pa, y = std::move(y), norms, r, c](const std::vector<double>& g) {
                       auto* ga = grad_buffer(*pa);
                       if (!ga) return;
                       for (std::size_t i = 0; i < r; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
                         for (std::size_t j = 0; j < c; ++j)
                           (*ga)[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
                       }
                     });
}

}  // namespace

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->value = {0.0}; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = product(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (product(shape) != values.size())
    throw ShapeError("Tensor: shape " + shape_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return from({rows, cols}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }
std::size_t Tensor::rows() const { return rows_of(node_->shape); }
std::size_t Tensor::cols() const { return cols_of(node_->shape); }
std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!node_->leaf) throw Error("mutable_data: tensor is not a leaf");
  return node_->value;
}

double Tensor::item() const {
  if (node_->value.size() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape()) + " is not scalar");
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (r >= rows() || c >= cols()) throw ShapeError("at: index out of range");
  return node_->value[r * cols() + c];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw Error("set_requires_grad: tensor is not a leaf");
  node_->requires_grad = on;
  if (!on) zero_grad();
}

bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return node_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!node_->has_grad) throw Error("grad: no gradient populated");
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.clear();
  node_->has_grad = false;
}

Tensor Tensor::detach() const { return from(node_->shape, node_->value, false); }

Tensor Tensor::clone() const { return from(node_->shape, node_->value, node_->requires_grad); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) shape_fail("matmul", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * y[p * n + j];
    }
  NodePtr pa = TensorAccess::ptr(a), pb = TensorAccess::ptr(b);
  return make_result("matmul", {m, n}, std::move(out), {&a, &b},
                     [pa, pb, m, k, n](const std::vector<double>& g) {
                       if (auto* ga = grad_buffer(*pa)) {
                         const auto& bv = pb->value;
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             double s = 0.0;
                             for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                             (*ga)[i * k + p] += s;
                           }
                       }
                       if (auto* gb = grad_buffer(*pb)) {
                         const auto& av = pa->value;
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double s = av[i * k + p];
                             for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += s * g[i * n + j];
                           }
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  auto x = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("transpose", {c, r}, std::move(out), {&a}, [pa, r, c](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j * r + i];
  });
}

namespace {

// Elementwise binary op with optional row broadcast of b over a.
template <typename F, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const bool same = a.shape() == b.shape();
  const bool bcast = !same && b.size() == a.cols() && b.rows() == 1 && a.size() % a.cols() == 0;
  if (!same && !bcast) shape_fail(op, a, b);
  const std::size_t n = a.size(), c = a.cols();
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i], y[same ? i : i % c]);
  NodePtr pa = TensorAccess::ptr(a), pb = TensorAccess::ptr(b);
  return make_result(op, a.shape(), std::move(out), {&a, &b},
                     [pa, pb, same, n, c, da, db](const std::vector<double>& g) {
                       auto* ga = grad_buffer(*pa);
                       auto* gb = grad_buffer(*pb);
                       for (std::size_t i = 0; i < n; ++i) {
                         const std::size_t j = same ? i : i % c;
                         const double av = pa->value[i], bv = pb->value[j];
                         if (ga) (*ga)[i] += g[i] * da(av, bv);
                         if (gb) (*gb)[j] += g[i] * db(av, bv);
                       }
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= c;
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("scale", a.shape(), std::move(out), {&a}, [pa, c](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
  });
}

Tensor shift(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += c;
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("shift", a.shape(), std::move(out), {&a}, [pa](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

Tensor concat(const Tensor& a, const Tensor& b) {
  const std::size_t r = a.rows();
  if (b.rows() != r) shape_fail("concat", a, b);
  const std::size_t ca = a.cols(), cb = b.cols(), c = ca + cb;
  std::vector<double> out(r * c);
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(i * ca), ca, out.begin() + static_cast<std::ptrdiff_t>(i * c));
    std::copy_n(y.begin() + static_cast<std::ptrdiff_t>(i * cb), cb,
                out.begin() + static_cast<std::ptrdiff_t>(i * c + ca));
  }
  Shape shape = (a.rank() <= 1 && b.rank() <= 1) ? Shape{c} : Shape{r, c};
  NodePtr pa = TensorAccess::ptr(a), pb = TensorAccess::ptr(b);
  return make_result("concat", std::move(shape), std::move(out), {&a, &b},
                     [pa, pb, r, ca, cb, c](const std::vector<double>& g) {
                       auto* ga = grad_buffer(*pa);
                       auto* gb = grad_buffer(*pb);
                       for (std::size_t i = 0; i < r; ++i) {
                         if (ga)
                           for (std::size_t j = 0; j < ca; ++j) (*ga)[i * ca + j] += g[i * c + j];
                         if (gb)
                           for (std::size_t j = 0; j < cb; ++j) (*gb)[i * cb + j] += g[i * c + ca + j];
                       }
                     });
}

Tensor repeat_rows(const Tensor& row, std::size_t n) {
  if (row.rows() != 1) throw ShapeError("repeat_rows: expected a single row, got " + shape_string(row.shape()));
  const std::size_t c = row.cols();
  std::vector<double> out(n * c);
  auto x = row.data();
  for (std::size_t i = 0; i < n; ++i) std::copy(x.begin(), x.end(), out.begin() + static_cast<std::ptrdiff_t>(i * c));
  NodePtr pa = TensorAccess::ptr(row);
  return make_result("repeat_rows", {n, c}, std::move(out), {&row}, [pa, n, c](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[j] += g[i * c + j];
  });
}

Tensor select_row(const Tensor& a, std::size_t i) {
  const std::size_t c = a.cols();
  if (i >= a.rows())
    throw ShapeError("select_row: row " + std::to_string(i) + " out of range for " + shape_string(a.shape()));
  auto x = a.data();
  std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(i * c),
                          x.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("select_row", {1, c}, std::move(out), {&a}, [pa, i, c](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j];
  });
}

Tensor select_col(const Tensor& a, std::size_t j) {
  const std::size_t r = a.rows(), c = a.cols();
  if (j >= c)
    throw ShapeError("select_col: column " + std::to_string(j) + " out of range for " + shape_string(a.shape()));
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = a.data()[i * c + j];
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("select_col", {r, 1}, std::move(out), {&a}, [pa, j, r, c](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < r; ++i) (*ga)[i * c + j] += g[i];
  });
}

Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  NodePtr pa = TensorAccess::ptr(a);
  auto y = out;
  return make_result("tanh", a.shape(), std::move(out), {&a}, [pa, y = std::move(y)](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("relu", a.shape(), std::move(out), {&a}, [pa](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (pa->value[i] > 0.0) (*ga)[i] += g[i];
  });
}

Tensor l2_normalize(const Tensor& a) { return normalize_rows(a, "l2_normalize"); }

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) shape_fail("cosine_similarity", a, b);
  return matmul(normalize_rows(a, "cosine_similarity"), transpose(normalize_rows(b, "cosine_similarity")));
}

Tensor rowwise_cosine(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("rowwise_cosine", a, b);
  return row_sum(mul(normalize_rows(a, "rowwise_cosine"), normalize_rows(b, "rowwise_cosine")));
}

Tensor softmax_with_temperature(const Tensor& a, double tau) {
  if (!(tau > 0.0)) throw Error("softmax_with_temperature: temperature must be positive, got " + format_double(tau));
  const std::size_t r = a.rows(), c = a.cols();
  auto x = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp((x[i * c + j] - mx) / tau);
      s += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  NodePtr pa = TensorAccess::ptr(a);
  auto y = out;
  return make_result("softmax", a.shape(), std::move(out), {&a},
                     [pa, y = std::move(y), r, c, tau](const std::vector<double>& g) {
                       auto* ga = grad_buffer(*pa);
                       if (!ga) return;
                       for (std::size_t i = 0; i < r; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
                         for (std::size_t j = 0; j < c; ++j)
                           (*ga)[i * c + j] += y[i * c + j] * (g[i * c + j] - dot) / tau;
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (labels.size() != r)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_string(logits.shape()));
  auto x = logits.data();
  std::vector<double> probs(r * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] >= c)
      throw Error("cross_entropy: label " + std::to_string(labels[i]) + " out of range for " + std::to_string(c) +
                  " classes");
    double mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(x[i * c + j] - mx);
      s += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    loss += -(x[i * c + labels[i]] - mx - std::log(s));
  }
  loss /= static_cast<double>(r);
  NodePtr pa = TensorAccess::ptr(logits);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return make_result("cross_entropy", {}, {loss}, {&logits},
                     [pa, probs = std::move(probs), lab = std::move(lab), r, c](const std::vector<double>& g) {
                       auto* ga = grad_buffer(*pa);
                       if (!ga) return;
                       const double w = g[0] / static_cast<double>(r);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           (*ga)[i * c + j] += w * (probs[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
                     });
}

Tensor row_sum(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += a.data()[i * c + j];
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("row_sum", {r}, std::move(out), {&a}, [pa, r, c](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("sum", {}, {s}, {&a}, [pa](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (double& v : *ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean_squared_terms(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean_squared_terms: empty tensor");
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("mean_squared_terms", {}, {s / n}, {&a}, [pa, n](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0] * 2.0 * pa->value[i] / n;
  });
}

Tensor frobenius_norm_squared(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  NodePtr pa = TensorAccess::ptr(a);
  return make_result("frobenius_norm_squared", {}, {s}, {&a}, [pa](const std::vector<double>& g) {
    if (auto* ga = grad_buffer(*pa))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0] * 2.0 * pa->value[i];
  });
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  const NodePtr& root = TensorAccess::ptr(loss);
  if (root->value.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_string(root->shape));
  if (root->released) throw Error("backward: graph already differentiated; rebuild the loss first");
  if (!root->requires_grad) throw Error("backward: loss does not depend on any parameter requiring grad");

  // Post-order DFS yields a topological order; iteration order is fixed by
  // parent order so accumulation is deterministic.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->leaf) {
      n->grad.assign(n->value.size(), 0.0);
      n->has_grad = true;
    }
  }
  auto* rg = grad_buffer(*root);
  (*rg)[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->leaf && n->backprop) n->backprop(n->grad);
  }
  for (Node* n : order) {
    if (n->leaf) continue;
    n->backprop = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->has_grad = false;
    n->released = true;
  }
}

// ---- SGD & gradient audit --------------------------------------------------

void SgdConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("sgd: learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("sgd: batch_size must be >= 1");
}

void sgd_step(std::span<Tensor> params, const SgdConfig& config) {
  config.validate();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw Error("sgd_step: parameter " + std::to_string(i) + " has no gradient");
  }
  for (Tensor& p : params) {
    auto g = p.grad();
    auto v = p.mutable_data();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= config.learning_rate * g[j];
    p.zero_grad();
  }
}

double grad_check(const std::function<Tensor()>& loss, std::span<Tensor> params, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw Error("grad_check: epsilon must lie in [1e-7, 1e-3]");
  for (Tensor& p : params) p.zero_grad();
  Tensor l = loss();
  if (!std::isfinite(l.item())) throw Error("grad_check: non-finite loss at the base point");
  backward(l);

  double worst = 0.0;
  std::size_t flat = 0;
  for (Tensor& p : params) {
    std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                : std::vector<double>(p.size(), 0.0);
    auto v = p.mutable_data();
    for (std::size_t j = 0; j < v.size(); ++j, ++flat) {
      const double orig = v[j];
      double fp = 0.0, fm = 0.0;
      {
        NoGradGuard guard;
        v[j] = orig + epsilon;
        fp = loss().item();
        v[j] = orig - epsilon;
        fm = loss().item();
      }
      v[j] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic[j]))
        throw Error("grad_check: non-finite value at parameter index " + std::to_string(flat));
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double err = std::abs(analytic[j] - numeric) / std::max(1.0, std::abs(analytic[j]));
      worst = std::max(worst, err);
    }
    p.zero_grad();
  }
  return worst;
}

}  // namespace ratnet
