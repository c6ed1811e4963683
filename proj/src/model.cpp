#include "ratnet/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ratnet {

ModelConfig ModelConfig::resolved() const {
  ModelConfig c = *this;
  if (c.generator_hidden == 0) c.generator_hidden = 2 * c.knowledge_dim;
  if (c.fusion_hidden == 0) c.fusion_hidden = 2 * c.knowledge_dim;
  if (c.projector_dim == 0) c.projector_dim = c.knowledge_dim;
  return c;
}

void ModelConfig::validate() const {
  if (encoder.input_dim < 1 || encoder.embedding_dim < 1 || encoder.depth < 1 || encoder.hidden < 1)
    throw ConfigError("encoder widths and depth must be >= 1");
  if (knowledge_dim < 1) throw ConfigError("knowledge_dim must be >= 1");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
}

Linear Linear::init(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& x : w) x = sd * rng.normal();
  Linear l;
  l.weight = Tensor::matrix(in, out, std::move(w), true);
  l.bias = with_bias ? Tensor::zeros({out}, true) : Tensor::zeros({0}, false);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return has_bias() ? add(y, bias) : y;
}

// ---- ModelState ------------------------------------------------------------

ModelState::ModelState(const ModelState& other)
    : encoder(other.encoder),
      posterior_template(other.posterior_template),
      generator(other.generator),
      fusion(other.fusion),
      kb(other.kb),
      projector(other.projector),
      heads(other.heads),
      config_(other.config_),
      role_(other.role_) {
  deep_copy_tensors();
}

ModelState& ModelState::operator=(const ModelState& other) {
  if (this != &other) {
    ModelState tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

void ModelState::deep_copy_tensors() {
  for (auto& p : named_parameters()) *p.tensor = p.tensor->clone();
}

ModelState ModelState::create(const ModelConfig& config, const std::vector<TaskInfo>& tasks, std::uint64_t seed) {
  config.validate();
  ModelState s;
  s.config_ = config.resolved();
  const auto& c = s.config_;
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));

  std::size_t in = c.encoder.input_dim;
  for (std::size_t l = 0; l < c.encoder.depth; ++l) {
    const std::size_t out = (l + 1 == c.encoder.depth) ? c.encoder.embedding_dim : c.encoder.hidden;
    s.encoder.push_back(Linear::init(in, out, true, rng));
    in = out;
  }
  const std::size_t e = c.knowledge_dim;
  std::vector<double> t(e);
  for (double& x : t) x = rng.normal() / std::sqrt(static_cast<double>(e));
  s.posterior_template.t_pk = Tensor::vector(std::move(t), true);
  s.generator.mlp = Mlp2::init(c.encoder.embedding_dim + e, c.generator_hidden, e, rng);
  s.fusion.mlp = Mlp2::init(2 * e, c.fusion_hidden, e, rng);
  s.projector = Linear::init(e, c.projector_dim, false, rng);

  std::vector<std::string> ids;
  for (const auto& task : tasks) ids.push_back(task.task_id);
  s.kb = KnowledgeBase::initialize(ids, e, derive_seed(seed, 0x6b62ULL));
  for (const auto& task : tasks) {
    if (task.classes < 2) throw ConfigError("task " + task.task_id + " needs at least 2 classes");
    s.heads.push_back(TaskHead{task.task_id, Linear::init(e, task.classes, true, rng)});
  }
  return s;
}

void ModelState::set_role(Role role) {
  role_ = role;
  for (auto& p : named_parameters()) p.tensor->set_requires_grad(role == Role::student);
}

std::vector<TaskInfo> ModelState::task_infos() const {
  std::vector<TaskInfo> out;
  for (const auto& h : heads) out.push_back(TaskInfo{h.task_id, h.classes()});
  return out;
}

void ModelState::add_task(const TaskInfo& task, std::uint64_t seed) {
  if (task.classes < 2) throw ConfigError("task " + task.task_id + " needs at least 2 classes");
  kb = append_task(kb, task.task_id, derive_seed(seed, 0x6b62ULL));
  Rng rng(derive_seed(seed, 0x68656164ULL));
  TaskHead h{task.task_id, Linear::init(config_.knowledge_dim, task.classes, true, rng)};
  const bool grad = role_ == Role::student;
  h.map.weight.set_requires_grad(grad);
  h.map.bias.set_requires_grad(grad);
  kb.rows.set_requires_grad(grad);
  heads.push_back(std::move(h));
}

std::vector<NamedParam> ModelState::named_parameters() {
  std::vector<NamedParam> out;
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    out.push_back({"encoder." + std::to_string(l) + ".weight", &encoder[l].weight, std::nullopt});
    out.push_back({"encoder." + std::to_string(l) + ".bias", &encoder[l].bias, std::nullopt});
  }
  out.push_back({"posterior.template", &posterior_template.t_pk, std::nullopt});
  out.push_back({"generator.w1", &generator.mlp.w1, std::nullopt});
  out.push_back({"generator.b1", &generator.mlp.b1, std::nullopt});
  out.push_back({"generator.w2", &generator.mlp.w2, std::nullopt});
  out.push_back({"generator.b2", &generator.mlp.b2, std::nullopt});
  out.push_back({"fusion.w1", &fusion.mlp.w1, std::nullopt});
  out.push_back({"fusion.b1", &fusion.mlp.b1, std::nullopt});
  out.push_back({"fusion.w2", &fusion.mlp.w2, std::nullopt});
  out.push_back({"fusion.b2", &fusion.mlp.b2, std::nullopt});
  out.push_back({"knowledge_base", &kb.rows, std::nullopt});
  out.push_back({"projector.weight", &projector.weight, std::nullopt});
  for (auto& h : heads) {
    out.push_back({"head." + h.task_id + ".weight", &h.map.weight, h.task_id});
    out.push_back({"head." + h.task_id + ".bias", &h.map.bias, h.task_id});
  }
  return out;
}

std::vector<const Tensor*> ModelState::parameters() const {
  std::vector<const Tensor*> out;
  for (auto& p : const_cast<ModelState*>(this)->named_parameters()) out.push_back(p.tensor);
  return out;
}

std::string ModelState::checksum() const {
  Fnv64 h;
  for (const Tensor* t : parameters()) h.update_doubles(t->data());
  return h.hex();
}

// ---- forward -----------------------------------------------------------------

Tensor encode(const ModelState& state, const Tensor& features) {
  if (features.cols() != state.config().encoder.input_dim)
    throw ShapeError("forward: feature width " + std::to_string(features.cols()) + " != input_dim " +
                     std::to_string(state.config().encoder.input_dim));
  Tensor h = features;
  for (const auto& layer : state.encoder) h = ratnet::tanh(layer(h));
  return h;
}

TaskForward forward(const ModelState& state, const Tensor& features, const std::string& task_id) {
  TaskForward tf;
  tf.task_index = state.task_index(task_id);
  tf.v_e = encode(state, features);
  tf.k_p = posterior_knowledge(tf.v_e, state.posterior_template, state.generator);
  tf.weights = relevance_weights(tf.k_p, state.kb, state.config().tau);
  tf.k_a = aggregate_prior(tf.weights, state.kb);
  tf.fused = fuse(tf.k_p, tf.k_a, state.fusion);
  tf.projected = state.projector(tf.fused);
  tf.logits = state.heads[tf.task_index].map(tf.fused);
  return tf;
}

Tensor embed(const ModelState& state, const Tensor& features) {
  NoGradGuard guard;
  Tensor v_e = encode(state, features);
  Tensor k_p = posterior_knowledge(v_e, state.posterior_template, state.generator);
  RelevanceWeights w = relevance_weights(k_p, state.kb, state.config().tau);
  return fuse(k_p, aggregate_prior(w, state.kb), state.fusion);
}

void ema_update(ModelState& teacher, const ModelState& student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw Error("ema_update: momentum must lie in [0, 1]");
  auto tp = teacher.named_parameters();
  auto sp = const_cast<ModelState&>(student).named_parameters();
  if (tp.size() != sp.size()) throw ShapeError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < tp.size(); ++i)
    if (tp[i].name != sp[i].name || tp[i].tensor->shape() != sp[i].tensor->shape())
      throw ShapeError("ema_update: shape mismatch at " + tp[i].name + " " + shape_string(tp[i].tensor->shape()) +
                       " vs " + sp[i].name + " " + shape_string(sp[i].tensor->shape()));
  if (momentum == 1.0) return;
  const double keep = momentum, take = 1.0 - momentum;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    auto t = tp[i].tensor->mutable_data();
    auto s = sp[i].tensor->data();
    if (momentum == 0.0)
      std::copy(s.begin(), s.end(), t.begin());
    else
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = keep * t[j] + take * s[j];
  }
}

Tensor consistency_loss(const Tensor& student_projected, const Tensor& teacher_projected) {
  return shift(scale(mean(rowwise_cosine(student_projected, teacher_projected.detach())), -1.0), 1.0);
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

class Writer {
 public:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw Error("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1u << 20)) throw Error("checkpoint: implausible string length");
    need(n);
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string checkpoint_bytes(const ModelState& state) {
  Writer w;
  w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  w.u32(state.role() == Role::student ? 0 : 1);
  const auto& c = state.config();
  for (std::size_t v : {c.encoder.input_dim, c.encoder.embedding_dim, c.encoder.depth, c.encoder.hidden,
                        c.knowledge_dim, c.generator_hidden, c.fusion_hidden, c.projector_dim})
    w.u64(v);
  w.f64(c.tau);
  const auto infos = state.task_infos();
  w.u64(infos.size());
  for (const auto& t : infos) {
    w.str(t.task_id);
    w.u64(t.classes);
  }
  auto params = const_cast<ModelState&>(state).named_parameters();
  w.u64(params.size());
  for (const auto& p : params) {
    w.str(p.name);
    w.u64(p.tensor->size());
    for (double v : p.tensor->data()) w.f64(v);
  }
  Fnv64 h;
  h.update(w.bytes());
  w.u64(h.value());
  return std::move(w.bytes());
}

ModelState checkpoint_from_bytes(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw Error("checkpoint: bad magic header");
  {
    Fnv64 h;
    h.update(std::string_view(bytes).substr(0, bytes.size() - 8));
    Reader tail(std::string_view(bytes).substr(bytes.size() - 8));
    if (tail.u64() != h.value()) throw Error("checkpoint: integrity checksum mismatch");
  }
  Reader r(std::string_view(bytes).substr(0, bytes.size() - 8));
  r.skip(sizeof(kCheckpointMagic));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t role = r.u32();
  if (role > 1) throw Error("checkpoint: invalid role tag");
  ModelConfig c;
  c.encoder.input_dim = r.u64();
  c.encoder.embedding_dim = r.u64();
  c.encoder.depth = r.u64();
  c.encoder.hidden = r.u64();
  c.knowledge_dim = r.u64();
  c.generator_hidden = r.u64();
  c.fusion_hidden = r.u64();
  c.projector_dim = r.u64();
  c.tau = r.f64();
  for (std::size_t v : {c.encoder.input_dim, c.encoder.embedding_dim, c.encoder.depth, c.encoder.hidden,
                        c.knowledge_dim, c.generator_hidden, c.fusion_hidden, c.projector_dim})
    if (v == 0 || v > (1u << 16)) throw Error("checkpoint: dimension table out of range");
  const std::uint64_t ntasks = r.u64();
  if (ntasks > c.knowledge_dim) throw Error("checkpoint: task count exceeds knowledge width");
  std::vector<TaskInfo> tasks;
  for (std::uint64_t i = 0; i < ntasks; ++i) {
    TaskInfo t;
    t.task_id = r.str();
    t.classes = r.u64();
    if (t.classes < 2 || t.classes > (1u << 16)) throw Error("checkpoint: invalid class count for " + t.task_id);
    tasks.push_back(std::move(t));
  }
  ModelState s = ModelState::create(c, tasks, 0);
  auto params = s.named_parameters();
  const std::uint64_t nparams = r.u64();
  if (nparams != params.size())
    throw Error("checkpoint: dimension mismatch, " + std::to_string(nparams) + " parameter blocks but " +
                std::to_string(params.size()) + " expected");
  for (auto& p : params) {
    const std::string name = r.str();
    if (name != p.name) throw Error("checkpoint: expected block " + p.name + ", found " + name);
    const std::uint64_t n = r.u64();
    if (n != p.tensor->size())
      throw Error("checkpoint: dimension mismatch in " + name + ": " + std::to_string(n) + " values, expected " +
                  std::to_string(p.tensor->size()));
    auto dst = p.tensor->mutable_data();
    for (std::size_t j = 0; j < n; ++j) dst[j] = r.f64();
  }
  s.set_role(role == 0 ? Role::student : Role::teacher);
  return s;
}

void checkpoint_save(const ModelState& state, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(state);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed for checkpoint " + path.string());
}

ModelState checkpoint_load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return checkpoint_from_bytes(ss.str());
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace ratnet
