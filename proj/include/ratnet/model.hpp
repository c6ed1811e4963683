#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ratnet/knowledge.hpp"
#include "ratnet/tensor.hpp"

namespace ratnet {

struct EncoderConfig {
  std::size_t input_dim = 16;
  std::size_t embedding_dim = 32;
  std::size_t depth = 2;
  std::size_t hidden = 32;
};

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t knowledge_dim = 16;    // E
  std::size_t generator_hidden = 0;  // 0 -> 2E
  std::size_t fusion_hidden = 0;     // 0 -> 2E
  std::size_t projector_dim = 0;     // 0 -> E
  double tau = 0.1;

  // Fills the 0 -> default entries.
  ModelConfig resolved() const;
  void validate() const;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out; empty (size 0) when absent

  static Linear init(std::size_t in, std::size_t out, bool with_bias, Rng& rng);
  bool has_bias() const { return bias.size() > 0; }
  Tensor operator()(const Tensor& x) const;
};

struct TaskHead {
  std::string task_id;
  Linear map;  // E -> C_t
  std::size_t classes() const { return map.weight.cols(); }
};

struct TaskInfo {
  std::string task_id;
  std::size_t classes = 2;
};

enum class Role { student, teacher };

// Handle to one learnable tensor with a stable name. `owner_task` is set for
// task-specific heads.
struct NamedParam {
  std::string name;
  Tensor* tensor;
  std::optional<std::string> owner_task;
};

// Full parameter set of one network. Copies are deep.
class ModelState {
 public:
  ModelState() = default;
  ModelState(const ModelState& other);
  ModelState& operator=(const ModelState& other);
  ModelState(ModelState&&) noexcept = default;
  ModelState& operator=(ModelState&&) noexcept = default;

  static ModelState create(const ModelConfig& config, const std::vector<TaskInfo>& tasks, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Role role() const { return role_; }
  // Teachers never take gradients; switching role toggles requires_grad.
  void set_role(Role role);

  std::vector<std::string> task_ids() const { return kb.task_ids; }
  std::vector<TaskInfo> task_infos() const;
  std::size_t task_index(const std::string& task_id) const { return kb.require_index(task_id); }
  const TaskHead& head(const std::string& task_id) const { return heads.at(task_index(task_id)); }

  // Registers a new task: one appended knowledge row and a fresh head.
  void add_task(const TaskInfo& task, std::uint64_t seed);

  // Fixed-order parameter listing; the order defines the checkpoint layout.
  std::vector<NamedParam> named_parameters();
  std::vector<const Tensor*> parameters() const;
  std::string checksum() const;

  std::vector<Linear> encoder;
  PosteriorTemplate posterior_template;
  PosteriorGenerator generator;
  FusionBlock fusion;
  KnowledgeBase kb;
  Linear projector;
  std::vector<TaskHead> heads;  // aligned with kb.task_ids

 private:
  void deep_copy_tensors();

  ModelConfig config_;
  Role role_ = Role::student;
};

// Intermediates of one forward pass over a batch.
struct TaskForward {
  Tensor v_e;
  Tensor k_p;
  RelevanceWeights weights;
  Tensor k_a;
  Tensor fused;
  Tensor projected;
  Tensor logits;
  std::size_t task_index = 0;
};

Tensor encode(const ModelState& state, const Tensor& features);
TaskForward forward(const ModelState& state, const Tensor& features, const std::string& task_id);
// Fused representation without any head; recorded without gradients.
Tensor embed(const ModelState& state, const Tensor& features);

// teacher <- m * teacher + (1 - m) * student, parameter-wise.
void ema_update(ModelState& teacher, const ModelState& student, double momentum);

// Batch mean of 1 - cos(student, teacher); the teacher side is a constant.
Tensor consistency_loss(const Tensor& student_projected, const Tensor& teacher_projected);

inline constexpr char kCheckpointMagic[8] = {'R', 'A', 'T', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Checkpoint layout (little-endian): magic, u32 version, u32 role, dimension
// table, tau, task registry (id, class count), named float64 parameter blocks,
// trailing FNV-1a 64 of all preceding bytes.
std::string checkpoint_bytes(const ModelState& state);
ModelState checkpoint_from_bytes(const std::string& bytes);
void checkpoint_save(const ModelState& state, const std::filesystem::path& path);
ModelState checkpoint_load(const std::filesystem::path& path);

}  // namespace ratnet
