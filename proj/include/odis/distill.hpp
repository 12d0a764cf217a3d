#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "odis/augment.hpp"
#include "odis/autograd.hpp"
#include "odis/checkpoint.hpp"
#include "odis/data.hpp"
#include "odis/vit.hpp"

namespace odis {

struct LossBreakdown {
  double l_obj = 0.0;
  double l_patch = 0.0;
  double l_img = 0.0;
  double total = 0.0;
};

struct TrainConfig {
  ViTConfig model;
  AugmentConfig augment;

  bool use_object_loss = true;   // L_[OBJ] on masked-attention outputs
  bool use_image_loss = false;   // L_i on unmasked forwards
  bool use_patch_loss = true;

  std::size_t batch_size = 16;
  std::size_t total_steps = 3000;
  double lr = 1e-3;             // peak, reached after warmup
  double warmup_fraction = 0.1;
  double weight_decay = 0.04;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_grad = 3.0;       // max global grad norm, 0 disables
  double ema_start = 0.996;
  double ema_end = 1.0;
  double teacher_temp_start = 0.04;
  double teacher_temp_end = 0.04;
  double teacher_temp_warmup_fraction = 0.0;
  double center_momentum = 0.9;
  /// Update the teacher once per epoch instead of after every step.
  bool ema_per_epoch = false;
  /// Steps per epoch, filled in by run_training; used by ema_per_epoch.
  std::size_t epoch_steps = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// iBOT reduction: image-level loss on, object loss off, plain crops, no
/// object masks anywhere.
TrainConfig ibot_preset(TrainConfig base);

struct Schedule {
  double lr = 0.0;
  double lambda = 0.0;
  double teacher_temp = 0.0;
};

Schedule schedule(std::uint64_t step, std::uint64_t total_steps, const TrainConfig& config);

template <typename T>
struct TrainState {
  ModelParams<T> student;
  ModelParams<T> teacher;
  Tensor<T> center_obj;    // [1 x K]
  Tensor<T> center_patch;  // [1 x K]
  std::map<std::string, Tensor<T>> adam_m;
  std::map<std::string, Tensor<T>> adam_v;
  std::uint64_t step = 0;
  // No generator state is stored: every random draw is derived from
  // (seed, epoch, sample index), so the step counter is enough to resume.

  template <typename U>
  TrainState<U> cast() const {
    TrainState<U> out;
    out.student = student.template cast<U>();
    out.teacher = teacher.template cast<U>();
    out.center_obj = center_obj.template cast<U>();
    out.center_patch = center_patch.template cast<U>();
    for (const auto& [k, t] : adam_m) out.adam_m.emplace(k, t.template cast<U>());
    for (const auto& [k, t] : adam_v) out.adam_v.emplace(k, t.template cast<U>());
    out.step = step;
    return out;
  }
};

/// Student initialized from `seed`, teacher a copy, zero centers and moments.
template <typename T>
TrainState<T> init_state(const TrainConfig& config);

/// Mean cross-entropy between every teacher global a and every student view
/// b != a. student[0], student[1] are the globals, the rest locals. Each
/// entry holds one row per sample.
template <typename T>
Var object_loss(Graph<T>& g, const std::array<Tensor<T>, 2>& teacher,
                const std::vector<Var>& student);
template <typename T>
T object_loss(const std::array<Tensor<T>, 2>& teacher,
              const std::vector<Tensor<T>>& student);

/// (1 / sum m) * sum_i m[i] * CE(teacher[i], student[i]); 0 when sum m = 0.
template <typename T>
T patch_loss(const Tensor<T>& teacher, const Tensor<T>& student,
             const std::vector<std::uint8_t>& mask);

/// teacher <- lambda * teacher + (1 - lambda) * student for every tensor.
template <typename T>
void ema_update(ModelParams<T>& teacher, const ModelParams<T>& student, double lambda);

template <typename T>
struct StepResult {
  LossBreakdown losses;
  Schedule sched;
  double teacher_entropy = 0.0;  // mean entropy of teacher object outputs
  double grad_norm = 0.0;
};

/// Thrown when a loss component is not finite. The state is left as it was
/// before the step.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, LossBreakdown losses)
      : std::runtime_error(what), losses_(losses) {}
  const LossBreakdown& losses() const { return losses_; }

 private:
  LossBreakdown losses_;
};

/// Loss of one batch on the current state without changing it.
template <typename T>
LossBreakdown evaluate_losses(const TrainState<T>& state,
                              const std::vector<ViewBundle>& batch,
                              const TrainConfig& config);

/// Losses and student gradients of one batch without changing the state.
template <typename T>
std::pair<LossBreakdown, Gradients<T>> loss_gradients(const TrainState<T>& state,
                                                      const std::vector<ViewBundle>& batch,
                                                      const TrainConfig& config);

/// One optimization step: forwards, losses, backward, AdamW on the student,
/// center update and EMA of the teacher.
template <typename T>
StepResult<T> train_step(TrainState<T>& state, const std::vector<ViewBundle>& batch,
                         const TrainConfig& config);

/// Training samples of `step` in a per-epoch shuffle of `train_indices`.
struct BatchPlan {
  std::uint64_t epoch = 0;
  std::vector<std::size_t> indices;  // into the dataset
};
std::size_t steps_per_epoch(std::size_t train_size, std::size_t batch_size);
BatchPlan plan_batch(const std::vector<std::size_t>& train_indices,
                     std::size_t batch_size, std::uint64_t step, std::uint64_t seed);

/// Builds the bundles of a batch using up to `workers` threads. The result
/// does not depend on `workers`.
std::vector<ViewBundle> assemble_batch(const std::vector<SceneSample>& data,
                                       const BatchPlan& plan,
                                       const AugmentConfig& config,
                                       std::uint64_t seed, std::size_t workers);

/// Worker count from ODIS_WORKERS, else the processor count.
std::size_t default_workers();

std::vector<Record> state_records(const TrainState<float>& state);
TrainState<float> state_from_records(const std::vector<Record>& records,
                                     const TrainConfig& config);
void save_state(const std::filesystem::path& path, const TrainState<float>& state);
TrainState<float> load_state(const std::filesystem::path& path, const TrainConfig& config);

/// Teacher parameters stored in a checkpoint (for evaluation).
ModelParams<float> load_teacher(const std::filesystem::path& path, const ViTConfig& model);

/// One metrics line: JSON object without trailing newline.
std::string metrics_line(std::uint64_t step, const StepResult<float>& r,
                         const TrainConfig& config, double wallclock_ms);

struct TrainRunOptions {
  std::filesystem::path out_dir;
  std::size_t checkpoint_every = 0;  // 0: only final.odis
  std::size_t workers = 1;
  /// Stop after this many steps of the run without finishing it (testing
  /// resume); 0 runs to total_steps.
  std::uint64_t stop_after = 0;
};

/// Runs steps state.step .. total_steps, appending to out_dir/metrics.jsonl
/// and writing final.odis. On a non-finite loss writes
/// out_dir/diagnostic.odis plus diagnostic.json and rethrows.
void run_training(TrainState<float>& state, const std::vector<SceneSample>& data,
                  const std::vector<std::size_t>& train_indices,
                  const TrainConfig& config, const TrainRunOptions& options);

}  // namespace odis
