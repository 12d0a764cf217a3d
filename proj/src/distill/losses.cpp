#include <cmath>
#include <numbers>

#include "odis/distill.hpp"
#include "odis/kernels.hpp"

namespace odis {

template <typename T>
Var object_loss(Graph<T>& g, const std::array<Tensor<T>, 2>& teacher,
                const std::vector<Var>& student) {
  if (student.size() < 2) {
    throw std::invalid_argument("object loss needs both student globals, got " +
                                std::to_string(student.size()) + " views");
  }
  if (teacher[0].shape() != teacher[1].shape()) {
    throw std::invalid_argument("object loss: teacher globals differ in shape");
  }
  const std::size_t n = teacher[0].rows();
  std::vector<Var> terms;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t b = 0; b < student.size(); ++b) {
      if (a == b) continue;
      if (g.value(student[b]).shape() != teacher[a].shape()) {
        throw std::invalid_argument(
            "object loss: student view " + std::to_string(b) + " has shape " +
            shape_str(g.value(student[b]).shape()) + ", teacher " +
            shape_str(teacher[a].shape()));
      }
      terms.push_back(ops::cross_entropy_rows(g, teacher[a], student[b]));
      ++pairs;
    }
  }
  Var total = ops::sum(g, ops::concat_rows(g, terms));
  return ops::scale(g, total, T(1) / T(pairs * n));
}

template <typename T>
T object_loss(const std::array<Tensor<T>, 2>& teacher,
              const std::vector<Tensor<T>>& student) {
  Graph<T> g(false);
  std::vector<Var> vars;
  for (const Tensor<T>& s : student) vars.push_back(g.constant(s));
  return g.value(object_loss(g, teacher, vars))[0];
}

template <typename T>
T patch_loss(const Tensor<T>& teacher, const Tensor<T>& student,
             const std::vector<std::uint8_t>& mask) {
  if (teacher.shape() != student.shape() || mask.size() != teacher.rows()) {
    throw std::invalid_argument("patch loss: teacher " + shape_str(teacher.shape()) +
                                ", student " + shape_str(student.shape()) +
                                ", mask of " + std::to_string(mask.size()));
  }
  T acc = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    acc += kernels::cross_entropy<T>(teacher.row_span(i), student.row_span(i));
    ++count;
  }
  return count ? acc / T(count) : T(0);
}

template <typename T>
void ema_update(ModelParams<T>& teacher, const ModelParams<T>& student, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("ema lambda " + std::to_string(lambda) +
                                " outside [0, 1]");
  }
  require_same_layout(teacher, student);
  const T l = T(lambda), r = T(1.0 - lambda);
  for (auto& [name, t] : teacher.tensors) {
    const Tensor<T>& s = student.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = l * t[i] + r * s[i];
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("train config: " + what);
  };
  model.validate();
  augment.validate();
  if (augment.global_side != model.image_side) {
    fail("global crop side must equal the model image side");
  }
  if (augment.patch_size != model.patch_size) fail("augment and model patch sizes differ");
  if (!use_object_loss && !use_image_loss && !use_patch_loss) fail("every loss is disabled");
  if (batch_size == 0) fail("batch_size must be positive");
  if (lr < 0.0) fail("lr must be nonnegative");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) fail("warmup_fraction outside [0, 1]");
  if (weight_decay < 0.0) fail("weight_decay must be nonnegative");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) fail("betas outside [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (clip_grad < 0.0) fail("clip_grad must be nonnegative");
  if (ema_start < 0.0 || ema_end > 1.0 || ema_start > ema_end) {
    fail("ema momentum must rise within [0, 1]");
  }
  if (!(teacher_temp_start > 0.0) || !(teacher_temp_end > 0.0)) {
    fail("teacher temperatures must be positive");
  }
  if (teacher_temp_warmup_fraction < 0.0 || teacher_temp_warmup_fraction > 1.0) {
    fail("teacher_temp_warmup_fraction outside [0, 1]");
  }
  if (center_momentum < 0.0 || center_momentum > 1.0) fail("center_momentum outside [0, 1]");
  if (use_object_loss && !augment.object_masks) {
    fail("the object loss needs object masks on the global views");
  }
}

TrainConfig ibot_preset(TrainConfig base) {
  base.use_object_loss = false;
  base.use_image_loss = true;
  base.augment.object_aware = false;
  base.augment.object_masks = false;
  base.augment.oalc = false;
  base.augment.malc = false;
  return base;
}

Schedule schedule(std::uint64_t step, std::uint64_t total_steps, const TrainConfig& config) {
  if (step > total_steps) {
    throw std::invalid_argument("schedule: step " + std::to_string(step) +
                                " beyond total " + std::to_string(total_steps));
  }
  Schedule s;
  if (total_steps == 0) {
    s.lambda = config.ema_end;
    s.teacher_temp = config.teacher_temp_end;
    return s;
  }
  const double pi = std::numbers::pi;
  const auto warmup = static_cast<std::uint64_t>(config.warmup_fraction * double(total_steps));
  if (step < warmup) {
    s.lr = config.lr * double(step) / double(warmup);
  } else {
    const double progress = double(step - warmup) / double(total_steps - warmup);
    s.lr = config.lr * 0.5 * (1.0 + std::cos(pi * progress));
  }
  const double t = double(step) / double(total_steps);
  s.lambda = config.ema_end -
             (config.ema_end - config.ema_start) * 0.5 * (1.0 + std::cos(pi * t));
  const auto temp_warmup =
      static_cast<std::uint64_t>(config.teacher_temp_warmup_fraction * double(total_steps));
  if (step < temp_warmup) {
    s.teacher_temp = config.teacher_temp_start +
                     (config.teacher_temp_end - config.teacher_temp_start) *
                         double(step) / double(temp_warmup);
  } else {
    s.teacher_temp = config.teacher_temp_end;
  }
  return s;
}

#define ODIS_INSTANTIATE(T)                                                       \
  template Var object_loss(Graph<T>&, const std::array<Tensor<T>, 2>&,            \
                           const std::vector<Var>&);                              \
  template T object_loss(const std::array<Tensor<T>, 2>&,                         \
                         const std::vector<Tensor<T>>&);                          \
  template T patch_loss(const Tensor<T>&, const Tensor<T>&,                       \
                        const std::vector<std::uint8_t>&);                        \
  template void ema_update(ModelParams<T>&, const ModelParams<T>&, double);

ODIS_INSTANTIATE(float)
ODIS_INSTANTIATE(double)

#undef ODIS_INSTANTIATE

}  // namespace odis
