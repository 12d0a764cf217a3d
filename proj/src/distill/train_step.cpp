#include <cmath>

#include "odis/distill.hpp"
#include "odis/kernels.hpp"

namespace odis {

namespace {

// Views of one kind stacked back to back, plus the rows that feed the patch
// loss.
template <typename T>
struct Packed {
  ViewBatch<T> batch;
  std::vector<std::size_t> masked_rows;
  std::vector<T> row_weights;  // 1 / (sum m) of the row's view
  std::size_t masked_views = 0;
};

template <typename T>
Packed<T> pack(const std::vector<const View*>& views, std::size_t patch_size) {
  Packed<T> out;
  const std::size_t side = views.front()->side();
  const std::size_t grid = side / patch_size;
  const std::size_t hw = grid * grid;
  std::size_t with_obj = 0, with_block = 0;
  for (const View* v : views) {
    if (v->side() != side) throw std::invalid_argument("views of one kind differ in size");
    with_obj += v->obj_mask.empty() ? 0 : 1;
    with_block += v->block_mask.empty() ? 0 : 1;
  }
  if (with_obj != 0 && with_obj != views.size()) {
    throw std::invalid_argument("object masks present on only some views");
  }
  out.batch.count = views.size();
  out.batch.grid = grid;
  const std::size_t pd = views.front()->image.dim(0) * patch_size * patch_size;
  out.batch.patches = Tensor<T>::matrix(views.size() * hw, pd);
  T* dst = out.batch.patches.data();
  for (std::size_t b = 0; b < views.size(); ++b) {
    const View& v = *views[b];
    const Tensor<T> p = patchify(v.image.template cast<T>(), patch_size);
    std::copy(p.data(), p.data() + p.size(), dst + b * hw * pd);
    if (with_obj) {
      if (v.obj_mask.size() != hw) throw std::invalid_argument("object mask size mismatch");
      out.batch.obj_mask.insert(out.batch.obj_mask.end(), v.obj_mask.begin(), v.obj_mask.end());
    }
    if (with_block) {
      if (v.block_mask.empty()) {
        out.batch.block_mask.insert(out.batch.block_mask.end(), hw, 0);
        continue;
      }
      if (v.block_mask.size() != hw) throw std::invalid_argument("block mask size mismatch");
      out.batch.block_mask.insert(out.batch.block_mask.end(), v.block_mask.begin(),
                                  v.block_mask.end());
      std::size_t count = 0;
      for (std::uint8_t m : v.block_mask) count += m ? 1 : 0;
      if (!count) continue;
      ++out.masked_views;
      for (std::size_t i = 0; i < hw; ++i) {
        if (!v.block_mask[i]) continue;
        out.masked_rows.push_back(b * hw + i);
        out.row_weights.push_back(T(1) / T(count));
      }
    }
  }
  return out;
}

template <typename T>
ViewBatch<T> unmasked_tokens(ViewBatch<T> b) {
  b.block_mask.clear();
  return b;
}

template <typename T>
ViewBatch<T> without_obj_mask(ViewBatch<T> b) {
  b.obj_mask.clear();
  return b;
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  Tensor<T> out = Tensor<T>::matrix(count, x.cols());
  std::copy(x.data() + begin * x.cols(), x.data() + (begin + count) * x.cols(), out.data());
  return out;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  Tensor<T> out = Tensor<T>::matrix(rows.size(), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(x.data() + rows[r] * x.cols(), x.data() + (rows[r] + 1) * x.cols(),
              out.data() + r * x.cols());
  }
  return out;
}

template <typename T>
struct Forward {
  Var total;
  LossBreakdown losses;
  Tensor<T> teacher_obj_logits;    // global views, object pass
  Tensor<T> teacher_patch_logits;  // every global patch; empty without patch loss
  double teacher_entropy = 0.0;
};

template <typename T>
struct Inputs {
  std::size_t samples = 0;
  std::size_t locals = 0;
  Packed<T> globals;
  Packed<T> locs;
  bool masks_present = false;
};

template <typename T>
Inputs<T> prepare(const std::vector<ViewBundle>& batch, std::size_t patch_size) {
  if (batch.empty()) throw std::invalid_argument("train step: empty batch");
  Inputs<T> in;
  in.samples = batch.size();
  in.locals = batch.front().locals.size();
  std::vector<const View*> g, l;
  for (std::size_t v = 0; v < 2; ++v)
    for (const ViewBundle& b : batch) g.push_back(&b.globals[v]);
  for (const ViewBundle& b : batch) {
    if (b.locals.size() != in.locals) {
      throw std::invalid_argument("train step: bundles carry different local counts");
    }
  }
  for (std::size_t j = 0; j < in.locals; ++j)
    for (const ViewBundle& b : batch) l.push_back(&b.locals[j]);
  in.globals = pack<T>(g, patch_size);
  if (in.locals) in.locs = pack<T>(l, patch_size);
  in.masks_present = !in.globals.batch.obj_mask.empty() ||
                     (in.locals && !in.locs.batch.obj_mask.empty());
  return in;
}

// Student object outputs for every view, split per view, and the teacher
// targets for both globals.
template <typename T>
Var object_term(Graph<T>& g, const BoundParams& p, const ViTConfig& model,
                const Inputs<T>& in, const BackboneOutput& sg,
                const std::optional<BackboneOutput>& sl,
                const Tensor<T>& teacher_probs) {
  const std::size_t n = in.samples;
  Var z = sl ? ops::concat_rows(g, {sg.obj, sl->obj}) : sg.obj;
  Var probs = head_probs(g, p, z, T(model.student_temp));
  std::vector<Var> views;
  for (std::size_t v = 0; v < 2 + in.locals; ++v) {
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = v * n + i;
    views.push_back(ops::gather_rows(g, probs, std::move(rows)));
  }
  const std::array<Tensor<T>, 2> targets{take_rows(teacher_probs, 0, n),
                                         take_rows(teacher_probs, n, n)};
  return object_loss(g, targets, views);
}

template <typename T>
Forward<T> forward(Graph<T>& g, const TrainState<T>& st,
                   const std::vector<ViewBundle>& batch, const TrainConfig& cfg,
                   T teacher_temp) {
  const ViTConfig& model = cfg.model;
  const Inputs<T> in = prepare<T>(batch, model.patch_size);
  const BoundParams p = BoundParams::bind(g, st.student, g.tracking());
  Graph<T> tg(false);
  const BoundParams tp = BoundParams::bind(tg, st.teacher, false);

  Forward<T> f;
  std::vector<Var> terms;

  // Object pass: obj masks as given by the bundles.
  const BackboneOutput sg = backbone_forward(g, p, model, in.globals.batch);
  std::optional<BackboneOutput> sl;
  if (in.locals) sl = backbone_forward(g, p, model, in.locs.batch);
  const BackboneOutput tgl = backbone_forward(tg, tp, model, unmasked_tokens(in.globals.batch));
  f.teacher_obj_logits = tg.value(head_logits(tg, tp, tgl.obj));
  const Tensor<T> t_probs = centered_probs(f.teacher_obj_logits, st.center_obj, teacher_temp);
  for (std::size_t r = 0; r < t_probs.rows(); ++r) {
    f.teacher_entropy += double(kernels::entropy<T>(t_probs.row_span(r)));
  }
  f.teacher_entropy /= double(t_probs.rows());

  const bool image_from_object_pass = cfg.use_image_loss && !in.masks_present;
  Var obj_term;
  if (cfg.use_object_loss || image_from_object_pass) {
    obj_term = object_term(g, p, model, in, sg, sl, t_probs);
  }
  if (cfg.use_object_loss) {
    f.losses.l_obj = double(g.value(obj_term)[0]);
    terms.push_back(obj_term);
  }

  if (cfg.use_patch_loss) {
    f.teacher_patch_logits = tg.value(head_logits(tg, tp, tgl.patches));
    std::vector<Var> ce;
    std::vector<T> weights;
    const std::size_t views = in.globals.masked_views + (in.locals ? in.locs.masked_views : 0);
    auto add_view_kind = [&](const Packed<T>& pk, const BackboneOutput& student,
                             const Tensor<T>& teacher_logits) {
      if (pk.masked_rows.empty()) return;
      const Tensor<T> targets = centered_probs(gather(teacher_logits, pk.masked_rows),
                                               st.center_patch, teacher_temp);
      Var s = head_probs(g, p, ops::gather_rows(g, student.patches, pk.masked_rows),
                         T(model.student_temp));
      ce.push_back(ops::cross_entropy_rows(g, targets, s));
      for (T w : pk.row_weights) weights.push_back(w / T(views));
    };
    add_view_kind(in.globals, sg, f.teacher_patch_logits);
    if (in.locals && !in.locs.masked_rows.empty()) {
      // Patch masking on locals: the teacher sees the same local unmasked.
      const BackboneOutput tl = backbone_forward(tg, tp, model, unmasked_tokens(in.locs.batch));
      add_view_kind(in.locs, *sl, tg.value(head_logits(tg, tp, tl.patches)));
    }
    if (!ce.empty()) {
      Var term = ops::weighted_sum(g, ops::concat_rows(g, ce), std::move(weights));
      f.losses.l_patch = double(g.value(term)[0]);
      terms.push_back(term);
    }
  }

  if (cfg.use_image_loss) {
    Var img_term = obj_term;
    if (in.masks_present) {
      // Image-level pass: same inputs, no attention restriction.
      const BackboneOutput ug = backbone_forward(g, p, model, without_obj_mask(in.globals.batch));
      std::optional<BackboneOutput> ul;
      if (in.locals) ul = backbone_forward(g, p, model, without_obj_mask(in.locs.batch));
      const BackboneOutput tu = backbone_forward(
          tg, tp, model, without_obj_mask(unmasked_tokens(in.globals.batch)));
      const Tensor<T> tu_probs =
          centered_probs(tg.value(head_logits(tg, tp, tu.obj)), st.center_obj, teacher_temp);
      img_term = object_term(g, p, model, in, ug, ul, tu_probs);
    }
    f.losses.l_img = double(g.value(img_term)[0]);
    terms.push_back(img_term);
  }

  if (terms.empty()) {
    // Only the patch loss is on and no view carries a block mask.
    f.total = g.constant(Tensor<T>::matrix(1, 1, T(0)));
  } else {
    f.total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) f.total = ops::add(g, f.total, terms[i]);
  }
  f.losses.total = double(g.value(f.total)[0]);
  return f;
}

void check_finite(const LossBreakdown& l, std::uint64_t step) {
  if (std::isfinite(l.l_obj) && std::isfinite(l.l_patch) && std::isfinite(l.l_img) &&
      std::isfinite(l.total)) {
    return;
  }
  throw NonFiniteLoss("non-finite loss at step " + std::to_string(step) +
                          ": l_obj=" + std::to_string(l.l_obj) +
                          " l_patch=" + std::to_string(l.l_patch) +
                          " l_img=" + std::to_string(l.l_img),
                      l);
}

// Weight decay on matrices only: biases, norm scales and tokens are exempt.
template <typename T>
bool decays(const std::string& name, const Tensor<T>& t) {
  return t.rows() > 1 && name.ends_with(".weight");
}

template <typename T>
void update_center(Tensor<T>& center, const Tensor<T>& logits, double momentum) {
  const std::size_t k = center.size();
  std::vector<double> mean(k, 0.0);
  for (std::size_t r = 0; r < logits.rows(); ++r)
    for (std::size_t c = 0; c < k; ++c) mean[c] += double(logits(r, c));
  for (std::size_t c = 0; c < k; ++c) {
    center[c] = T(momentum * double(center[c]) +
                  (1.0 - momentum) * mean[c] / double(logits.rows()));
  }
}

}  // namespace

template <typename T>
TrainState<T> init_state(const TrainConfig& config) {
  config.validate();
  TrainState<T> s;
  s.student = init_params<T>(config.model, config.seed);
  s.teacher = s.student;
  const std::size_t k = config.model.head_output_dim;
  s.center_obj = Tensor<T>::matrix(1, k);
  s.center_patch = Tensor<T>::matrix(1, k);
  for (const auto& [name, t] : s.student.tensors) {
    s.adam_m.emplace(name, Tensor<T>(t.shape()));
    s.adam_v.emplace(name, Tensor<T>(t.shape()));
  }
  return s;
}

template <typename T>
LossBreakdown evaluate_losses(const TrainState<T>& state,
                              const std::vector<ViewBundle>& batch,
                              const TrainConfig& config) {
  const Schedule sched = schedule(state.step, config.total_steps, config);
  Graph<T> g(false);
  return forward(g, state, batch, config, T(sched.teacher_temp)).losses;
}

template <typename T>
std::pair<LossBreakdown, Gradients<T>> loss_gradients(const TrainState<T>& state,
                                                      const std::vector<ViewBundle>& batch,
                                                      const TrainConfig& config) {
  const Schedule sched = schedule(state.step, config.total_steps, config);
  Graph<T> g(true);
  Forward<T> f = forward(g, state, batch, config, T(sched.teacher_temp));
  check_finite(f.losses, state.step);
  return {f.losses, g.backward(f.total)};
}

template <typename T>
StepResult<T> train_step(TrainState<T>& state, const std::vector<ViewBundle>& batch,
                         const TrainConfig& config) {
  StepResult<T> r;
  r.sched = schedule(state.step, config.total_steps, config);
  Graph<T> g(true);
  Forward<T> f = forward(g, state, batch, config, T(r.sched.teacher_temp));
  r.losses = f.losses;
  r.teacher_entropy = f.teacher_entropy;
  check_finite(f.losses, state.step);
  Gradients<T> grads = g.backward(f.total);

  double sq = 0.0;
  for (const auto& [_, gr] : grads)
    for (T v : gr.values()) sq += double(v) * double(v);
  r.grad_norm = std::sqrt(sq);
  double clip = 1.0;
  if (config.clip_grad > 0.0 && r.grad_norm > config.clip_grad) {
    clip = config.clip_grad / (r.grad_norm + 1e-6);
  }

  const double t = double(state.step + 1);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  const T lr = T(r.sched.lr);
  const T b1 = T(config.beta1), b2 = T(config.beta2);
  const T eps = T(config.adam_eps), wd = T(config.weight_decay);
  for (auto& [name, param] : state.student.tensors) {
    const Tensor<T>& gr = grads.at(name);
    Tensor<T>& m = state.adam_m.at(name);
    Tensor<T>& v = state.adam_v.at(name);
    const T decay = decays(name, param) ? wd : T(0);
    for (std::size_t i = 0; i < param.size(); ++i) {
      const T gi = gr[i] * T(clip);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T mhat = m[i] / T(bc1);
      const T vhat = v[i] / T(bc2);
      param[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + decay * param[i]);
    }
  }

  update_center(state.center_obj, f.teacher_obj_logits, config.center_momentum);
  if (!f.teacher_patch_logits.empty()) {
    update_center(state.center_patch, f.teacher_patch_logits, config.center_momentum);
  }

  if (!config.ema_per_epoch) {
    ema_update(state.teacher, state.student, r.sched.lambda);
  } else {
    if (config.epoch_steps == 0) {
      throw std::invalid_argument("per-epoch EMA needs epoch_steps");
    }
    if ((state.step + 1) % config.epoch_steps == 0) {
      ema_update(state.teacher, state.student, r.sched.lambda);
    }
  }
  ++state.step;
  return r;
}

#define ODIS_INSTANTIATE(T)                                                          \
  template TrainState<T> init_state<T>(const TrainConfig&);                          \
  template LossBreakdown evaluate_losses(const TrainState<T>&,                       \
                                         const std::vector<ViewBundle>&,             \
                                         const TrainConfig&);                        \
  template std::pair<LossBreakdown, Gradients<T>> loss_gradients(                    \
      const TrainState<T>&, const std::vector<ViewBundle>&, const TrainConfig&);     \
  template StepResult<T> train_step(TrainState<T>&, const std::vector<ViewBundle>&,  \
                                    const TrainConfig&);

ODIS_INSTANTIATE(float)
ODIS_INSTANTIATE(double)

#undef ODIS_INSTANTIATE

}  // namespace odis
