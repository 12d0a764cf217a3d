#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "odis/distill.hpp"

namespace odis {

std::size_t steps_per_epoch(std::size_t train_size, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  return std::max<std::size_t>(1, train_size / batch_size);
}

BatchPlan plan_batch(const std::vector<std::size_t>& train_indices,
                     std::size_t batch_size, std::uint64_t step, std::uint64_t seed) {
  if (train_indices.empty()) throw std::invalid_argument("no training samples");
  const std::size_t spe = steps_per_epoch(train_indices.size(), batch_size);
  BatchPlan plan;
  plan.epoch = step / spe;
  const std::uint64_t pos = step % spe;
  std::vector<std::size_t> order = train_indices;
  Rng rng(derive_seed({seed, 0x5348554646ULL, plan.epoch}));
  std::shuffle(order.begin(), order.end(), rng);
  plan.indices.resize(batch_size);
  for (std::size_t k = 0; k < batch_size; ++k) {
    plan.indices[k] = order[(pos * batch_size + k) % order.size()];
  }
  return plan;
}

std::vector<ViewBundle> assemble_batch(const std::vector<SceneSample>& data,
                                       const BatchPlan& plan,
                                       const AugmentConfig& config,
                                       std::uint64_t seed, std::size_t workers) {
  const std::size_t n = plan.indices.size();
  std::vector<ViewBundle> out(n);
  std::vector<std::exception_ptr> errors(n);
  auto build = [&](std::size_t k) {
    try {
      const std::size_t idx = plan.indices[k];
      Rng rng(derive_seed({seed, plan.epoch, idx}));
      out[k] = build_view_bundle(data.at(idx), config, rng);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t k = 0; k < n; ++k) build(k);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < n; k += workers) build(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::size_t default_workers() {
  if (const char* env = std::getenv("ODIS_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    throw std::invalid_argument(std::string("ODIS_WORKERS must be a positive integer, got '") +
                                env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<Record> state_records(const TrainState<float>& state) {
  std::vector<Record> out;
  auto add_all = [&](const std::string& prefix,
                     const std::map<std::string, Tensor<float>>& tensors) {
    for (const auto& [name, t] : tensors) out.push_back({prefix + name, t});
  };
  add_all("student/", state.student.tensors);
  add_all("teacher/", state.teacher.tensors);
  add_all("adam_m/", state.adam_m);
  add_all("adam_v/", state.adam_v);
  out.push_back({"center/obj", state.center_obj});
  out.push_back({"center/patch", state.center_patch});
  // Two 16/24-bit halves so the counter survives the float container.
  out.push_back({"meta/step", Tensor<float>::row({float(state.step >> 16),
                                                  float(state.step & 0xFFFF)})});
  return out;
}

TrainState<float> state_from_records(const std::vector<Record>& records,
                                     const TrainConfig& config) {
  TrainState<float> s = init_state<float>(config);
  std::map<std::string, Tensor<float>*> slots;
  for (auto& [name, t] : s.student.tensors) slots["student/" + name] = &t;
  for (auto& [name, t] : s.teacher.tensors) slots["teacher/" + name] = &t;
  for (auto& [name, t] : s.adam_m) slots["adam_m/" + name] = &t;
  for (auto& [name, t] : s.adam_v) slots["adam_v/" + name] = &t;
  slots["center/obj"] = &s.center_obj;
  slots["center/patch"] = &s.center_patch;
  Tensor<float> step = Tensor<float>::row({0.0f, 0.0f});
  slots["meta/step"] = &step;

  std::size_t filled = 0;
  for (const Record& r : records) {
    auto it = slots.find(r.name);
    if (it == slots.end()) throw std::runtime_error("checkpoint: unexpected record " + r.name);
    if (it->second->shape() != r.tensor.shape()) {
      throw std::runtime_error("checkpoint: record " + r.name + " has shape " +
                               shape_str(r.tensor.shape()) + ", model expects " +
                               shape_str(it->second->shape()));
    }
    *it->second = r.tensor;
    ++filled;
  }
  if (filled != slots.size()) {
    for (const auto& [name, _] : slots) {
      const bool present = std::any_of(records.begin(), records.end(),
                                       [&](const Record& r) { return r.name == name; });
      if (!present) throw std::runtime_error("checkpoint: missing record " + name);
    }
    throw std::runtime_error("checkpoint: duplicate records");
  }
  s.step = (std::uint64_t(step[0]) << 16) + std::uint64_t(step[1]);
  return s;
}

void save_state(const std::filesystem::path& path, const TrainState<float>& state) {
  write_records(path, state_records(state));
}

TrainState<float> load_state(const std::filesystem::path& path, const TrainConfig& config) {
  return state_from_records(read_records(path), config);
}

ModelParams<float> load_teacher(const std::filesystem::path& path, const ViTConfig& model) {
  ModelParams<float> expected = init_params<float>(model, 0);
  ModelParams<float> teacher;
  for (Record& r : read_records(path)) {
    if (r.name.starts_with("teacher/")) {
      teacher.tensors.emplace(r.name.substr(8), std::move(r.tensor));
    }
  }
  if (teacher.tensors.empty()) {
    throw std::runtime_error(path.string() + ": no teacher parameters");
  }
  require_same_layout(teacher, expected);
  return teacher;
}

std::string metrics_line(std::uint64_t step, const StepResult<float>& r,
                         const TrainConfig& config, double wallclock_ms) {
  nlohmann::ordered_json j;
  j["step"] = step;
  if (config.use_object_loss) j["l_obj"] = r.losses.l_obj;
  j["l_patch"] = r.losses.l_patch;
  j["l_img"] = r.losses.l_img;
  j["total"] = r.losses.total;
  j["lr"] = r.sched.lr;
  j["lambda"] = r.sched.lambda;
  j["teacher_entropy"] = r.teacher_entropy;
  j["wallclock_ms"] = wallclock_ms;
  return j.dump();
}

namespace {

// Drops metrics lines past `step` so a resumed run appends where the
// checkpoint left off.
void trim_metrics(const std::filesystem::path& path, std::uint64_t step) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("step").get<std::uint64_t>() <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

void run_training(TrainState<float>& state, const std::vector<SceneSample>& data,
                  const std::vector<std::size_t>& train_indices,
                  const TrainConfig& config_in, const TrainRunOptions& options) {
  TrainConfig config = config_in;
  config.validate();
  if (state.step > config.total_steps) {
    throw std::invalid_argument("state step " + std::to_string(state.step) +
                                " is past total_steps");
  }
  if (state.step < config.total_steps && train_indices.empty()) {
    throw std::invalid_argument("training split is empty");
  }
  config.epoch_steps = steps_per_epoch(std::max<std::size_t>(train_indices.size(), 1),
                                       config.batch_size);
  std::filesystem::create_directories(options.out_dir);
  const auto metrics_path = options.out_dir / "metrics.jsonl";
  trim_metrics(metrics_path, state.step);
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw std::runtime_error("cannot open " + metrics_path.string());

  const auto start = std::chrono::steady_clock::now();
  std::uint64_t ran = 0;
  while (state.step < config.total_steps && (options.stop_after == 0 || ran < options.stop_after)) {
    const BatchPlan plan = plan_batch(train_indices, config.batch_size, state.step, config.seed);
    const auto batch = assemble_batch(data, plan, config.augment, config.seed, options.workers);
    StepResult<float> r;
    try {
      r = train_step(state, batch, config);
    } catch (const NonFiniteLoss& e) {
      save_state(options.out_dir / "diagnostic.odis", state);
      nlohmann::ordered_json d;
      d["step"] = state.step;
      d["message"] = e.what();
      d["l_obj"] = e.losses().l_obj;
      d["l_patch"] = e.losses().l_patch;
      d["l_img"] = e.losses().l_img;
      d["batch"] = plan.indices;
      std::ofstream(options.out_dir / "diagnostic.json") << d.dump(2) << '\n';
      throw;
    }
    ++ran;
    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - start).count();
    metrics << metrics_line(state.step, r, config, ms) << '\n';
    metrics.flush();
    if (options.checkpoint_every && state.step % options.checkpoint_every == 0) {
      save_state(options.out_dir / ("step_" + std::to_string(state.step) + ".odis"), state);
    }
  }
  if (state.step == config.total_steps) {
    save_state(options.out_dir / "final.odis", state);
  } else {
    save_state(options.out_dir / "last.odis", state);
  }
}

}  // namespace odis
