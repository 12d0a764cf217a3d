#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>

#include "odis/cli.hpp"

namespace odis {

namespace {

using Build = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

Tensor<double> random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
  Tensor<double> t = Tensor<double>::matrix(rows, cols);
  for (double& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

// Scalar probe loss: a fixed random weighting of the op's output entries.
double probe_loss(const Build& build, const std::vector<Tensor<double>>& inputs,
                  const std::vector<double>& weights) {
  Graph<double> g(false);
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  return g.value(ops::weighted_sum(g, build(g, vars), weights))[0];
}

double relative_error(const Tensor<double>& analytic, const std::vector<double>& numeric,
                      const std::vector<std::size_t>& entries) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[entries[i]] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return diff / std::max(scale, 1e-8);
}

constexpr double kStep = 1e-5;

double check_op(const Build& build, std::vector<Tensor<double>> inputs, Rng& rng) {
  std::vector<double> weights;
  {
    Graph<double> g(false);
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(g.constant(t));
    const std::size_t n = g.value(build(g, vars)).size();
    for (std::size_t i = 0; i < n; ++i) weights.push_back(uniform(rng, -1.0, 1.0));
  }
  Graph<double> g(true);
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    vars.push_back(g.parameter("in" + std::to_string(i), inputs[i]));
  }
  const Gradients<double> grads = g.backward(ops::weighted_sum(g, build(g, vars), weights));

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> entries(inputs[i].size());
    std::vector<double> numeric(entries.size());
    for (std::size_t j = 0; j < entries.size(); ++j) {
      entries[j] = j;
      const double x = inputs[i][j];
      inputs[i][j] = x + kStep;
      const double up = probe_loss(build, inputs, weights);
      inputs[i][j] = x - kStep;
      const double down = probe_loss(build, inputs, weights);
      inputs[i][j] = x;
      numeric[j] = (up - down) / (2.0 * kStep);
    }
    worst = std::max(worst, relative_error(grads.at("in" + std::to_string(i)), numeric, entries));
  }
  return worst;
}

TrainConfig micro_config() {
  TrainConfig c;
  c.model.image_side = 16;
  c.model.patch_size = 4;
  c.model.depth = 2;
  c.model.embed_dim = 16;
  c.model.heads = 2;
  c.model.mlp_ratio = 2;
  c.model.head_hidden = 32;
  c.model.head_bottleneck = 16;
  c.model.head_output_dim = 32;
  c.augment.global_side = 16;
  c.augment.local_side = 8;
  c.augment.patch_size = 4;
  c.augment.local_crops = 2;
  c.augment.block_mask_prob = 1.0;
  c.total_steps = 10;
  return c;
}

double check_full_loss(const TrainConfig& config, std::uint64_t seed, Rng& rng) {
  SceneSpec spec;
  spec.canvas_side = 16;
  spec.min_objects = 1;
  spec.max_objects = 2;
  spec.size_min = 0.35;
  spec.size_max = 0.6;
  std::vector<ViewBundle> batch;
  for (std::size_t i = 0; i < 2; ++i) {
    Rng r(derive_seed({seed, 0x6772616400ULL, i}));
    batch.push_back(build_view_bundle(generate_indexed_scene(spec, seed, i), config.augment, r));
  }
  TrainState<double> state = init_state<double>(config);
  // Distinct teacher and nonzero centers so no term is degenerate.
  for (auto& [_, t] : state.teacher.tensors)
    for (double& v : t.values()) v += uniform(rng, -0.01, 0.01);
  for (double& v : state.center_obj.values()) v = uniform(rng, -0.1, 0.1);
  for (double& v : state.center_patch.values()) v = uniform(rng, -0.1, 0.1);

  const Gradients<double> grads = loss_gradients(state, batch, config).second;
  double worst = 0.0;
  for (auto& [name, param] : state.student.tensors) {
    // A spread of entries per tensor keeps the suite fast.
    std::vector<std::size_t> entries;
    const std::size_t want = std::min<std::size_t>(param.size(), 12);
    while (entries.size() < want) {
      const std::size_t j = uniform_index(rng, param.size());
      if (std::find(entries.begin(), entries.end(), j) == entries.end()) entries.push_back(j);
    }
    std::vector<double> numeric;
    // Five-point stencil: the normalized head bottleneck is strongly curved,
    // enough for second-order truncation to show at 1e-4.
    auto at = [&](std::size_t j, double v) {
      const double x = param[j];
      param[j] = v;
      const double f = evaluate_losses(state, batch, config).total;
      param[j] = x;
      return f;
    };
    for (std::size_t j : entries) {
      const double x = param[j];
      const double d1 = at(j, x + kStep) - at(j, x - kStep);
      const double d2 = at(j, x + 2.0 * kStep) - at(j, x - 2.0 * kStep);
      numeric.push_back((8.0 * d1 - d2) / (12.0 * kStep));
    }
    worst = std::max(worst, relative_error(grads.at(name), numeric, entries));
  }
  return worst;
}

}  // namespace

std::vector<GradCheckEntry> run_grad_check(const GradCheckOptions& options) {
  Rng rng(derive_seed({options.seed, 0x67636b}));
  std::vector<GradCheckEntry> out;
  auto run = [&](const std::string& op, const Build& build, std::vector<Tensor<double>> in) {
    out.push_back({op, check_op(build, std::move(in), rng)});
  };
  using G = Graph<double>;
  using Vs = std::vector<Var>;

  run("matmul", [](G& g, const Vs& v) { return ops::matmul(g, v[0], v[1]); },
      {random_tensor(3, 4, rng), random_tensor(4, 5, rng)});
  run("linear", [](G& g, const Vs& v) { return ops::linear(g, v[0], v[1], v[2]); },
      {random_tensor(3, 4, rng), random_tensor(4, 5, rng), random_tensor(1, 5, rng)});
  run("add", [](G& g, const Vs& v) { return ops::add(g, v[0], v[1]); },
      {random_tensor(3, 4, rng), random_tensor(3, 4, rng)});
  run("scale", [](G& g, const Vs& v) { return ops::scale(g, v[0], 1.7); },
      {random_tensor(3, 4, rng)});
  run("gelu", [](G& g, const Vs& v) { return ops::gelu(g, v[0]); },
      {random_tensor(3, 5, rng, -3.0, 3.0)});
  run("layer_norm", [](G& g, const Vs& v) { return ops::layer_norm(g, v[0], v[1], v[2]); },
      {random_tensor(3, 6, rng), random_tensor(1, 6, rng), random_tensor(1, 6, rng)});
  run("softmax", [](G& g, const Vs& v) { return ops::softmax(g, v[0], 0.5); },
      {random_tensor(3, 5, rng)});
  run("l2_normalize", [](G& g, const Vs& v) { return ops::l2_normalize(g, v[0]); },
      {random_tensor(3, 5, rng)});
  {
    Tensor<double> targets = random_tensor(3, 5, rng, 0.0, 1.0);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (double x : targets.row_span(r)) s += x;
      for (double& x : targets.row_span(r)) x /= s;
    }
    run("cross_entropy_rows",
        [targets](G& g, const Vs& v) { return ops::cross_entropy_rows(g, targets, v[0]); },
        {random_tensor(3, 5, rng, 0.1, 1.0)});
  }
  run("sum", [](G& g, const Vs& v) { return ops::sum(g, v[0]); }, {random_tensor(3, 4, rng)});
  run("weighted_sum",
      [](G& g, const Vs& v) {
        return ops::weighted_sum(g, v[0], {0.5, -1.0, 2.0, 0.25, 1.5, -0.75});
      },
      {random_tensor(2, 3, rng)});
  run("transpose", [](G& g, const Vs& v) { return ops::transpose(g, v[0]); },
      {random_tensor(3, 4, rng)});
  run("gather_rows", [](G& g, const Vs& v) { return ops::gather_rows(g, v[0], {2, 0, 2}); },
      {random_tensor(4, 3, rng)});
  run("concat_rows", [](G& g, const Vs& v) { return ops::concat_rows(g, {v[0], v[1]}); },
      {random_tensor(2, 3, rng), random_tensor(3, 3, rng)});
  run("masked_attention",
      [](G& g, const Vs& v) {
        return ops::masked_attention(g, v[0], 5, 2, {1, 1, 0, 1, 0, 1, 0, 0, 1, 1});
      },
      {random_tensor(10, 12, rng)});
  run("assemble_tokens",
      [](G& g, const Vs& v) {
        return ops::assemble_tokens(g, v[0], v[1], v[2], v[3], {0, 1, 0, 0, 1, 1, 0, 0});
      },
      {random_tensor(8, 3, rng), random_tensor(1, 3, rng), random_tensor(1, 3, rng),
       random_tensor(4, 3, rng)});
  if (options.corrupt_adjoint) {
    run("corrupted_scale",
        [](G& g, const Vs& v) {
          Tensor<double> y = g.value(v[0]);
          for (double& x : y.values()) x *= 2.0;
          return g.record("corrupted_scale", std::move(y), {v[0]},
                          [x = v[0]](G& g, const Tensor<double>& go) {
                            if (Tensor<double>* dx = g.grad_buffer(x))
                              for (std::size_t i = 0; i < go.size(); ++i) (*dx)[i] += 3.0 * go[i];
                          });
        },
        {random_tensor(2, 3, rng)});
  }
  out.push_back({"odis_loss", check_full_loss(micro_config(), options.seed, rng)});
  return out;
}

int cmd_grad_check(const std::optional<std::filesystem::path>& config,
                   const GradCheckOptions& options, std::ostream& out, std::ostream& err) {
  GradCheckOptions opts = options;
  try {
    if (config) opts.seed = FlatConfig::load(&run_schema(), *config).size_value("seed");
    const auto entries = run_grad_check(opts);
    bool ok = true;
    for (const auto& e : entries) {
      const bool pass = e.max_rel_error < opts.tolerance;
      ok = ok && pass;
      out << std::left << std::setw(20) << e.op << std::scientific << std::setprecision(3)
          << e.max_rel_error << (pass ? "  ok" : "  FAIL") << '\n';
    }
    return ok ? 0 : 2;
  } catch (const std::exception& e) {
    err << "grad-check: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace odis
