#include <fstream>

#include <json.hpp>

#include "odis/cli.hpp"
#include "odis/eval.hpp"

namespace odis {

namespace {

void apply_override(FlatConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
  cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
}

void append_json_line(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

}  // namespace

int cmd_gen_data(const std::optional<std::filesystem::path>& spec_file,
                 const std::filesystem::path& out, std::size_t count, std::uint64_t seed,
                 std::ostream& err) {
  try {
    const FlatConfig cfg = spec_file ? FlatConfig::load(&scene_schema(), *spec_file)
                                     : FlatConfig(&scene_schema());
    const SceneSpec spec = to_scene_spec(cfg);
    std::vector<SceneSample> samples;
    samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      samples.push_back(generate_indexed_scene(spec, seed, i));
    }
    write_dataset(samples, out);
    return 0;
  } catch (const std::exception& e) {
    err << "gen-data: " << e.what() << '\n';
    return 1;
  }
}

int cmd_train(const TrainCommand& cmd, std::ostream& log, std::ostream& err) {
  try {
    FlatConfig run = FlatConfig::load(&run_schema(), cmd.config);
    for (const auto& kv : cmd.overrides) apply_override(run, kv);
    const TrainConfig config = to_train_config(run);
    std::filesystem::create_directories(cmd.out);
    std::ofstream(cmd.out / "config.resolved.txt") << run.resolved();

    const RunData data = load_run_data(run, run.text("data.dir"));
    TrainState<float> state =
        cmd.resume ? load_state(*cmd.resume, config) : init_state<float>(config);
    TrainRunOptions opts;
    opts.out_dir = cmd.out;
    opts.checkpoint_every = run.size_value("train.checkpoint_every");
    opts.workers = default_workers();
    opts.stop_after = cmd.stop_after;
    log << "training " << run.text("objective") << " from step " << state.step << " to "
        << config.total_steps << " on " << data.split.train.size() << " samples\n";
    try {
      run_training(state, data.samples, data.split.train, config, opts);
    } catch (const NonFiniteLoss& e) {
      err << "train: " << e.what() << "\ndiagnostic snapshot: "
          << (cmd.out / "diagnostic.odis").string() << '\n';
      return 2;
    }
    log << "wrote " << (cmd.out / (state.step == config.total_steps ? "final.odis" : "last.odis")).string()
        << '\n';
    return 0;
  } catch (const std::exception& e) {
    err << "train: " << e.what() << '\n';
    return 1;
  }
}

int cmd_eval(const EvalCommand& cmd, std::ostream& log, std::ostream& err) {
  if (std::find(kProtocols.begin(), kProtocols.end(), cmd.protocol) == kProtocols.end()) {
    err << "eval: unknown protocol '" << cmd.protocol << "'; valid protocols: knn, linear, dense\n";
    return 1;
  }
  try {
    FlatConfig run = default_run_config();
    const auto beside = cmd.checkpoint.parent_path() / "config.resolved.txt";
    if (cmd.config) {
      run = FlatConfig::load(&run_schema(), *cmd.config);
    } else if (std::filesystem::exists(beside)) {
      run = FlatConfig::load(&run_schema(), beside);
    }
    const TrainConfig tc = to_train_config(run);
    const ModelParams<float> teacher = load_teacher(cmd.checkpoint, tc.model);
    const RunData data = load_run_data(run, cmd.dataset);
    const std::size_t seed = run.size_value("seed");

    nlohmann::ordered_json base;
    base["protocol"] = cmd.protocol;
    base["use_masks"] = cmd.use_masks;
    base["checkpoint"] = cmd.checkpoint.string();
    base["seed"] = seed;

    if (cmd.protocol == "knn" || cmd.protocol == "linear") {
      const FeatureTable train =
          extract_features(teacher, tc.model, data.samples, data.split.train, cmd.use_masks, &log);
      const FeatureTable val =
          extract_features(teacher, tc.model, data.samples, data.split.val, cmd.use_masks, &log);
      if (cmd.features_out) write_features(*cmd.features_out, val);
      nlohmann::ordered_json rec = base;
      if (cmd.protocol == "knn") {
        nlohmann::ordered_json sweep = nlohmann::ordered_json::object();
        double best = -1.0;
        std::size_t best_k = 0;
        for (std::size_t k : run.sizes("eval.knn_k")) {
          if (k == 0 || k > train.rows()) continue;
          const double acc = knn_accuracy(train, val, k, run.real("eval.knn_tau"));
          sweep[std::to_string(k)] = acc;
          if (acc > best) best = acc, best_k = k;
        }
        if (best_k == 0) throw ConfigError("no k in eval.knn_k fits the training split");
        rec["k"] = best_k;
        rec["accuracy_or_miou"] = best;
        rec["bank_size"] = nullptr;
        rec["sweep"] = sweep;
      } else {
        LinearProbeConfig pc;
        pc.lrs = run.reals("eval.probe_lrs");
        pc.epochs = run.size_value("eval.probe_epochs");
        pc.seed = seed;
        const LinearProbeResult r = linear_probe(train, val, pc);
        rec["k"] = nullptr;
        rec["accuracy_or_miou"] = r.best_accuracy;
        rec["bank_size"] = nullptr;
        rec["best_lr"] = r.best_lr;
        rec["sweep"] = r.accuracies;
      }
      append_json_line(cmd.out, rec);
      log << rec.dump() << '\n';
      return 0;
    }

    const std::size_t classes = run.size_value("data.num_classes") + 1;
    for (std::size_t factor : run.sizes("eval.bank_factors")) {
      const MemoryBank bank =
          build_memory_bank(teacher, tc.model, data.samples, data.split.train, factor,
                            run.size_value("eval.bank_cap"), classes, &log);
      nlohmann::ordered_json rec = base;
      nlohmann::ordered_json sweep = nlohmann::ordered_json::object();
      double best = -1.0;
      std::size_t best_k = 0;
      for (std::size_t k : run.sizes("eval.dense_k")) {
        if (k == 0 || k > bank.rows()) continue;
        const double m = dense_miou(teacher, tc.model, bank, data.samples, data.split.val, k,
                                    run.real("eval.dense_temperature"), classes);
        sweep[std::to_string(k)] = m;
        if (m > best) best = m, best_k = k;
      }
      if (best_k == 0) {
        log << "factor " << factor << ": bank of " << bank.rows() << " rows too small\n";
        continue;
      }
      rec["k"] = best_k;
      rec["accuracy_or_miou"] = best;
      rec["bank_size"] = bank.rows();
      rec["factor"] = factor;
      rec["sweep"] = sweep;
      append_json_line(cmd.out, rec);
      log << rec.dump() << '\n';
    }
    return 0;
  } catch (const std::exception& e) {
    err << "eval: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace odis
