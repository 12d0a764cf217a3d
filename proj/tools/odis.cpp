#include <iostream>

#include <CLI11.hpp>

#include "odis/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"odis: object-level self-distillation for small vision transformers"};
  app.require_subcommand(1);

  std::optional<std::filesystem::path> spec_file;
  std::filesystem::path data_out;
  std::size_t count = 0;
  std::uint64_t data_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
  gen->add_option("--spec", spec_file, "scene spec file (key = value)")->check(CLI::ExistingFile);
  gen->add_option("--out", data_out, "output directory")->required();
  gen->add_option("--count", count, "number of scenes")->required();
  gen->add_option("--seed", data_seed, "generation seed");

  odis::TrainCommand train_cmd;
  std::string resume;
  auto* train = app.add_subcommand("train", "run self-distillation pretraining");
  train->add_option("--config", train_cmd.config, "run config file")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--out", train_cmd.out, "run directory")->required();
  train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--set", train_cmd.overrides, "key=value override, repeatable");
  train->add_option("--stop-after", train_cmd.stop_after,
                    "stop after this many steps of this invocation (0 = run to the end)");

  odis::EvalCommand eval_cmd;
  std::string eval_config, features_out;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint's teacher");
  eval->add_option("--checkpoint", eval_cmd.checkpoint, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--protocol", eval_cmd.protocol, "knn | linear | dense")->required();
  eval->add_flag("--use-masks", eval_cmd.use_masks, "feed object masks at inference");
  eval->add_option("--dataset", eval_cmd.dataset, "dataset directory")->required();
  eval->add_option("--out", eval_cmd.out, "results JSONL file to append to")->required();
  eval->add_option("--config", eval_config,
                   "run config (default: config.resolved.txt beside the checkpoint)");
  eval->add_option("--features-out", features_out, "also write validation features here");

  std::string grad_config;
  odis::GradCheckOptions grad_opts;
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every adjoint");
  grad->add_option("--config", grad_config, "run config (only its seed is used)")
      ->check(CLI::ExistingFile);
  grad->add_flag("--corrupt-adjoint", grad_opts.corrupt_adjoint)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (*gen) {
    return odis::cmd_gen_data(spec_file, data_out, count, data_seed, std::cerr);
  }
  if (*train) {
    if (!resume.empty()) train_cmd.resume = resume;
    return odis::cmd_train(train_cmd, std::cout, std::cerr);
  }
  if (*eval) {
    if (!eval_config.empty()) eval_cmd.config = eval_config;
    if (!features_out.empty()) eval_cmd.features_out = features_out;
    return odis::cmd_eval(eval_cmd, std::cout, std::cerr);
  }
  std::optional<std::filesystem::path> cfg;
  if (!grad_config.empty()) cfg = grad_config;
  return odis::cmd_grad_check(cfg, grad_opts, std::cout, std::cerr);
}
