#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "graftkd/experiment.hpp"
#include "graftkd/verify.hpp"

namespace {

using namespace graftkd;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  int k = -1;
  long long seed_data = -1, seed_init = -1, seed_train = -1;
  bool resume = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_config) {
  auto* c = cmd->add_option("--config", args.config_path, "experiment config file");
  if (needs_config) c->required();
  cmd->add_option("--out", args.out_dir, "output run directory (overrides config)");
  cmd->add_option("--k", args.k, "shots per class (overrides config)");
  cmd->add_option("--seed-data", args.seed_data, "data seed (overrides config)");
  cmd->add_option("--seed-init", args.seed_init, "init seed (overrides config)");
  cmd->add_option("--seed-train", args.seed_train, "train seed (overrides config)");
  cmd->add_flag("--resume", args.resume, "resume from existing unit checkpoints");
}

ExperimentConfig load_config(const CommonArgs& args) {
  ExperimentConfig cfg = ExperimentConfig::load_file(args.config_path);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (args.k > 0) {
    cfg.k_shots = args.k;
    cfg.stage1.batch_size = batch_size_for(args.k);
    cfg.stage2.batch_size = batch_size_for(args.k);
  }
  if (args.seed_data >= 0) cfg.seed_data = static_cast<std::uint64_t>(args.seed_data);
  if (args.seed_init >= 0) cfg.seed_init = static_cast<std::uint64_t>(args.seed_init);
  if (args.seed_train >= 0) cfg.seed_train = static_cast<std::uint64_t>(args.seed_train);
  cfg.stage1.seed = cfg.seed_train;
  cfg.stage2.seed = cfg.seed_train;
  return cfg;
}

// Compute-device selection: GRAFTKD_DEVICE=cpu or cpu:<threads>.
void apply_device_env() {
  const char* dev = std::getenv("GRAFTKD_DEVICE");
  if (!dev) return;
  const std::string s(dev);
  if (s == "cpu") return;
  if (s.rfind("cpu:", 0) == 0) {
    const int threads = std::stoi(s.substr(4));
    require(threads >= 1, "GRAFTKD_DEVICE: thread count must be >= 1");
    Eigen::setNbThreads(threads);
    return;
  }
  fail("GRAFTKD_DEVICE: unsupported device '" + s + "' (this build supports cpu[:<threads>])");
}

void print_pipeline_result(const PipelineResult& r) {
  if (!r.complete) {
    std::cout << "run paused (unit budget reached); resume with --resume\n";
    return;
  }
  std::cout << strf("teacher top-1: %.4f\n", r.teacher_top1);
  std::cout << strf("final student top-1: %.4f\n", r.final_top1);
  if (r.final_top5) std::cout << strf("final student top-5: %.4f\n", *r.final_top5);
  if (r.baseline_top1) std::cout << strf("whole-net baseline top-1: %.4f\n", *r.baseline_top1);
  std::cout << "run directory: " << r.run_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graftkd: few-shot knowledge distillation by progressive network grafting"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string eval_checkpoint;
  std::string plot_dir;
  int graft_block_idx = 3;

  auto* cmd_teacher = app.add_subcommand("train-teacher", "pre-train the teacher network");
  add_common(cmd_teacher, args, true);

  auto* cmd_run = app.add_subcommand("run", "run the full grafting pipeline");
  add_common(cmd_run, args, true);

  auto* cmd_stage1 = app.add_subcommand("stage1", "run block grafting only");
  add_common(cmd_stage1, args, true);

  auto* cmd_stage2 = app.add_subcommand("stage2", "run progressive network grafting");
  add_common(cmd_stage2, args, true);

  auto* cmd_finalize = app.add_subcommand("finalize", "merge adaptions into the student");
  add_common(cmd_finalize, args, true);

  auto* cmd_eval = app.add_subcommand("eval", "evaluate a network checkpoint");
  add_common(cmd_eval, args, true);
  cmd_eval->add_option("--checkpoint", eval_checkpoint, "checkpoint directory")->required();

  auto* cmd_partial = app.add_subcommand("partial-graft", "partial network grafting report");
  add_common(cmd_partial, args, true);
  cmd_partial->add_option("--block", graft_block_idx, "teacher block to replace")->required();

  auto* cmd_plot = app.add_subcommand("plot", "emit SVG plots for a run or sweep directory");
  cmd_plot->add_option("--run", plot_dir, "run (or sweep parent) directory")->required();

  auto* cmd_verify = app.add_subcommand("verify", "run the property suites");

  CLI11_PARSE(app, argc, argv);

  try {
    apply_device_env();
    if (cmd_verify->parsed()) {
      return run_property_suites(std::cout) ? 0 : 1;
    }
    if (cmd_plot->parsed()) {
      for (const auto& p : emit_plots(plot_dir)) std::cout << "wrote " << p << "\n";
      return 0;
    }
    ExperimentConfig cfg = load_config(args);
    if (cmd_teacher->parsed()) {
      const double acc = train_teacher(cfg, args.resume);
      std::cout << strf("teacher top-1: %.4f\n", acc);
    } else if (cmd_run->parsed()) {
      print_pipeline_result(run_pipeline(cfg, args.resume, PipelinePhase::all));
    } else if (cmd_stage1->parsed()) {
      run_pipeline(cfg, args.resume, PipelinePhase::stage1);
      std::cout << "stage 1 complete; scion checkpoints under " << cfg.out_dir
                << "/checkpoints\n";
    } else if (cmd_stage2->parsed()) {
      run_pipeline(cfg, args.resume, PipelinePhase::stage2);
      std::cout << "stage 2 complete; depth checkpoints under " << cfg.out_dir
                << "/checkpoints\n";
    } else if (cmd_finalize->parsed()) {
      run_pipeline(cfg, args.resume, PipelinePhase::finalize);
      std::cout << "merged student written to " << cfg.out_dir << "/checkpoints/student\n";
    } else if (cmd_eval->parsed()) {
      const EvalResult r = evaluate_checkpoint(cfg, eval_checkpoint);
      std::cout << strf("top-1: %.4f\n", r.top1);
      if (r.top5) std::cout << strf("top-5: %.4f\n", *r.top5);
    } else if (cmd_partial->parsed()) {
      const auto row = partial_graft_report(cfg, graft_block_idx, args.resume);
      std::cout << format_partial_graft_report(row);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
