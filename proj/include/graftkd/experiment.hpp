#pragma once

#include <optional>
#include <string>

#include "graftkd/config.hpp"
#include "graftkd/distill.hpp"
#include "graftkd/synth.hpp"

namespace graftkd {

inline constexpr const char* kVersion = "0.1.0";

// Production scalar type. The templated core also instantiates with double
// in the test suites.
using Real = float;

// Fully resolved experiment description. Every random choice in a run is
// traceable to the three seeds.
struct ExperimentConfig {
  ArchSpec teacher_arch;
  ArchSpec student_arch;

  std::string dataset_locator;
  Normalization norm;
  AugmentConfig aug;

  int k_shots = 10;
  std::uint64_t seed_data = 1, seed_init = 2, seed_train = 3;

  StageConfig stage1;
  StageConfig stage2;

  // Scion initialization: He by default; "identity" copies teacher blocks
  // with identity adaptions (requires student arch == teacher arch).
  bool student_identity_init = false;

  bool teacher_train_enabled = true;
  std::string teacher_checkpoint;  // reuse when non-empty
  int teacher_epochs = 12;
  double teacher_lr = 1e-3;
  int teacher_batch = 128;

  bool baseline_enabled = false;
  double baseline_lr = 2.5e-4;
  int baseline_epochs = 0;  // 0 = match the grafting pipeline's total epochs
  WholeLoss baseline_loss = WholeLoss::normalized_logit;
  double baseline_kd_temperature = 4.0;

  std::string out_dir = "runs/out";
  int checkpoint_every = 1;
  int eval_batch = 256;

  std::string config_text;  // canonical snapshot for the manifest

  static ExperimentConfig load(const ConfigFile& file);
  static ExperimentConfig load_file(const std::string& path);

  int total_stage_epochs(int blocks) const {
    return blocks * stage1.epochs_per_unit + (blocks - 1) * stage2.epochs_per_unit;
  }
  int effective_baseline_epochs(int blocks) const {
    return baseline_epochs > 0 ? baseline_epochs : total_stage_epochs(blocks);
  }
};

// How far the pipeline runs. Each phase subsumes the previous ones and is
// resume-aware through the per-unit checkpoints.
enum class PipelinePhase { teacher, stage1, stage2, finalize, all };

struct PipelineResult {
  bool complete = false;  // false when paused by max_units
  double teacher_top1 = 0.0;
  double final_top1 = 0.0;
  std::optional<double> final_top5;
  std::optional<double> baseline_top1;
  std::string run_dir;
};

// Executes sample -> stage1 -> stage2 -> finalize -> evaluate with unit-level
// checkpointing. `resume` skips completed units; `max_units` (testing hook)
// pauses the run after that many units have completed in this invocation.
PipelineResult run_pipeline(const ExperimentConfig& cfg, bool resume,
                            PipelinePhase until = PipelinePhase::all, int max_units = -1);

// Cross-entropy pre-training of the teacher; writes checkpoints/teacher.
// Returns its test accuracy.
double train_teacher(const ExperimentConfig& cfg, bool resume);

struct PartialGraftReportRow {
  int block = 0;
  long long params_before = 0;
  long long params_after = 0;
  double pct_reduction = 0.0;  // 100*(before-after)/before
  double teacher_acc = 0.0;
  double hybrid_acc = 0.0;
};

// Trains (or loads) the scion for block l, evaluates the hybrid T_l^B and
// formats a per-block parameter/accuracy table.
PartialGraftReportRow partial_graft_report(const ExperimentConfig& cfg, int block, bool resume);
std::string format_partial_graft_report(const PartialGraftReportRow& row);

// Evaluates a network checkpoint directory on the configured test split.
EvalResult evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& checkpoint_dir);

// Emits SVG training curves for a run directory, or an accuracy-vs-K summary
// (mean +/- std across seeds) when the directory contains multiple runs.
std::vector<std::string> emit_plots(const std::string& run_dir);

// Metrics stream row (append-only, delimiter-separated).
struct MetricsRow {
  std::string phase;  // teacher | stage1 | stage2 | baseline
  int unit = 0;
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double seconds = 0.0;
};

std::vector<MetricsRow> read_metrics(const std::string& path);

// Field-wise equality ignoring the wall-clock column.
bool metrics_equal_modulo_time(const std::vector<MetricsRow>& a, const std::vector<MetricsRow>& b);

}  // namespace graftkd
