#include "graftkd/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "graftkd/checkpoint.hpp"
#include "graftkd/plots.hpp"

namespace graftkd {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config loading
// ---------------------------------------------------------------------------
namespace {

const std::map<std::string, std::set<std::string>> kSchema = {
    {"experiment",
     {"out_dir", "k", "seed_data", "seed_init", "seed_train", "eval_batch", "checkpoint_every"}},
    {"dataset", {"source", "classes", "resolution", "mean", "std", "crop_padding", "flip"}},
    {"teacher",
     {"arch", "width", "epochs", "lr", "batch", "checkpoint", "train", "eval_every"}},
    {"student", {"arch", "width", "init"}},
    {"stage1", {"epochs", "lr", "eval_every"}},
    {"stage2", {"epochs", "lr", "eval_every"}},
    {"baseline", {"enabled", "lr", "epochs", "loss", "kd_temperature"}},
};

const std::map<std::string, std::vector<std::string>> kPrefixSchema = {
    {"stage1", {"lr_unit"}},
    {"stage2", {"lr_depth"}},
};

void parse_unit_lrs(const ConfigFile& f, const std::string& section, const std::string& prefix,
                    std::map<int, double>& out) {
  for (const auto& key : f.keys_with_prefix(section, prefix)) {
    const std::string idx = key.substr(prefix.size());
    try {
      out[std::stoi(idx)] = f.get_double(section, key);
    } catch (const Error&) {
      throw;
    } catch (...) {
      fail("config: malformed per-unit key '" + key + "' in [" + section + "]");
    }
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
  return load(ConfigFile::parse_file(path));
}

ExperimentConfig ExperimentConfig::load(const ConfigFile& f) {
  f.validate(kSchema, kPrefixSchema);
  ExperimentConfig c;
  c.config_text = f.render();

  c.out_dir = f.get_string("experiment", "out_dir", "runs/out");
  c.k_shots = static_cast<int>(f.get_int("experiment", "k", 10));
  require(c.k_shots >= 1, "config: k must be >= 1");
  c.seed_data = static_cast<std::uint64_t>(f.get_int("experiment", "seed_data", 1));
  c.seed_init = static_cast<std::uint64_t>(f.get_int("experiment", "seed_init", 2));
  c.seed_train = static_cast<std::uint64_t>(f.get_int("experiment", "seed_train", 3));
  c.eval_batch = static_cast<int>(f.get_int("experiment", "eval_batch", 256));
  c.checkpoint_every = static_cast<int>(f.get_int("experiment", "checkpoint_every", 1));

  c.dataset_locator = f.get_string("dataset", "source");
  const int classes = static_cast<int>(f.get_int("dataset", "classes", 10));
  const int res = static_cast<int>(f.get_int("dataset", "resolution", 32));
  if (f.has("dataset", "mean")) {
    c.norm.mean = f.get_double_list("dataset", "mean");
    c.norm.stddev = f.get_double_list("dataset", "std");
  } else {
    c.norm.mean = {0.5, 0.5, 0.5};
    c.norm.stddev = {0.25, 0.25, 0.25};
  }
  require(c.norm.mean.size() == c.norm.stddev.size(), "config: mean/std length mismatch");
  c.aug.crop_padding = static_cast<int>(f.get_int("dataset", "crop_padding", 4));
  c.aug.flip = f.get_bool("dataset", "flip", true);

  c.teacher_arch = ArchSpec{f.get_string("teacher", "arch", "toy-cnn-4block"), classes,
                            static_cast<int>(f.get_int("teacher", "width", 16)), 3, {res, res}};
  c.student_arch = ArchSpec{f.get_string("student", "arch", c.teacher_arch.name), classes,
                            static_cast<int>(f.get_int("student", "width", 8)), 3, {res, res}};
  const std::string init = f.get_string("student", "init", "he");
  if (init == "identity") {
    require(c.student_arch.name == c.teacher_arch.name &&
                c.student_arch.width == c.teacher_arch.width,
            "config: identity init requires student arch/width to equal the teacher's");
    c.student_identity_init = true;
  } else {
    require(init == "he", "config: student init must be 'he' or 'identity', got '" + init + "'");
  }
  c.teacher_epochs = static_cast<int>(f.get_int("teacher", "epochs", 12));
  c.teacher_lr = f.get_double("teacher", "lr", 1e-3);
  c.teacher_batch = static_cast<int>(f.get_int("teacher", "batch", 128));
  c.teacher_checkpoint = f.get_string("teacher", "checkpoint", "");
  c.teacher_train_enabled = f.get_bool("teacher", "train", true);

  const int batch = batch_size_for(c.k_shots);
  c.stage1.stage = GraftKind::block_graft;
  c.stage1.epochs_per_unit = static_cast<int>(f.get_int("stage1", "epochs", 100));
  c.stage1.default_base_lr = f.get_double("stage1", "lr", 2.5e-4);
  c.stage1.eval_every = static_cast<int>(f.get_int("stage1", "eval_every", 0));
  c.stage1.batch_size = batch;
  c.stage1.seed = c.seed_train;
  parse_unit_lrs(f, "stage1", "lr_unit", c.stage1.base_lr_per_unit);

  c.stage2.stage = GraftKind::net_graft;
  c.stage2.epochs_per_unit = static_cast<int>(f.get_int("stage2", "epochs", 50));
  c.stage2.default_base_lr = f.get_double("stage2", "lr", 1e-4);
  c.stage2.eval_every = static_cast<int>(f.get_int("stage2", "eval_every", 0));
  c.stage2.batch_size = batch;
  c.stage2.seed = c.seed_train;
  parse_unit_lrs(f, "stage2", "lr_depth", c.stage2.base_lr_per_unit);

  c.baseline_enabled = f.get_bool("baseline", "enabled", false);
  c.baseline_lr = f.get_double("baseline", "lr", c.stage1.default_base_lr);
  c.baseline_epochs = static_cast<int>(f.get_int("baseline", "epochs", 0));
  const std::string loss = f.get_string("baseline", "loss", "normalized");
  if (loss == "normalized") c.baseline_loss = WholeLoss::normalized_logit;
  else if (loss == "kd") c.baseline_loss = WholeLoss::kd;
  else fail("config: baseline loss must be 'normalized' or 'kd', got '" + loss + "'");
  c.baseline_kd_temperature = f.get_double("baseline", "kd_temperature", 4.0);

  // block-count agreement between teacher and student
  {
    auto t = build_network<Real>(c.teacher_arch, 0);
    auto s = build_network<Real>(c.student_arch, 0);
    require(t.block_count() == s.block_count(),
            strf("config: teacher has %d blocks but student has %d; block counts must be equal",
                 t.block_count(), s.block_count()));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Metrics stream
// ---------------------------------------------------------------------------
namespace {

constexpr const char* kMetricsHeader = "phase,unit,epoch,loss,train_acc,test_acc,seconds";

void append_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
  const bool fresh = !fs::exists(path);
  std::ofstream f(path, std::ios::app);
  require(f.good(), "metrics: cannot open " + path);
  if (fresh) f << kMetricsHeader << "\n";
  for (const auto& r : rows) {
    f << r.phase << "," << r.unit << "," << r.epoch << "," << strf("%.10g", r.loss) << ","
      << strf("%.8f", r.train_acc) << "," << strf("%.8f", r.test_acc) << ","
      << strf("%.3f", r.seconds) << "\n";
  }
  require(f.good(), "metrics: write failed " + path);
}

std::vector<MetricsRow> to_metrics(const std::string& phase,
                                   const std::vector<TrainRecord>& records) {
  std::vector<MetricsRow> rows;
  rows.reserve(records.size());
  for (const auto& r : records)
    rows.push_back({phase, r.unit, r.epoch, r.loss, r.train_acc, r.test_acc, r.seconds});
  return rows;
}

}  // namespace

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "metrics: cannot open " + path);
  std::vector<MetricsRow> rows;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    MetricsRow r;
    std::istringstream ss(line);
    std::string field;
    std::getline(ss, r.phase, ',');
    std::getline(ss, field, ',');
    r.unit = std::stoi(field);
    std::getline(ss, field, ',');
    r.epoch = std::stoi(field);
    std::getline(ss, field, ',');
    r.loss = std::stod(field);
    std::getline(ss, field, ',');
    r.train_acc = std::stod(field);
    std::getline(ss, field, ',');
    r.test_acc = std::stod(field);
    std::getline(ss, field, ',');
    r.seconds = std::stod(field);
    rows.push_back(std::move(r));
  }
  return rows;
}

bool metrics_equal_modulo_time(const std::vector<MetricsRow>& a,
                               const std::vector<MetricsRow>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].phase != b[i].phase || a[i].unit != b[i].unit || a[i].epoch != b[i].epoch ||
        a[i].loss != b[i].loss || a[i].train_acc != b[i].train_acc ||
        a[i].test_acc != b[i].test_acc)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoint directories
// ---------------------------------------------------------------------------
namespace {

bool checkpoint_complete(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) return false;
  std::ifstream f(mpath);
  json j;
  f >> j;
  return j.value("complete", false);
}

void write_checkpoint_manifest(const fs::path& dir, json j) {
  j["complete"] = true;
  j["version"] = kVersion;
  std::ofstream f(dir / "manifest.json");
  f << j.dump(2) << "\n";
  require(f.good(), "checkpoint: manifest write failed in " + dir.string());
}

void save_network_checkpoint(const fs::path& dir, BlockwiseNetwork<Real>& net,
                             const ArchSpec& spec) {
  fs::create_directories(dir);
  // one archive per block plus the head, keyed by hierarchical names
  for (int i = 0; i < net.block_count(); ++i) {
    const std::string prefix = "b" + std::to_string(i + 1);
    save_state<Real>((dir / (prefix + ".tns")).string(), net.blocks[i], prefix);
  }
  if (net.head) save_state<Real>((dir / "head.tns").string(), *net.head, "head");
  json j{{"kind", "network"},
         {"arch", spec.name},
         {"width", spec.width},
         {"classes", spec.classes},
         {"resolution", spec.resolution.first},
         {"blocks", net.block_count()},
         {"params", count_params(net)}};
  write_checkpoint_manifest(dir, std::move(j));
}

void load_network_checkpoint(const fs::path& dir, BlockwiseNetwork<Real>& net) {
  for (int i = 0; i < net.block_count(); ++i) {
    const std::string prefix = "b" + std::to_string(i + 1);
    load_state<Real>((dir / (prefix + ".tns")).string(), net.blocks[i], prefix);
  }
  if (net.head) load_state<Real>((dir / "head.tns").string(), *net.head, "head");
}

void save_scion_checkpoint(const fs::path& dir, std::vector<WrappedScion<Real>>& scions,
                           int lo, int hi, GraftKind kind, int unit) {
  fs::create_directories(dir);
  json shapes = json::array();
  for (int l = lo; l <= hi; ++l) {
    WrappedScion<Real>& s = scions[static_cast<size_t>(l - 1)];
    const std::string prefix = "scion" + std::to_string(l);
    save_state<Real>((dir / (prefix + ".tns")).string(), s, prefix);
    json sh{{"index", l}};
    if (s.pre) sh["pre"] = {s.pre->out_channels(), s.pre->in_channels()};
    if (s.post) sh["post"] = {s.post->out_channels(), s.post->in_channels()};
    shapes.push_back(std::move(sh));
  }
  json j{{"kind", kind == GraftKind::block_graft ? "block_graft" : "net_graft"},
         {"unit", unit},
         {"first", lo},
         {"last", hi},
         {"adaption_shapes", std::move(shapes)}};
  write_checkpoint_manifest(dir, std::move(j));
}

void load_scion_checkpoint(const fs::path& dir, std::vector<WrappedScion<Real>>& scions, int lo,
                           int hi) {
  for (int l = lo; l <= hi; ++l) {
    const std::string prefix = "scion" + std::to_string(l);
    load_state<Real>((dir / (prefix + ".tns")).string(), scions[static_cast<size_t>(l - 1)],
                     prefix);
  }
}

json conventions_json(const ExperimentConfig& cfg) {
  return json{
      {"flop_convention", kFlopConvention},
      {"loss_mean_order", "per-sample (1/N)*||.||^2 with N = class count, then batch mean"},
      {"logit_normalization", "z / ||z||_2, degenerate below 1e-12"},
      {"train_acc_semantics", "argmax agreement with the teacher on the unlabeled shot set"},
      {"teacher_mode", "teacher blocks frozen: running statistics, no gradient application"},
      {"student_bn", "scion batch-norm updates running statistics during training"},
      {"sampling", "K per class, uniform without replacement, labels stripped"},
      {"crop_padding", cfg.aug.crop_padding},
      {"flip", cfg.aug.flip},
      {"normalization_mean", cfg.norm.mean},
      {"normalization_std", cfg.norm.stddev},
      {"optimizer", "adam(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0), fresh per unit"},
      {"lr_scaling", "base_lr * batch_size / 64"},
      {"batch_rule", "floor(64*K/10), clamped at 1"},
      {"argmax_tie_break", "lowest index"},
      {"adaption", "bias-free pointwise (1x1) channel map, no normalization or activation"},
      {"block_boundaries", "fixed at downsampling transitions"},
      {"head", "classifier folded into block L for grafting and finalization"},
      {"eval_mode", "all evaluation runs frozen (batch-norm running statistics)"},
      {"metrics_seconds", "wall clock, excluded from determinism guarantees"},
  };
}

struct RunManifestFile {
  fs::path path;
  json j;

  void write() const {
    std::ofstream f(path);
    f << j.dump(2) << "\n";
    require(f.good(), "manifest: write failed " + path.string());
  }
};

class UnitBudget {
 public:
  explicit UnitBudget(int max_units) : max_units_(max_units) {}
  // returns true if the run should pause after this unit
  bool unit_done() { return max_units_ >= 0 && ++done_ >= max_units_; }

 private:
  int max_units_;
  int done_ = 0;
};

}  // namespace

// ---------------------------------------------------------------------------
// Teacher pre-training
// ---------------------------------------------------------------------------
namespace {

fs::path teacher_dir_for(const ExperimentConfig& cfg) {
  return cfg.teacher_checkpoint.empty() ? fs::path(cfg.out_dir) / "checkpoints" / "teacher"
                                        : fs::path(cfg.teacher_checkpoint);
}

// Trains (or loads) the teacher and returns (network, test accuracy, fresh).
std::tuple<BlockwiseNetwork<Real>, double, bool> obtain_teacher(
    const ExperimentConfig& cfg, const LabeledDataset<Real>& train,
    const LabeledDataset<Real>& test, std::vector<MetricsRow>* metrics_out) {
  const fs::path dir = teacher_dir_for(cfg);
  BlockwiseNetwork<Real> teacher =
      build_network<Real>(cfg.teacher_arch, mix_seed(cfg.seed_init, {0x7EAu}));
  if (checkpoint_complete(dir)) {
    load_network_checkpoint(dir, teacher);
    return {std::move(teacher), evaluate(teacher, test, cfg.norm, cfg.eval_batch).top1, false};
  }
  require(cfg.teacher_train_enabled,
          "teacher checkpoint not found at " + dir.string() + " and teacher training is disabled");

  std::vector<ParamRef<Real>> params;
  teacher.visit_params("teacher", [&](const std::string& name, MatrixX<Real>& m) {
    params.push_back({name, &m});
  });
  std::vector<MatrixX<Real>> grads(params.size());
  GradLookup<Real> gl;
  for (size_t i = 0; i < params.size(); ++i) {
    grads[i] = MatrixX<Real>::Zero(params[i].value->rows(), params[i].value->cols());
    gl.add(*params[i].value, &grads[i]);
  }
  Adam<Real> adam(cfg.teacher_lr);
  LabeledLoader<Real> loader(train, cfg.teacher_batch, mix_seed(cfg.seed_train, {0x7EAu}),
                             cfg.aug, cfg.norm, /*augment_on=*/true);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<MetricsRow> rows;
  double last_acc = 0.0;
  for (int epoch = 1; epoch <= cfg.teacher_epochs; ++epoch) {
    double epoch_loss = 0.0;
    long correct = 0;
    for (const auto& idx : loader.epoch_batches(epoch)) {
      auto [x, labels] = loader.load_batch(idx, epoch);
      std::vector<typename Block<Real>::Cache> caches(teacher.blocks.size() + 1);
      Tensor<Real> cur = x;
      size_t ci = 0;
      for (auto& b : teacher.blocks) cur = b.forward(cur, true, &caches[ci++]);
      cur = teacher.head->forward(cur, true, &caches[ci]);
      auto [loss, dz] = softmax_ce_loss_grad(cur.data, labels);
      require(std::isfinite(loss), "teacher training diverged (non-finite loss)");
      for (Eigen::Index b = 0; b < cur.data.cols(); ++b) {
        const VectorX<Real> col = cur.data.col(b);
        if (argmax_lowest<Real>(col) == labels[static_cast<size_t>(b)]) ++correct;
      }
      Tensor<Real> dzt(cur.c, cur.h, cur.w, cur.batch());
      dzt.data = std::move(dz);
      for (auto& g : grads) g.setZero();
      Tensor<Real> dcur = teacher.head->backward(dzt, caches[teacher.blocks.size()], gl, true);
      for (size_t bi = teacher.blocks.size(); bi-- > 0;)
        dcur = teacher.blocks[bi].backward(dcur, caches[bi], gl, bi > 0);
      adam.step(params, grads);
      epoch_loss += loss * static_cast<double>(idx.size());
    }
    epoch_loss /= static_cast<double>(train.size());
    const int cadence = 4;
    if (epoch == cfg.teacher_epochs || epoch % cadence == 0) {
      last_acc = evaluate(teacher, test, cfg.norm, cfg.eval_batch).top1;
      rows.push_back({"teacher", 0, epoch, epoch_loss,
                      static_cast<double>(correct) / static_cast<double>(train.size()), last_acc,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    }
  }
  save_network_checkpoint(dir, teacher, cfg.teacher_arch);
  if (metrics_out) *metrics_out = std::move(rows);
  return {std::move(teacher), last_acc, true};
}

}  // namespace

double train_teacher(const ExperimentConfig& cfg, bool resume) {
  fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");
  const fs::path dir = teacher_dir_for(cfg);
  if (!resume && checkpoint_complete(dir))
    fail("teacher checkpoint already exists at " + dir.string() + "; pass --resume to reuse it");
  auto [train, test] = load_source<Real>(cfg.dataset_locator);
  std::vector<MetricsRow> rows;
  auto [teacher, acc, fresh] = obtain_teacher(cfg, train, test, &rows);
  if (fresh && !rows.empty())
    append_metrics((fs::path(cfg.out_dir) / "metrics.csv").string(), rows);
  return acc;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------
PipelineResult run_pipeline(const ExperimentConfig& cfg, bool resume, PipelinePhase until,
                            int max_units) {
  const fs::path out(cfg.out_dir);
  const fs::path ckroot = out / "checkpoints";
  const fs::path manifest_path = out / "manifest.json";
  if (!resume && fs::exists(manifest_path))
    fail("run directory already has a manifest: " + manifest_path.string() +
         "; pass --resume or choose a fresh --out");
  fs::create_directories(ckroot);
  {
    std::ofstream snap(out / "config.snapshot.ini");
    snap << cfg.config_text;
  }

  RunManifestFile manifest{manifest_path, json{}};
  manifest.j["version"] = kVersion;
  manifest.j["status"] = "running";
  manifest.j["config"] = cfg.config_text;
  manifest.j["conventions"] = conventions_json(cfg);
  manifest.j["k"] = cfg.k_shots;
  manifest.j["seeds"] = {{"data", cfg.seed_data}, {"init", cfg.seed_init}, {"train", cfg.seed_train}};
  manifest.j["dataset"] = {{"locator", cfg.dataset_locator}};
  manifest.write();

  auto pause = [&](const std::string& at) -> PipelineResult {
    manifest.j["status"] = "paused";
    manifest.j["paused_after"] = at;
    manifest.write();
    PipelineResult r;
    r.complete = false;
    r.run_dir = cfg.out_dir;
    return r;
  };

  try {
    UnitBudget budget(max_units);
    const std::string metrics_path = (out / "metrics.csv").string();

    // data
    auto [train, test] = load_source<Real>(cfg.dataset_locator);
    manifest.j["dataset"]["train_size"] = train.size();
    manifest.j["dataset"]["test_size"] = test.size();
    manifest.j["dataset"]["classes"] = train.n_classes;

    // teacher
    std::vector<MetricsRow> teacher_rows;
    auto [teacher, teacher_acc, teacher_fresh] = obtain_teacher(cfg, train, test, &teacher_rows);
    manifest.j["checkpoints"]["teacher"] = teacher_dir_for(cfg).string();
    manifest.j["metrics"]["teacher_top1"] = teacher_acc;
    manifest.write();
    if (teacher_fresh) {
      append_metrics(metrics_path, teacher_rows);
      if (budget.unit_done()) return pause("teacher");
    }
    PipelineResult result;
    result.run_dir = cfg.out_dir;
    result.teacher_top1 = teacher_acc;
    if (until == PipelinePhase::teacher) {
      manifest.j["status"] = "complete";
      manifest.write();
      result.complete = true;
      return result;
    }

    // K-shot sampling (derived deterministically from seed_data)
    const FewShotDataset<Real> shots = sample_kshot(train, cfg.k_shots, cfg.seed_data);
    manifest.j["few_shot"] = {{"k", cfg.k_shots}, {"size", shots.size()},
                              {"source_indices", shots.source_indices}};
    manifest.write();

    // student + scion initialization (pure functions of seed_init)
    const auto teacher_blocks = decompose(teacher);
    std::vector<BoundarySignature> teacher_sigs;
    for (const auto& b : teacher_blocks) teacher_sigs.push_back(b.sig);
    BlockwiseNetwork<Real> student_spec =
        build_network<Real>(cfg.student_arch, mix_seed(cfg.seed_init, {0x57Du}));
    std::vector<WrappedScion<Real>> scions;
    if (cfg.student_identity_init) {
      scions = wrap_identity(teacher);
      student_spec = teacher;
      student_spec.arch_name = cfg.student_arch.name;
    } else {
      scions = wrap_student(student_spec, teacher_sigs, mix_seed(cfg.seed_init, {0xADAu}));
    }
    const int L = static_cast<int>(scions.size());

    DistillContext<Real> ctx;
    ctx.shots = &shots;
    ctx.aug = cfg.aug;
    ctx.norm = cfg.norm;
    ctx.test_set = &test;

    // stage 1
    for (int l = 1; l <= L; ++l) {
      const fs::path dir = ckroot / ("stage1_block" + std::to_string(l));
      if (checkpoint_complete(dir)) {
        load_scion_checkpoint(dir, scions, l, l);
        continue;
      }
      auto records = train_stage1_unit(teacher, scions[static_cast<size_t>(l - 1)], ctx, cfg.stage1);
      save_scion_checkpoint(dir, scions, l, l, GraftKind::block_graft, l);
      append_metrics(metrics_path, to_metrics("stage1", records));
      manifest.j["checkpoints"]["stage1"][std::to_string(l)] = dir.string();
      manifest.write();
      if (budget.unit_done()) return pause("stage1_block" + std::to_string(l));
    }
    if (until == PipelinePhase::stage1) {
      manifest.j["status"] = "complete";
      manifest.write();
      result.complete = true;
      return result;
    }

    // stage 2 (depth checkpoint carries scions 1..depth)
    for (int depth = 2; depth <= L; ++depth) {
      const fs::path dir = ckroot / ("stage2_depth" + std::to_string(depth));
      if (checkpoint_complete(dir)) {
        load_scion_checkpoint(dir, scions, 1, depth);
        continue;
      }
      auto records = train_stage2_depth(teacher, scions, depth, ctx, cfg.stage2);
      save_scion_checkpoint(dir, scions, 1, depth, GraftKind::net_graft, depth);
      append_metrics(metrics_path, to_metrics("stage2", records));
      manifest.j["checkpoints"]["stage2"][std::to_string(depth)] = dir.string();
      manifest.write();
      if (budget.unit_done()) return pause("stage2_depth" + std::to_string(depth));
    }
    if (until == PipelinePhase::stage2) {
      manifest.j["status"] = "complete";
      manifest.write();
      result.complete = true;
      return result;
    }

    // finalize: merge adaptions away
    BlockwiseNetwork<Real> merged = finalize_student(scions, student_spec);
    const fs::path student_dir = ckroot / "student";
    save_network_checkpoint(student_dir, merged, cfg.student_arch);
    manifest.j["checkpoints"]["student"] = student_dir.string();
    manifest.j["student_params"] = count_params(merged);
    manifest.write();
    if (until == PipelinePhase::finalize) {
      manifest.j["status"] = "complete";
      manifest.write();
      result.complete = true;
      return result;
    }

    // optional whole-network distillation baseline under the matched budget
    if (cfg.baseline_enabled) {
      const fs::path dir = ckroot / "baseline";
      BlockwiseNetwork<Real> baseline_student =
          build_network<Real>(cfg.student_arch, mix_seed(cfg.seed_init, {0x57Du}));
      if (checkpoint_complete(dir)) {
        load_network_checkpoint(dir, baseline_student);
      } else {
        StageConfig bcfg = cfg.stage1;
        bcfg.default_base_lr = cfg.baseline_lr;
        bcfg.base_lr_per_unit.clear();
        auto records = train_whole_student(teacher, baseline_student, ctx, bcfg,
                                           cfg.effective_baseline_epochs(L), cfg.baseline_loss,
                                           cfg.baseline_kd_temperature);
        save_network_checkpoint(dir, baseline_student, cfg.student_arch);
        append_metrics(metrics_path, to_metrics("baseline", records));
        manifest.j["checkpoints"]["baseline"] = dir.string();
        manifest.write();
        if (budget.unit_done()) return pause("baseline");
      }
      result.baseline_top1 = evaluate(baseline_student, test, cfg.norm, cfg.eval_batch).top1;
      manifest.j["metrics"]["baseline_top1"] = *result.baseline_top1;
    }

    const EvalResult ev = evaluate(merged, test, cfg.norm, cfg.eval_batch);
    result.final_top1 = ev.top1;
    result.final_top5 = ev.top5;
    result.complete = true;
    manifest.j["metrics"]["final_top1"] = ev.top1;
    if (ev.top5) manifest.j["metrics"]["final_top5"] = *ev.top5;
    manifest.j["status"] = "complete";
    manifest.write();
    return result;
  } catch (const std::exception& e) {
    manifest.j["status"] = std::string("failed: ") + e.what();
    manifest.write();
    throw;
  }
}

// ---------------------------------------------------------------------------
// Partial network grafting report
// ---------------------------------------------------------------------------
PartialGraftReportRow partial_graft_report(const ExperimentConfig& cfg, int block, bool resume) {
  auto [train, test] = load_source<Real>(cfg.dataset_locator);
  std::vector<MetricsRow> teacher_rows;
  auto [teacher, teacher_acc, teacher_fresh] = obtain_teacher(cfg, train, test, &teacher_rows);
  (void)teacher_fresh;
  const auto teacher_blocks = decompose(teacher);
  const int L = static_cast<int>(teacher_blocks.size());
  require(block >= 1 && block <= L, strf("partial-graft: block %d outside 1..%d", block, L));
  std::vector<BoundarySignature> teacher_sigs;
  for (const auto& b : teacher_blocks) teacher_sigs.push_back(b.sig);

  BlockwiseNetwork<Real> student_spec =
      build_network<Real>(cfg.student_arch, mix_seed(cfg.seed_init, {0x57Du}));
  std::vector<WrappedScion<Real>> scions =
      cfg.student_identity_init ? wrap_identity(teacher)
                                : wrap_student(student_spec, teacher_sigs,
                                               mix_seed(cfg.seed_init, {0xADAu}));

  const fs::path dir = fs::path(cfg.out_dir) / "checkpoints" / ("stage1_block" + std::to_string(block));
  if (resume && checkpoint_complete(dir)) {
    load_scion_checkpoint(dir, scions, block, block);
  } else {
    const FewShotDataset<Real> shots = sample_kshot(train, cfg.k_shots, cfg.seed_data);
    DistillContext<Real> ctx;
    ctx.shots = &shots;
    ctx.aug = cfg.aug;
    ctx.norm = cfg.norm;
    ctx.test_set = nullptr;
    train_stage1_unit(teacher, scions[static_cast<size_t>(block - 1)], ctx, cfg.stage1);
    save_scion_checkpoint(dir, scions, block, block, GraftKind::block_graft, block);
  }

  GraftedModel<Real> hybrid = graft_block(teacher, scions[static_cast<size_t>(block - 1)]);
  const WrappedScion<Real>& s = scions[static_cast<size_t>(block - 1)];
  PartialGraftReportRow row;
  row.block = block;
  row.params_before = count_params(teacher_blocks[static_cast<size_t>(block - 1)]);
  // deployable form: square adaptions fold away exactly (into the scion's
  // first conv / the next block's first conv), only channel-changing ones
  // stay as 1x1 overhead
  row.params_after = count_params(s.core);
  if (s.pre && s.pre->in_channels() != s.pre->out_channels())
    row.params_after += s.pre->weight.size();
  if (s.post && s.post->in_channels() != s.post->out_channels())
    row.params_after += s.post->weight.size();
  row.pct_reduction = 100.0 * static_cast<double>(row.params_before - row.params_after) /
                      static_cast<double>(row.params_before);
  row.teacher_acc = teacher_acc;
  row.hybrid_acc = evaluate(hybrid, test, cfg.norm, cfg.eval_batch).top1;
  return row;
}

std::string format_partial_graft_report(const PartialGraftReportRow& r) {
  std::ostringstream out;
  out << "partial network grafting report\n";
  out << strf("%-8s %-24s %-12s %-10s\n", "block", "params", "reduction", "accuracy");
  out << strf("%-8s %-24s %-12s %-10s\n", "original", "/",
              "/", strf("%.4f", r.teacher_acc).c_str());
  out << strf("%-8d %-24s %-12s %-10s\n", r.block,
              strf("%lld->%lld", r.params_before, r.params_after).c_str(),
              strf("%.1f%%↓", r.pct_reduction).c_str(), strf("%.4f", r.hybrid_acc).c_str());
  return out.str();
}

// ---------------------------------------------------------------------------
// Checkpoint evaluation
// ---------------------------------------------------------------------------
EvalResult evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& checkpoint_dir) {
  const fs::path dir(checkpoint_dir);
  require(checkpoint_complete(dir), "eval: no complete checkpoint at " + checkpoint_dir);
  std::ifstream mf(dir / "manifest.json");
  json j;
  mf >> j;
  require(j.value("kind", "") == std::string("network"),
          "eval: checkpoint is not a standalone network: " + checkpoint_dir);
  ArchSpec spec;
  spec.name = j.at("arch").get<std::string>();
  spec.width = j.at("width").get<int>();
  spec.classes = j.at("classes").get<int>();
  const int res = j.value("resolution", cfg.teacher_arch.resolution.first);
  spec.resolution = {res, res};
  BlockwiseNetwork<Real> net = build_network<Real>(spec, 0);
  load_network_checkpoint(dir, net);
  auto [train, test] = load_source<Real>(cfg.dataset_locator);
  (void)train;
  return evaluate(net, test, cfg.norm, cfg.eval_batch);
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------
std::vector<std::string> emit_plots(const std::string& run_dir) {
  const fs::path dir(run_dir);
  std::vector<std::string> written;
  const fs::path metrics_path = dir / "metrics.csv";
  if (fs::exists(metrics_path)) {
    auto rows = read_metrics(metrics_path.string());
    require(!rows.empty(), "plot: metrics file is empty: " + metrics_path.string());
    fs::create_directories(dir / "plots");
    std::map<std::pair<std::string, int>, std::vector<MetricsRow>> groups;
    for (const auto& r : rows) groups[{r.phase, r.unit}].push_back(r);
    for (const auto& [key, g] : groups) {
      PlotSeries tr{"train", {}, {}, {}}, te{"test", {}, {}, {}};
      for (const auto& r : g) {
        tr.x.push_back(r.epoch);
        tr.y.push_back(r.train_acc);
        te.x.push_back(r.epoch);
        te.y.push_back(r.test_acc);
      }
      const std::string name = key.first + (key.second > 0 ? "_unit" + std::to_string(key.second) : "");
      const std::string path = (dir / "plots" / ("curve_" + name + ".svg")).string();
      write_svg_chart(path, "training curve: " + name, "epoch", "accuracy", {tr, te});
      written.push_back(path);
    }
    return written;
  }
  // sweep mode: aggregate final accuracy by K across run subdirectories
  std::map<int, std::vector<double>> grafted, baseline;
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& sub : subdirs) {
    std::ifstream f(sub / "manifest.json");
    json j;
    f >> j;
    if (!j.contains("metrics") || !j["metrics"].contains("final_top1")) continue;
    const int k = j.value("k", 0);
    grafted[k].push_back(j["metrics"]["final_top1"].get<double>());
    if (j["metrics"].contains("baseline_top1"))
      baseline[k].push_back(j["metrics"]["baseline_top1"].get<double>());
  }
  require(!grafted.empty(),
          "plot: no metrics.csv and no finished run subdirectories in " + run_dir);
  auto to_series = [](const std::map<int, std::vector<double>>& by_k, const std::string& label) {
    PlotSeries s{label, {}, {}, {}};
    for (const auto& [k, accs] : by_k) {
      double mean = 0.0;
      for (double a : accs) mean += a;
      mean /= static_cast<double>(accs.size());
      double var = 0.0;
      for (double a : accs) var += (a - mean) * (a - mean);
      const double sd = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
      s.x.push_back(k);
      s.y.push_back(mean);
      s.yerr.push_back(sd);
    }
    return s;
  };
  std::vector<PlotSeries> series{to_series(grafted, "grafted student")};
  if (!baseline.empty()) series.push_back(to_series(baseline, "whole-net distill"));
  fs::create_directories(dir / "plots");
  const std::string path = (dir / "plots" / "accuracy_vs_k.svg").string();
  write_svg_chart(path, "final accuracy vs shots per class", "K (shots per class)",
                  "top-1 accuracy", series);
  written.push_back(path);
  return written;
}

}  // namespace graftkd
