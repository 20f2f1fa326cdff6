#include "graftkd/verify.hpp"

#include <cmath>
#include <functional>
#include <iostream>

#include "graftkd/checkpoint.hpp"
#include "graftkd/distill.hpp"
#include "graftkd/synth.hpp"

namespace graftkd {

namespace {

using R = float;

Tensor<R> random_input(int c, int h, int w, int batch, std::uint64_t seed) {
  Tensor<R> x(c, h, w, batch);
  Rng rng(seed);
  for (Eigen::Index j = 0; j < x.data.cols(); ++j)
    for (Eigen::Index i = 0; i < x.data.rows(); ++i)
      x.data(i, j) = static_cast<R>(rng.normal());
  return x;
}

// Applies a channel map to every spatial position, independent of the
// adaption/fold code paths.
Tensor<R> apply_channel_map(const MatrixX<R>& M, const Tensor<R>& x) {
  Tensor<R> out(static_cast<int>(M.rows()), x.h, x.w, x.batch());
  for (Eigen::Index b = 0; b < x.batch(); ++b) out.plane(b) = M * x.cplane(b);
  return out;
}

MatrixX<R> random_square(int n, std::uint64_t seed) {
  MatrixX<R> m(n, n);
  Rng rng(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(n));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<R>(rng.normal(0.0, s));
  return m;
}

bool check(std::ostream& out, const std::string& name, bool ok, const std::string& detail) {
  out << (ok ? "[ ok ] " : "[FAIL] ") << name << ": " << detail << "\n";
  return ok;
}

bool verify_fold(std::ostream& out) {
  double worst = 0.0;
  for (int trial = 0; trial < 6; ++trial) {
    Rng rng(mix_seed(900, {static_cast<std::uint64_t>(trial)}));
    const int ch = 8 + 4 * (trial % 3);
    Block<R> block;
    block.layers.push_back(Conv2d<R>::make(ch, 16, 3, 1, 1, true, rng));
    block.layers.push_back(BatchNorm2d<R>::make(16));
    block.layers.push_back(ReLU<R>{});
    block.sig = {ch, 16, 1, {8, 8}};
    const MatrixX<R> M = random_square(ch, mix_seed(901, {static_cast<std::uint64_t>(trial)}));
    const Block<R> folded = fold_into_conv(block, M);
    const Tensor<R> x = random_input(ch, 8, 8, 20, mix_seed(902, {static_cast<std::uint64_t>(trial)}));
    const Tensor<R> lhs = folded.eval(x);
    const Tensor<R> rhs = block.eval(apply_channel_map(M, x));
    worst = std::max(worst, static_cast<double>((lhs.data - rhs.data).cwiseAbs().maxCoeff()));
  }
  return check(out, "fold exactness", worst <= 1e-4, strf("max |diff| = %.3g", worst));
}

bool verify_finalize(std::ostream& out) {
  const ArchSpec tspec{"toy-cnn-4block", 10, 8, 3, {32, 32}};
  const ArchSpec sspec{"toy-cnn-4block", 10, 4, 3, {32, 32}};
  double worst = 0.0;
  bool params_ok = true;
  for (int trial = 0; trial < 2; ++trial) {
    auto teacher = build_network<R>(tspec, 10 + trial);
    auto student = build_network<R>(sspec, 20 + trial);
    auto blocks = decompose(teacher);
    std::vector<BoundarySignature> sigs;
    for (auto& b : blocks) sigs.push_back(b.sig);
    auto scions = wrap_student(student, sigs, 30 + trial);
    auto prefix = graft_prefix(teacher, scions);
    auto merged = finalize_student(scions, student);
    params_ok = params_ok && count_params(merged) == count_params(student);
    const Tensor<R> x = random_input(3, 32, 32, 30, 40 + trial);
    worst = std::max(worst, static_cast<double>(
                                (merged.logits(x) - prefix.logits(x)).cwiseAbs().maxCoeff()));
  }
  return check(out, "finalization equivalence", worst <= 1e-4 && params_ok,
               strf("max |logit diff| = %.3g, params %s", worst,
                    params_ok ? "conserved" : "CHANGED"));
}

bool verify_identity(std::ostream& out) {
  const ArchSpec tspec{"toy-cnn-4block", 10, 8, 3, {32, 32}};
  auto teacher = build_network<R>(tspec, 5);
  const Tensor<R> x = random_input(3, 32, 32, 8, 6);
  const MatrixX<R> zt = teacher.logits(x);
  auto scions = wrap_identity(teacher);
  bool ok = true;
  for (const auto& s : scions) {
    auto tb = graft_block(teacher, s);
    ok = ok && (tb.logits(x).array() == zt.array()).all();
  }
  for (int depth = 1; depth <= static_cast<int>(scions.size()); ++depth) {
    std::vector<WrappedScion<R>> prefix(scions.begin(), scions.begin() + depth);
    ok = ok && (graft_prefix(teacher, prefix).logits(x).array() == zt.array()).all();
  }
  auto merged = finalize_student(scions, teacher);
  ok = ok && (merged.logits(x).array() == zt.array()).all();
  return check(out, "identity-graft transparency", ok,
               ok ? "all composites bitwise equal to teacher" : "output diverged");
}

bool verify_loss(std::ostream& out) {
  const int N = 10, B = 4;
  Rng rng(77);
  MatrixX<double> zg(N, B), zt(N, B);
  for (Eigen::Index j = 0; j < B; ++j)
    for (Eigen::Index i = 0; i < N; ++i) {
      zg(i, j) = rng.normal();
      zt(i, j) = rng.normal();
    }
  const double base = graft_loss(zg, zt, N);
  double worst_rel = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    const double a = 0.01 + 10.0 * rng.uniform01();
    const double b = 0.01 + 10.0 * rng.uniform01();
    const double scaled = graft_loss(MatrixX<double>(a * zg), MatrixX<double>(b * zt), N);
    worst_rel = std::max(worst_rel, std::abs(scaled - base) / base);
  }
  // bounds via construction
  MatrixX<double> u = zg.col(0).normalized();
  const double eq = graft_loss(u, u, N);
  const double anti = graft_loss(u, MatrixX<double>(-u), N);
  bool bounds_ok = eq == 0.0 && std::abs(anti - 4.0 / N) <= 1e-6;
  // analytic gradient vs central differences
  auto [l0, grad] = graft_loss_grad(zg, zt, N);
  (void)l0;
  double worst_grad = 0.0;
  const double h = 1e-6;
  for (int t = 0; t < 20; ++t) {
    const int i = rng.uniform_int(N), j = rng.uniform_int(B);
    MatrixX<double> zp = zg, zm = zg;
    zp(i, j) += h;
    zm(i, j) -= h;
    const double fd = (graft_loss(zp, zt, N) - graft_loss(zm, zt, N)) / (2 * h);
    const double denom = std::max(std::abs(fd), 1e-12);
    worst_grad = std::max(worst_grad, std::abs(fd - grad(i, j)) / denom);
  }
  const bool ok = worst_rel <= 1e-6 && bounds_ok && worst_grad <= 1e-3;
  return check(out, "loss properties", ok,
               strf("scale-inv rel %.2g, bounds %s, grad rel %.2g", worst_rel,
                    bounds_ok ? "ok" : "FAIL", worst_grad));
}

bool verify_freezing(std::ostream& out) {
  const ArchSpec tspec{"toy-cnn-4block", 10, 4, 3, {32, 32}};
  const ArchSpec sspec{"toy-cnn-4block", 10, 2, 3, {32, 32}};
  auto teacher = build_network<R>(tspec, 1);
  auto student = build_network<R>(sspec, 2);
  auto blocks = decompose(teacher);
  std::vector<BoundarySignature> sigs;
  for (auto& b : blocks) sigs.push_back(b.sig);
  auto scions = wrap_student(student, sigs, 3);

  SynthSpec synth;
  synth.n_train = 60;
  synth.n_test = 0;
  auto train = generate_synth_split<R>(synth, 60, 0xA11u);
  auto shots = sample_kshot(train, 2, 11);
  DistillContext<R> ctx;
  ctx.shots = &shots;
  ctx.norm = {{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};
  StageConfig cfg;
  cfg.stage = GraftKind::block_graft;
  cfg.epochs_per_unit = 2;
  cfg.batch_size = 10;
  cfg.seed = 9;

  auto teacher_before = snapshot_state<R>(teacher, "t");
  auto scion3_before = snapshot_state<R>(scions[2], "s3");
  train_stage1_unit(teacher, scions[1], ctx, cfg);
  StageConfig cfg2 = cfg;
  cfg2.stage = GraftKind::net_graft;
  train_stage2_depth(teacher, scions, 2, ctx, cfg2);
  auto teacher_after = snapshot_state<R>(teacher, "t");
  auto scion3_after = snapshot_state<R>(scions[2], "s3");
  std::string diff;
  const bool teacher_ok = snapshots_bitwise_equal(teacher_before, teacher_after, &diff);
  const bool scion_ok = snapshots_bitwise_equal(scion3_before, scion3_after, &diff);
  return check(out, "freezing/masking", teacher_ok && scion_ok,
               teacher_ok && scion_ok ? "teacher and untouched scions bit-identical"
                                      : "state drifted at " + diff);
}

bool verify_hyper(std::ostream& out) {
  const bool ok = batch_size_for(1) == 6 && batch_size_for(5) == 32 && batch_size_for(10) == 64 &&
                  scale_lr(2.5e-4, 64) == 2.5e-4 && scale_lr(1e-4, 32) == 5e-5;
  return check(out, "hyperparameter rules", ok, "batch floor(64K/10), lr * B/64");
}

bool verify_sampler(std::ostream& out) {
  SynthSpec synth;
  synth.n_train = 200;
  auto train = generate_synth_split<R>(synth, 200, 0xA11u);
  auto a = sample_kshot(train, 3, 42);
  auto b = sample_kshot(train, 3, 42);
  auto c = sample_kshot(train, 3, 43);
  bool ok = a.size() == 30 && a.source_indices == b.source_indices &&
            a.source_indices != c.source_indices;
  std::vector<int> per_class(10, 0);
  for (int idx : a.source_indices) per_class[static_cast<size_t>(train.labels[idx])]++;
  for (int n : per_class) ok = ok && n == 3;
  return check(out, "sampler contract", ok, "K per class, seed-deterministic, unlabeled");
}

}  // namespace

bool run_property_suites(std::ostream& out) {
  bool ok = true;
  ok &= verify_fold(out);
  ok &= verify_finalize(out);
  ok &= verify_identity(out);
  ok &= verify_loss(out);
  ok &= verify_freezing(out);
  ok &= verify_hyper(out);
  ok &= verify_sampler(out);
  out << (ok ? "all property suites passed\n" : "property suite FAILURES\n");
  return ok;
}

}  // namespace graftkd
