#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "graftkd/fewshot.hpp"
#include "graftkd/graft.hpp"

namespace graftkd {

// ---------------------------------------------------------------------------
// Normalized-logit losses
// ---------------------------------------------------------------------------
inline constexpr double kLogitNormEps = 1e-12;

// z / ||z||_2. Near-zero logits are a degenerate distillation target.
template <typename T>
VectorX<T> normalize_logits(const VectorX<T>& z) {
  const double n = z.template cast<double>().norm();
  if (!(n > kLogitNormEps)) fail(strf("normalize_logits: degenerate logits, ||z|| = %.3e", n));
  return (z.template cast<double>() / n).template cast<T>();
}

template <typename T>
MatrixX<T> normalize_logits_batch(const MatrixX<T>& z) {
  MatrixX<T> out(z.rows(), z.cols());
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    const double n = z.col(b).template cast<double>().norm();
    if (!(n > kLogitNormEps))
      fail(strf("normalize_logits: degenerate logits in batch row %ld, ||z|| = %.3e",
                static_cast<long>(b), n));
    out.col(b) = (z.col(b).template cast<double>() / n).template cast<T>();
  }
  return out;
}

// Mean over the batch of (1/N) * || zg/||zg|| - zt/||zt|| ||^2 with N the
// class count. Scale-invariant in both arguments; range [0, 4/N].
template <typename T>
double graft_loss(const MatrixX<T>& z_grafted, const MatrixX<T>& z_teacher, int n_classes) {
  require(z_grafted.rows() == z_teacher.rows() && z_grafted.cols() == z_teacher.cols(),
          strf("graft_loss: dimension mismatch (%ldx%ld vs %ldx%ld)",
               static_cast<long>(z_grafted.rows()), static_cast<long>(z_grafted.cols()),
               static_cast<long>(z_teacher.rows()), static_cast<long>(z_teacher.cols())));
  require(n_classes > 0, "graft_loss: class count must be positive");
  double total = 0.0;
  for (Eigen::Index b = 0; b < z_grafted.cols(); ++b) {
    const double ng = z_grafted.col(b).template cast<double>().norm();
    const double nt = z_teacher.col(b).template cast<double>().norm();
    if (!(ng > kLogitNormEps) || !(nt > kLogitNormEps))
      fail(strf("graft_loss: degenerate logits in batch row %ld", static_cast<long>(b)));
    const auto g = z_grafted.col(b).template cast<double>() / ng;
    const auto t = z_teacher.col(b).template cast<double>() / nt;
    total += (g - t).squaredNorm() / n_classes;
  }
  return total / static_cast<double>(z_grafted.cols());
}

// Loss plus analytic gradient w.r.t. the grafted logits. The normalization
// Jacobian is (I - g g^T)/||z||.
template <typename T>
std::pair<double, MatrixX<T>> graft_loss_grad(const MatrixX<T>& z_grafted,
                                              const MatrixX<T>& z_teacher, int n_classes) {
  require(z_grafted.rows() == z_teacher.rows() && z_grafted.cols() == z_teacher.cols(),
          "graft_loss: dimension mismatch");
  require(n_classes > 0, "graft_loss: class count must be positive");
  const double B = static_cast<double>(z_grafted.cols());
  MatrixX<T> dz(z_grafted.rows(), z_grafted.cols());
  double total = 0.0;
  for (Eigen::Index b = 0; b < z_grafted.cols(); ++b) {
    const double ng = z_grafted.col(b).template cast<double>().norm();
    const double nt = z_teacher.col(b).template cast<double>().norm();
    if (!(ng > kLogitNormEps) || !(nt > kLogitNormEps))
      fail(strf("graft_loss: degenerate logits in batch row %ld", static_cast<long>(b)));
    const VectorX<double> g = z_grafted.col(b).template cast<double>() / ng;
    const VectorX<double> t = z_teacher.col(b).template cast<double>() / nt;
    const VectorX<double> diff = g - t;
    total += diff.squaredNorm() / n_classes;
    const VectorX<double> dL_dg = (2.0 / (n_classes * B)) * diff;
    dz.col(b) = ((dL_dg - g * (g.dot(dL_dg))) / ng).template cast<T>();
  }
  return {total / B, std::move(dz)};
}

// Hinton-style KD baseline: temperature-softened cross-entropy scaled by T^2.
template <typename T>
double kd_baseline_loss(const MatrixX<T>& z_student, const MatrixX<T>& z_teacher,
                        double temperature) {
  require(temperature > 0, "kd_baseline_loss: temperature must be positive");
  require(z_student.rows() == z_teacher.rows() && z_student.cols() == z_teacher.cols(),
          "kd_baseline_loss: dimension mismatch");
  double total = 0.0;
  for (Eigen::Index b = 0; b < z_student.cols(); ++b) {
    const VectorX<double> zs = z_student.col(b).template cast<double>() / temperature;
    const VectorX<double> zt = z_teacher.col(b).template cast<double>() / temperature;
    const VectorX<double> ps = (zs.array() - zs.maxCoeff()).exp();
    const VectorX<double> pt = (zt.array() - zt.maxCoeff()).exp();
    const VectorX<double> log_ps = (ps / ps.sum()).array().log();
    total += -(pt / pt.sum()).dot(log_ps);
  }
  return temperature * temperature * total / static_cast<double>(z_student.cols());
}

template <typename T>
std::pair<double, MatrixX<T>> kd_baseline_loss_grad(const MatrixX<T>& z_student,
                                                    const MatrixX<T>& z_teacher,
                                                    double temperature) {
  const double loss = kd_baseline_loss(z_student, z_teacher, temperature);
  const double B = static_cast<double>(z_student.cols());
  MatrixX<T> dz(z_student.rows(), z_student.cols());
  for (Eigen::Index b = 0; b < z_student.cols(); ++b) {
    const VectorX<double> zs = z_student.col(b).template cast<double>() / temperature;
    const VectorX<double> zt = z_teacher.col(b).template cast<double>() / temperature;
    VectorX<double> ps = (zs.array() - zs.maxCoeff()).exp();
    VectorX<double> pt = (zt.array() - zt.maxCoeff()).exp();
    ps /= ps.sum();
    pt /= pt.sum();
    dz.col(b) = (temperature * (ps - pt) / B).template cast<T>();
  }
  return {loss, std::move(dz)};
}

// Softmax cross-entropy on hard labels (teacher pre-training).
template <typename T>
std::pair<double, MatrixX<T>> softmax_ce_loss_grad(const MatrixX<T>& z,
                                                   const std::vector<int>& labels) {
  require(static_cast<Eigen::Index>(labels.size()) == z.cols(), "ce: label count mismatch");
  const double B = static_cast<double>(z.cols());
  MatrixX<T> dz(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    VectorX<double> p = (z.col(b).template cast<double>().array() -
                         z.col(b).template cast<double>().maxCoeff())
                            .exp();
    p /= p.sum();
    total += -std::log(std::max(p(labels[static_cast<size_t>(b)]), 1e-300));
    p(labels[static_cast<size_t>(b)]) -= 1.0;
    dz.col(b) = (p / B).template cast<T>();
  }
  return {total / B, std::move(dz)};
}

// Linear learning-rate scaling: rates are quoted at batch 64 and scaled by
// B/64 for other batch sizes.
inline double scale_lr(double base_lr, int batch_size) {
  require(batch_size >= 1, "scale_lr: batch size must be >= 1");
  return base_lr * static_cast<double>(batch_size) / 64.0;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
class Adam {
 public:
  Adam(double lr, AdamConfig cfg = {}) : lr_(lr), cfg_(cfg) {}

  void step(const std::vector<ParamRef<T>>& params, std::vector<MatrixX<T>>& grads) {
    require(params.size() == grads.size(), "adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i] = MatrixX<T>::Zero(params[i].value->rows(), params[i].value->cols());
        v_[i] = MatrixX<T>::Zero(params[i].value->rows(), params[i].value->cols());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      MatrixX<T>& p = *params[i].value;
      MatrixX<T>& g = grads[i];
      if (cfg_.weight_decay != 0.0) g += static_cast<T>(cfg_.weight_decay) * p;
      m_[i] = static_cast<T>(cfg_.beta1) * m_[i] + static_cast<T>(1.0 - cfg_.beta1) * g;
      v_[i] = static_cast<T>(cfg_.beta2) * v_[i] +
              static_cast<T>(1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const double step_lr = lr_ / bc1;
      p.array() -= (step_lr * m_[i].array().template cast<double>() /
                    ((v_[i].array().template cast<double>() / bc2).sqrt() + cfg_.eps))
                       .template cast<T>();
    }
  }

  long steps() const { return t_; }

 private:
  double lr_;
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<MatrixX<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Stage configuration and records
// ---------------------------------------------------------------------------
struct StageConfig {
  GraftKind stage = GraftKind::block_graft;
  int epochs_per_unit = 100;
  double default_base_lr = 2.5e-4;           // quoted at batch 64
  std::map<int, double> base_lr_per_unit;    // block index (stage 1) / depth (stage 2)
  AdamConfig optimizer;                      // betas (0.9, 0.999), weight decay 0
  std::uint64_t seed = 0;
  int batch_size = 64;
  int eval_every = 0;  // test-set eval cadence in epochs; 0 = final epoch only

  double base_lr_for(int unit) const {
    auto it = base_lr_per_unit.find(unit);
    return it == base_lr_per_unit.end() ? default_base_lr : it->second;
  }
};

struct TrainRecord {
  int unit = 0;  // block index (stage 1) or depth (stage 2)
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;  // agreement with teacher argmax on the shot set
  double test_acc = 0.0;
  double seconds = 0.0;
};

// Aborting a unit on non-finite or degenerate loss carries the offending
// location for diagnostics.
class UnitAbort : public Error {
 public:
  UnitAbort(int unit, int epoch, int batch_index, const std::string& reason)
      : Error(strf("unit %d aborted at epoch %d, batch %d: %s", unit, epoch, batch_index,
                   reason.c_str())),
        unit(unit), epoch(epoch), batch_index(batch_index) {}
  int unit, epoch, batch_index;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------
struct EvalResult {
  double top1 = 0.0;
  std::optional<double> top5;  // reported when n_classes >= 10
};

// Deterministic argmax with lowest-index tie-break.
template <typename T>
int argmax_lowest(const Eigen::Ref<const VectorX<T>>& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

// Top-5 membership under (value desc, index asc) ranking.
template <typename T>
bool in_top5(const Eigen::Ref<const VectorX<T>>& v, int label) {
  int ahead = 0;
  for (int i = 0; i < v.size(); ++i) {
    if (i == label) continue;
    if (v(i) > v(label) || (v(i) == v(label) && i < label)) ++ahead;
  }
  return ahead < 5;
}

// Model = anything exposing logits(const Tensor<T>&) -> MatrixX<T>.
template <typename T, typename Model>
EvalResult evaluate(const Model& model, const LabeledDataset<T>& test_set,
                    const Normalization& norm, int batch = 256) {
  require(test_set.size() > 0, "evaluate: empty test set");
  long correct1 = 0, correct5 = 0;
  for (Eigen::Index start = 0; start < test_set.size(); start += batch) {
    const Eigen::Index n = std::min<Eigen::Index>(batch, test_set.size() - start);
    Tensor<T> x(test_set.images.c, test_set.images.h, test_set.images.w, n);
    x.data = test_set.images.data.middleCols(start, n);
    normalize_inplace(x, norm);
    const MatrixX<T> z = model.logits(x);
    for (Eigen::Index b = 0; b < n; ++b) {
      const int y = test_set.labels[static_cast<size_t>(start + b)];
      const VectorX<T> col = z.col(b);
      if (argmax_lowest<T>(col) == y) ++correct1;
      if (in_top5<T>(col, y)) ++correct5;
    }
  }
  EvalResult r;
  r.top1 = static_cast<double>(correct1) / static_cast<double>(test_set.size());
  if (test_set.n_classes >= 10)
    r.top5 = static_cast<double>(correct5) / static_cast<double>(test_set.size());
  return r;
}

// Fraction of shot-set samples where the model's argmax agrees with the
// teacher's. Labels are unavailable by contract, so this is the label-free
// train-side fit measure recorded in TrainRecords.
template <typename T, typename Model>
double teacher_agreement(const Model& model, const BlockwiseNetwork<T>& teacher,
                         const FewShotDataset<T>& shots, const Normalization& norm,
                         int batch = 256) {
  long agree = 0;
  for (Eigen::Index start = 0; start < shots.size(); start += batch) {
    const Eigen::Index n = std::min<Eigen::Index>(batch, shots.size() - start);
    Tensor<T> x(shots.samples.c, shots.samples.h, shots.samples.w, n);
    x.data = shots.samples.data.middleCols(start, n);
    normalize_inplace(x, norm);
    const MatrixX<T> zm = model.logits(x);
    const MatrixX<T> zt = teacher.logits(x);
    for (Eigen::Index b = 0; b < n; ++b) {
      const VectorX<T> cm = zm.col(b), ct = zt.col(b);
      if (argmax_lowest<T>(cm) == argmax_lowest<T>(ct)) ++agree;
    }
  }
  return static_cast<double>(agree) / static_cast<double>(shots.size());
}

// ---------------------------------------------------------------------------
// Unit training loops
// ---------------------------------------------------------------------------

// Shared context for one optimization unit.
template <typename T>
struct DistillContext {
  const FewShotDataset<T>* shots = nullptr;
  AugmentConfig aug;
  Normalization norm;
  const LabeledDataset<T>* test_set = nullptr;  // optional, enables test_acc in records
};

namespace detail {

template <typename T, typename Model>
double maybe_test_acc(const Model& model, const DistillContext<T>& ctx) {
  if (!ctx.test_set) return 0.0;
  return evaluate(model, *ctx.test_set, ctx.norm).top1;
}

// One Adam optimization of `model` against the teacher's logits on the shot
// set. Returns per-epoch records at the eval cadence (final epoch always).
template <typename T>
std::vector<TrainRecord> run_unit(GraftedModel<T>& model, const BlockwiseNetwork<T>& teacher,
                                  int unit, const DistillContext<T>& ctx, const StageConfig& cfg) {
  std::vector<ParamRef<T>> params = trainable_params(model, cfg.stage, unit);
  std::vector<MatrixX<T>> grads(params.size());
  GradLookup<T> gl;
  for (size_t i = 0; i < params.size(); ++i) {
    grads[i] = MatrixX<T>::Zero(params[i].value->rows(), params[i].value->cols());
    gl.add(*params[i].value, &grads[i]);
  }
  Adam<T> adam(scale_lr(cfg.base_lr_for(unit), cfg.batch_size), cfg.optimizer);
  FewShotLoader<T> loader(*ctx.shots, cfg.batch_size,
                          mix_seed(cfg.seed, {static_cast<std::uint64_t>(cfg.stage),
                                              static_cast<std::uint64_t>(unit)}),
                          ctx.aug, ctx.norm);
  std::vector<TrainRecord> records;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= cfg.epochs_per_unit; ++epoch) {
    double epoch_loss = 0.0;
    int batch_index = 0;
    for (const auto& idx : loader.epoch_batches(epoch)) {
      const Tensor<T> x = loader.load_batch(idx, epoch);
      const MatrixX<T> zt = teacher.logits(x);
      typename GraftedModel<T>::Cache cache;
      const Tensor<T> zg = model.forward(x, /*train=*/true, &cache);
      double loss;
      MatrixX<T> dz;
      try {
        std::tie(loss, dz) = graft_loss_grad(zg.data, zt, model.n_classes);
      } catch (const Error& e) {
        throw UnitAbort(unit, epoch, batch_index, e.what());
      }
      if (!std::isfinite(loss))
        throw UnitAbort(unit, epoch, batch_index, strf("non-finite loss %.6g", loss));
      Tensor<T> dzt(zg.c, zg.h, zg.w, zg.batch());
      dzt.data = std::move(dz);
      for (auto& g : grads) g.setZero();
      model.backward(dzt, cache, gl);
      adam.step(params, grads);
      epoch_loss += loss * static_cast<double>(idx.size());
      ++batch_index;
    }
    epoch_loss /= static_cast<double>(ctx.shots->size());
    const bool record_now =
        epoch == cfg.epochs_per_unit || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
    if (record_now) {
      TrainRecord r;
      r.unit = unit;
      r.epoch = epoch;
      r.loss = epoch_loss;
      r.train_acc = teacher_agreement(model, teacher, *ctx.shots, ctx.norm);
      r.test_acc = maybe_test_acc(model, ctx);
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      records.push_back(r);
    }
  }
  return records;
}

}  // namespace detail

// One stage-1 unit: trains a single scion (in place) at its index.
template <typename T>
std::vector<TrainRecord> train_stage1_unit(const BlockwiseNetwork<T>& teacher,
                                           WrappedScion<T>& scion, const DistillContext<T>& ctx,
                                           const StageConfig& cfg) {
  require(cfg.stage == GraftKind::block_graft, "train_stage1_unit: config stage must be block_graft");
  GraftedModel<T> model = graft_block(teacher, scion);
  auto records = detail::run_unit(model, teacher, scion.index, ctx, cfg);
  scion = model.scions.at(scion.index);
  return records;
}

// Stage 1: for each l independently, graft H_l into the teacher and train
// only H_l against the teacher's normalized logits. Scions are updated in
// place; records for all units are concatenated.
template <typename T>
std::vector<TrainRecord> train_stage1(const BlockwiseNetwork<T>& teacher,
                                      std::vector<WrappedScion<T>>& scions,
                                      const DistillContext<T>& ctx, const StageConfig& cfg) {
  require(cfg.stage == GraftKind::block_graft, "train_stage1: config stage must be block_graft");
  std::vector<TrainRecord> records;
  for (auto& scion : scions) {
    auto unit_records = train_stage1_unit(teacher, scion, ctx, cfg);
    records.insert(records.end(), unit_records.begin(), unit_records.end());
  }
  return records;
}

// One stage-2 unit at the given depth. Scions 1..depth are updated in place;
// scions beyond the depth are not touched.
template <typename T>
std::vector<TrainRecord> train_stage2_depth(const BlockwiseNetwork<T>& teacher,
                                            std::vector<WrappedScion<T>>& scions, int depth,
                                            const DistillContext<T>& ctx,
                                            const StageConfig& cfg) {
  require(cfg.stage == GraftKind::net_graft, "train_stage2_depth: config stage must be net_graft");
  require(depth >= 1 && depth <= static_cast<int>(scions.size()),
          strf("train_stage2_depth: depth %d outside 1..%zu", depth, scions.size()));
  std::vector<WrappedScion<T>> prefix(scions.begin(), scions.begin() + depth);
  GraftedModel<T> model = graft_prefix(teacher, prefix);
  auto records = detail::run_unit(model, teacher, depth, ctx, cfg);
  for (int i = 1; i <= depth; ++i) scions[static_cast<size_t>(i - 1)] = model.scions.at(i);
  return records;
}

// Stage 2: T_1^N starts as T_1^B (scion 1 as trained in stage 1); for depth
// l = 2..L the prefix H_1..H_l is trained jointly. Scions are adapted in
// place, carrying refinements from shallower depths forward.
template <typename T>
std::vector<TrainRecord> train_stage2(const BlockwiseNetwork<T>& teacher,
                                      std::vector<WrappedScion<T>>& scions,
                                      const DistillContext<T>& ctx, const StageConfig& cfg) {
  require(cfg.stage == GraftKind::net_graft, "train_stage2: config stage must be net_graft");
  std::vector<TrainRecord> records;
  for (int depth = 2; depth <= static_cast<int>(scions.size()); ++depth) {
    auto unit_records = train_stage2_depth(teacher, scions, depth, ctx, cfg);
    records.insert(records.end(), unit_records.begin(), unit_records.end());
  }
  return records;
}

// Ablation path: local block-output imitation. The wrapped scion is trained
// to reproduce the teacher block's output features from the teacher's own
// input features at that boundary, rather than the end-to-end predictions.
// Plain mean-squared feature error, averaged per element.
template <typename T>
std::vector<TrainRecord> train_block_imitation(const BlockwiseNetwork<T>& teacher,
                                               WrappedScion<T>& scion,
                                               const DistillContext<T>& ctx,
                                               const StageConfig& cfg) {
  require(cfg.stage == GraftKind::block_graft,
          "train_block_imitation: config stage must be block_graft");
  const auto tblocks = decompose(teacher);
  const int l = scion.index;
  require(l >= 1 && l <= static_cast<int>(tblocks.size()),
          "train_block_imitation: scion index out of range");

  std::vector<ParamRef<T>> params;
  scion.visit_params("scion" + std::to_string(l),
                     [&](const std::string& name, MatrixX<T>& m) { params.push_back({name, &m}); });
  std::vector<MatrixX<T>> grads(params.size());
  GradLookup<T> gl;
  for (size_t i = 0; i < params.size(); ++i) {
    grads[i] = MatrixX<T>::Zero(params[i].value->rows(), params[i].value->cols());
    gl.add(*params[i].value, &grads[i]);
  }
  Adam<T> adam(scale_lr(cfg.base_lr_for(l), cfg.batch_size), cfg.optimizer);
  FewShotLoader<T> loader(*ctx.shots, cfg.batch_size,
                          mix_seed(cfg.seed, {0xAB1u, static_cast<std::uint64_t>(l)}), ctx.aug,
                          ctx.norm);
  std::vector<TrainRecord> records;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= cfg.epochs_per_unit; ++epoch) {
    double epoch_loss = 0.0;
    int batch_index = 0;
    for (const auto& idx : loader.epoch_batches(epoch)) {
      Tensor<T> x = loader.load_batch(idx, epoch);
      // teacher features entering and leaving block l
      Tensor<T> fin = x;
      for (int j = 0; j + 1 < l; ++j) fin = tblocks[static_cast<size_t>(j)].eval(fin);
      const Tensor<T> target = tblocks[static_cast<size_t>(l - 1)].eval(fin);
      typename WrappedScion<T>::Cache cache;
      const Tensor<T> out = scion.forward(fin, /*train=*/true, &cache);
      require(out.same_shape(target), "train_block_imitation: scion output shape mismatch");
      const double n_el = static_cast<double>(target.data.size());
      const MatrixX<T> diff = out.data - target.data;
      const double loss = diff.template cast<double>().squaredNorm() / n_el;
      if (!std::isfinite(loss))
        throw UnitAbort(l, epoch, batch_index, strf("non-finite loss %.6g", loss));
      Tensor<T> dout(out.c, out.h, out.w, out.batch());
      dout.data = (2.0 / n_el) * diff;
      for (auto& g : grads) g.setZero();
      (void)scion.backward(dout, cache, gl, false);
      adam.step(params, grads);
      epoch_loss += loss * static_cast<double>(idx.size());
      ++batch_index;
    }
    epoch_loss /= static_cast<double>(ctx.shots->size());
    const bool record_now =
        epoch == cfg.epochs_per_unit || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
    if (record_now) {
      TrainRecord r;
      r.unit = l;
      r.epoch = epoch;
      r.loss = epoch_loss;
      GraftedModel<T> hybrid = graft_block(teacher, scion);
      r.train_acc = teacher_agreement(hybrid, teacher, *ctx.shots, ctx.norm);
      r.test_acc = detail::maybe_test_acc(hybrid, ctx);
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      records.push_back(r);
    }
  }
  return records;
}

enum class WholeLoss { normalized_logit, kd };

// Whole-network distillation baseline: the entire student is trained at once
// against the teacher's logits (normalized-logit loss by default, Hinton KD
// as the alternative harness).
template <typename T>
std::vector<TrainRecord> train_whole_student(const BlockwiseNetwork<T>& teacher,
                                             BlockwiseNetwork<T>& student,
                                             const DistillContext<T>& ctx, const StageConfig& cfg,
                                             int epochs, WholeLoss loss_kind,
                                             double kd_temperature = 4.0) {
  std::vector<ParamRef<T>> params;
  student.visit_params("student",
                       [&](const std::string& name, MatrixX<T>& m) { params.push_back({name, &m}); });
  std::vector<MatrixX<T>> grads(params.size());
  GradLookup<T> gl;
  for (size_t i = 0; i < params.size(); ++i) {
    grads[i] = MatrixX<T>::Zero(params[i].value->rows(), params[i].value->cols());
    gl.add(*params[i].value, &grads[i]);
  }
  Adam<T> adam(scale_lr(cfg.default_base_lr, cfg.batch_size), cfg.optimizer);
  FewShotLoader<T> loader(*ctx.shots, cfg.batch_size, mix_seed(cfg.seed, {0xB00u}), ctx.aug,
                          ctx.norm);
  auto sblocks = decompose(student);
  std::vector<TrainRecord> records;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    double epoch_loss = 0.0;
    int batch_index = 0;
    for (const auto& idx : loader.epoch_batches(epoch)) {
      const Tensor<T> x = loader.load_batch(idx, epoch);
      const MatrixX<T> zt = teacher.logits(x);
      // forward through the student's decomposed chain in train mode
      std::vector<typename Block<T>::Cache> caches(student.blocks.size() +
                                                   (student.head ? 1 : 0));
      Tensor<T> cur = x;
      size_t ci = 0;
      for (auto& b : student.blocks) cur = b.forward(cur, true, &caches[ci++]);
      if (student.head) cur = student.head->forward(cur, true, &caches[ci++]);
      double loss;
      MatrixX<T> dz;
      try {
        if (loss_kind == WholeLoss::normalized_logit) {
          std::tie(loss, dz) = graft_loss_grad(cur.data, zt, student.n_classes);
        } else {
          std::tie(loss, dz) = kd_baseline_loss_grad(cur.data, zt, kd_temperature);
        }
      } catch (const Error& e) {
        throw UnitAbort(0, epoch, batch_index, e.what());
      }
      if (!std::isfinite(loss))
        throw UnitAbort(0, epoch, batch_index, strf("non-finite loss %.6g", loss));
      Tensor<T> dzt(cur.c, cur.h, cur.w, cur.batch());
      dzt.data = std::move(dz);
      for (auto& g : grads) g.setZero();
      Tensor<T> dcur = dzt;
      ci = caches.size();
      if (student.head) dcur = student.head->backward(dcur, caches[--ci], gl, true);
      for (size_t bi = student.blocks.size(); bi-- > 0;) {
        dcur = student.blocks[bi].backward(dcur, caches[--ci], gl, bi > 0);
      }
      adam.step(params, grads);
      epoch_loss += loss * static_cast<double>(idx.size());
      ++batch_index;
    }
    epoch_loss /= static_cast<double>(ctx.shots->size());
    const bool record_now = epoch == epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
    if (record_now) {
      TrainRecord r;
      r.unit = 0;
      r.epoch = epoch;
      r.loss = epoch_loss;
      r.train_acc = teacher_agreement(student, teacher, *ctx.shots, ctx.norm);
      r.test_acc = detail::maybe_test_acc(student, ctx);
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      records.push_back(r);
    }
  }
  return records;
}

}  // namespace graftkd
