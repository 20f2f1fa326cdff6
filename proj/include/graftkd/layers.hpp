#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "graftkd/rng.hpp"
#include "graftkd/tensor.hpp"

namespace graftkd {

// He-normal initialization, stddev = sqrt(2 / fan_in).
template <typename T>
void he_init(MatrixX<T>& m, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      m(i, j) = static_cast<T>(rng.normal(0.0, stddev));
}

template <typename T>
struct ParamRef {
  std::string name;
  MatrixX<T>* value = nullptr;
};

// Maps parameter storage to its gradient buffer. Parameters without an entry
// are frozen: their gradients are neither computed nor applied.
template <typename T>
class GradLookup {
 public:
  void add(const MatrixX<T>& param, MatrixX<T>* grad) { map_[&param] = grad; }
  MatrixX<T>* find(const MatrixX<T>& param) const {
    auto it = map_.find(&param);
    return it == map_.end() ? nullptr : it->second;
  }
  bool empty() const { return map_.empty(); }

 private:
  std::unordered_map<const MatrixX<T>*, MatrixX<T>*> map_;
};

// ---------------------------------------------------------------------------
// Conv2d: square kernel, zero padding. Forward is im2col + GEMM per sample.
// Weight layout: (out_ch) x (in_ch*k*k), column index (m*k + u)*k + v for
// input channel m and kernel offset (u, v).
// ---------------------------------------------------------------------------
template <typename T>
struct Conv2d {
  int in_ch = 0, out_ch = 0, ksize = 1, stride = 1, pad = 0;
  bool has_bias = true;
  MatrixX<T> weight;
  MatrixX<T> bias;  // out_ch x 1

  struct Cache {
    Tensor<T> input;
  };

  static Conv2d make(int in_ch, int out_ch, int k, int stride, int pad, bool bias, Rng& rng) {
    Conv2d c;
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    c.ksize = k;
    c.stride = stride;
    c.pad = pad;
    c.has_bias = bias;
    c.weight.resize(out_ch, static_cast<Eigen::Index>(in_ch) * k * k);
    he_init(c.weight, in_ch * k * k, rng);
    c.bias = MatrixX<T>::Zero(out_ch, 1);
    return c;
  }

  std::pair<int, int> out_hw(int h, int w) const {
    return {(h + 2 * pad - ksize) / stride + 1, (w + 2 * pad - ksize) / stride + 1};
  }

  bool pointwise_unit() const { return ksize == 1 && stride == 1 && pad == 0; }

  using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  void im2col(ConstPlaneMap<T> xin, int h, int w, ColMat& col) const {
    const auto [ho, wo] = out_hw(h, w);
    col.resize(static_cast<Eigen::Index>(in_ch) * ksize * ksize,
               static_cast<Eigen::Index>(ho) * wo);
    for (int m = 0; m < in_ch; ++m) {
      const T* xplane = xin.data() + static_cast<std::ptrdiff_t>(m) * h * w;
      for (int u = 0; u < ksize; ++u) {
        for (int v = 0; v < ksize; ++v) {
          const Eigen::Index r = (static_cast<Eigen::Index>(m) * ksize + u) * ksize + v;
          T* crow = col.data() + r * col.cols();
          for (int y = 0; y < ho; ++y) {
            const int iy = y * stride + u - pad;
            T* dst = crow + static_cast<std::ptrdiff_t>(y) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo, T(0));
              continue;
            }
            const T* srow = xplane + static_cast<std::ptrdiff_t>(iy) * w;
            if (stride == 1) {
              const int x0 = v - pad;
              const int lo = std::max(0, -x0);
              const int hi = std::min(wo, w - x0);
              std::fill(dst, dst + lo, T(0));
              if (hi > lo) std::copy(srow + x0 + lo, srow + x0 + hi, dst + lo);
              std::fill(dst + std::max(lo, hi), dst + wo, T(0));
            } else {
              for (int x = 0; x < wo; ++x) {
                const int ix = x * stride + v - pad;
                dst[x] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
              }
            }
          }
        }
      }
    }
  }

  void col2im_add(const ColMat& dcol, PlaneMap<T> dxp, int h, int w) const {
    const auto [ho, wo] = out_hw(h, w);
    for (int m = 0; m < in_ch; ++m) {
      T* xplane = dxp.data() + static_cast<std::ptrdiff_t>(m) * h * w;
      for (int u = 0; u < ksize; ++u) {
        for (int v = 0; v < ksize; ++v) {
          const Eigen::Index r = (static_cast<Eigen::Index>(m) * ksize + u) * ksize + v;
          const T* crow = dcol.data() + r * dcol.cols();
          for (int y = 0; y < ho; ++y) {
            const int iy = y * stride + u - pad;
            if (iy < 0 || iy >= h) continue;
            T* drow = xplane + static_cast<std::ptrdiff_t>(iy) * w;
            const T* src = crow + static_cast<std::ptrdiff_t>(y) * wo;
            if (stride == 1) {
              const int x0 = v - pad;
              const int lo = std::max(0, -x0);
              const int hi = std::min(wo, w - x0);
              for (int x = lo; x < hi; ++x) drow[x0 + x] += src[x];
            } else {
              for (int x = 0; x < wo; ++x) {
                const int ix = x * stride + v - pad;
                if (ix >= 0 && ix < w) drow[ix] += src[x];
              }
            }
          }
        }
      }
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    require(x.c == in_ch, strf("conv: expected %d input channels, got %d", in_ch, x.c));
    const auto [ho, wo] = out_hw(x.h, x.w);
    require(ho >= 1 && wo >= 1, strf("conv: input %dx%d too small for k=%d s=%d p=%d",
                                     x.h, x.w, ksize, stride, pad));
    Tensor<T> out(out_ch, ho, wo, x.batch());
    ColMat col;
    for (Eigen::Index b = 0; b < x.batch(); ++b) {
      PlaneMap<T> yp(out.data.col(b).data(), out_ch, out.plane_size());
      if (pointwise_unit()) {
        yp.noalias() = weight * x.cplane(b);
      } else {
        im2col(x.cplane(b), x.h, x.w, col);
        yp.noalias() = weight * col;
      }
      if (has_bias) yp.colwise() += bias.col(0);
    }
    if (cache) cache->input = x;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cc, const GradLookup<T>& gl,
                     bool need_dx) const {
    const Tensor<T>& x = cc.input;
    MatrixX<T>* dw = gl.find(weight);
    MatrixX<T>* db = has_bias ? gl.find(bias) : nullptr;
    Tensor<T> dx;
    if (need_dx) dx = Tensor<T>(in_ch, x.h, x.w, x.batch());
    ColMat col, dcol;
    for (Eigen::Index b = 0; b < x.batch(); ++b) {
      ConstPlaneMap<T> dyp(dy.data.col(b).data(), out_ch, dy.plane_size());
      if (dw) {
        if (pointwise_unit()) {
          dw->noalias() += dyp * x.cplane(b).transpose();
        } else {
          im2col(x.cplane(b), x.h, x.w, col);
          dw->noalias() += dyp * col.transpose();
        }
      }
      if (db) db->col(0) += dyp.rowwise().sum();
      if (need_dx) {
        if (pointwise_unit()) {
          dx.plane(b).noalias() = weight.transpose() * dyp;
        } else {
          dcol.noalias() = weight.transpose() * dyp;
          col2im_add(dcol, dx.plane(b), x.h, x.w);
        }
      }
    }
    return dx;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    fn(prefix + "/weight", weight);
    if (has_bias) fn(prefix + "/bias", bias);
  }
  template <typename Fn>
  void visit_state(const std::string& prefix, Fn&& fn) {
    visit_params(prefix, fn);
  }

  long long param_count() const {
    return static_cast<long long>(weight.size()) + (has_bias ? out_ch : 0);
  }
};

// ---------------------------------------------------------------------------
// BatchNorm2d. Training mode normalizes with batch statistics and updates
// running estimates; frozen/eval mode uses the stored running statistics.
// ---------------------------------------------------------------------------
template <typename T>
struct BatchNorm2d {
  int channels = 0;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);
  MatrixX<T> gamma, beta;              // learnable
  MatrixX<T> running_mean, running_var;  // buffers

  struct Cache {
    Tensor<T> input;
    VectorX<T> mean, inv_std;
    bool train_mode = false;
  };

  static BatchNorm2d make(int channels) {
    BatchNorm2d b;
    b.channels = channels;
    b.gamma = MatrixX<T>::Ones(channels, 1);
    b.beta = MatrixX<T>::Zero(channels, 1);
    b.running_mean = MatrixX<T>::Zero(channels, 1);
    b.running_var = MatrixX<T>::Ones(channels, 1);
    return b;
  }

  Tensor<T> forward_train(const Tensor<T>& x, Cache* cache) {
    require(x.c == channels, strf("bn: expected %d channels, got %d", channels, x.c));
    const Eigen::Index hw = x.plane_size();
    const double n = static_cast<double>(hw * x.batch());
    VectorX<T> mean(channels), inv_std(channels);
    Tensor<T> out(x.c, x.h, x.w, x.batch());
    for (int cch = 0; cch < channels; ++cch) {
      auto blk = x.data.middleRows(static_cast<Eigen::Index>(cch) * hw, hw);
      const double mu = blk.sum() / n;
      const double var = (blk.array() - static_cast<T>(mu)).square().sum() / n;
      mean(cch) = static_cast<T>(mu);
      inv_std(cch) = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      out.data.middleRows(static_cast<Eigen::Index>(cch) * hw, hw) =
          ((blk.array() - mean(cch)) * inv_std(cch) * gamma(cch, 0) + beta(cch, 0)).matrix();
      // unbiased variance for the running estimate
      const double unbiased = (n > 1.0) ? var * n / (n - 1.0) : var;
      running_mean(cch, 0) = (T(1) - momentum) * running_mean(cch, 0) + momentum * static_cast<T>(mu);
      running_var(cch, 0) = (T(1) - momentum) * running_var(cch, 0) + momentum * static_cast<T>(unbiased);
    }
    if (cache) {
      cache->input = x;
      cache->mean = mean;
      cache->inv_std = inv_std;
      cache->train_mode = true;
    }
    return out;
  }

  Tensor<T> forward_eval(const Tensor<T>& x, Cache* cache) const {
    require(x.c == channels, strf("bn: expected %d channels, got %d", channels, x.c));
    const Eigen::Index hw = x.plane_size();
    VectorX<T> mean(channels), inv_std(channels);
    Tensor<T> out(x.c, x.h, x.w, x.batch());
    for (int cch = 0; cch < channels; ++cch) {
      mean(cch) = running_mean(cch, 0);
      inv_std(cch) = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(running_var(cch, 0)) + static_cast<double>(eps)));
      auto blk = x.data.middleRows(static_cast<Eigen::Index>(cch) * hw, hw);
      out.data.middleRows(static_cast<Eigen::Index>(cch) * hw, hw) =
          ((blk.array() - mean(cch)) * inv_std(cch) * gamma(cch, 0) + beta(cch, 0)).matrix();
    }
    if (cache) {
      cache->input = x;
      cache->mean = mean;
      cache->inv_std = inv_std;
      cache->train_mode = false;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cc, const GradLookup<T>& gl,
                     bool need_dx) const {
    const Tensor<T>& x = cc.input;
    const Eigen::Index hw = x.plane_size();
    const double n = static_cast<double>(hw * x.batch());
    MatrixX<T>* dgamma = gl.find(gamma);
    MatrixX<T>* dbeta = gl.find(beta);
    Tensor<T> dx;
    if (need_dx) dx = Tensor<T>(x.c, x.h, x.w, x.batch());
    for (int cch = 0; cch < channels; ++cch) {
      auto xb = x.data.middleRows(static_cast<Eigen::Index>(cch) * hw, hw);
      auto dyb = dy.data.middleRows(static_cast<Eigen::Index>(cch) * hw, hw);
      const T istd = cc.inv_std(cch);
      auto xhat = ((xb.array() - cc.mean(cch)) * istd);
      const T sum_dy = dyb.sum();
      const T sum_dy_xhat = (dyb.array() * xhat).sum();
      if (dgamma) (*dgamma)(cch, 0) += sum_dy_xhat;
      if (dbeta) (*dbeta)(cch, 0) += sum_dy;
      if (!need_dx) continue;
      if (cc.train_mode) {
        dx.data.middleRows(static_cast<Eigen::Index>(cch) * hw, hw) =
            (gamma(cch, 0) * istd *
             (dyb.array() - static_cast<T>(sum_dy / n) - xhat * static_cast<T>(sum_dy_xhat / n)))
                .matrix();
      } else {
        dx.data.middleRows(static_cast<Eigen::Index>(cch) * hw, hw) =
            (dyb.array() * gamma(cch, 0) * istd).matrix();
      }
    }
    return dx;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    fn(prefix + "/gamma", gamma);
    fn(prefix + "/beta", beta);
  }
  template <typename Fn>
  void visit_state(const std::string& prefix, Fn&& fn) {
    visit_params(prefix, fn);
    fn(prefix + "/running_mean", running_mean);
    fn(prefix + "/running_var", running_var);
  }

  long long param_count() const { return 2LL * channels; }
};

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------
template <typename T>
struct ReLU {
  struct Cache {
    Tensor<T> input;
  };

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    Tensor<T> out(x.c, x.h, x.w, x.batch());
    out.data = x.data.cwiseMax(T(0));
    if (cache) cache->input = x;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cc, const GradLookup<T>&,
                     bool need_dx) const {
    Tensor<T> dx;
    if (!need_dx) return dx;
    dx = Tensor<T>(dy.c, dy.h, dy.w, dy.batch());
    dx.data = ((cc.input.data.array() > T(0)).template cast<T>() * dy.data.array()).matrix();
    return dx;
  }

  template <typename Fn>
  void visit_params(const std::string&, Fn&&) {}
  template <typename Fn>
  void visit_state(const std::string&, Fn&&) {}
  long long param_count() const { return 0; }
};

// ---------------------------------------------------------------------------
// MaxPool2d, no padding. Ties pick the first element in scan order.
// ---------------------------------------------------------------------------
template <typename T>
struct MaxPool2d {
  int ksize = 2, stride = 2;

  struct Cache {
    Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> argmax;  // out_features x batch
    int in_c = 0, in_h = 0, in_w = 0;
  };

  std::pair<int, int> out_hw(int h, int w) const {
    return {(h - ksize) / stride + 1, (w - ksize) / stride + 1};
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    const auto [ho, wo] = out_hw(x.h, x.w);
    require(ho >= 1 && wo >= 1, strf("maxpool: input %dx%d too small", x.h, x.w));
    Tensor<T> out(x.c, ho, wo, x.batch());
    if (cache) {
      cache->argmax.resize(out.features(), x.batch());
      cache->in_c = x.c;
      cache->in_h = x.h;
      cache->in_w = x.w;
    }
    for (Eigen::Index b = 0; b < x.batch(); ++b) {
      const T* xp = x.data.col(b).data();
      T* yp = out.data.col(b).data();
      for (int cch = 0; cch < x.c; ++cch) {
        for (int y = 0; y < ho; ++y) {
          for (int xx = 0; xx < wo; ++xx) {
            T best{};
            Eigen::Index best_idx = -1;
            for (int u = 0; u < ksize; ++u) {
              const int iy = y * stride + u;
              for (int v = 0; v < ksize; ++v) {
                const int ix = xx * stride + v;
                const Eigen::Index idx =
                    (static_cast<Eigen::Index>(cch) * x.h + iy) * x.w + ix;
                if (best_idx < 0 || xp[idx] > best) {
                  best = xp[idx];
                  best_idx = idx;
                }
              }
            }
            const Eigen::Index oidx = (static_cast<Eigen::Index>(cch) * ho + y) * wo + xx;
            yp[oidx] = best;
            if (cache) cache->argmax(oidx, b) = best_idx;
          }
        }
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cc, const GradLookup<T>&,
                     bool need_dx) const {
    Tensor<T> dx;
    if (!need_dx) return dx;
    dx = Tensor<T>(cc.in_c, cc.in_h, cc.in_w, dy.batch());
    for (Eigen::Index b = 0; b < dy.batch(); ++b) {
      for (Eigen::Index r = 0; r < dy.features(); ++r) {
        dx.data(cc.argmax(r, b), b) += dy.data(r, b);
      }
    }
    return dx;
  }

  template <typename Fn>
  void visit_params(const std::string&, Fn&&) {}
  template <typename Fn>
  void visit_state(const std::string&, Fn&&) {}
  long long param_count() const { return 0; }
};

// ---------------------------------------------------------------------------
// Flatten: (c,h,w) -> (c*h*w,1,1). Storage order is unchanged.
// ---------------------------------------------------------------------------
template <typename T>
struct Flatten {
  struct Cache {
    int c = 0, h = 0, w = 0;
  };

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    Tensor<T> out;
    out.data = x.data;
    out.c = static_cast<int>(x.features());
    out.h = 1;
    out.w = 1;
    if (cache) {
      cache->c = x.c;
      cache->h = x.h;
      cache->w = x.w;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cc, const GradLookup<T>&,
                     bool need_dx) const {
    Tensor<T> dx;
    if (!need_dx) return dx;
    dx.data = dy.data;
    dx.c = cc.c;
    dx.h = cc.h;
    dx.w = cc.w;
    return dx;
  }

  template <typename Fn>
  void visit_params(const std::string&, Fn&&) {}
  template <typename Fn>
  void visit_state(const std::string&, Fn&&) {}
  long long param_count() const { return 0; }
};

// ---------------------------------------------------------------------------
// Linear (affine map on flattened features).
// ---------------------------------------------------------------------------
template <typename T>
struct Linear {
  int in_features = 0, out_features = 0;
  bool has_bias = true;
  MatrixX<T> weight;  // out x in
  MatrixX<T> bias;    // out x 1

  struct Cache {
    MatrixX<T> input;  // in_features x batch
    int in_c = 0, in_h = 0, in_w = 0;
  };

  static Linear make(int in_features, int out_features, bool bias, Rng& rng) {
    Linear l;
    l.in_features = in_features;
    l.out_features = out_features;
    l.has_bias = bias;
    l.weight.resize(out_features, in_features);
    he_init(l.weight, in_features, rng);
    l.bias = MatrixX<T>::Zero(out_features, 1);
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    require(x.features() == in_features,
            strf("linear: expected %d input features, got %ld", in_features,
                 static_cast<long>(x.features())));
    Tensor<T> out(out_features, 1, 1, x.batch());
    out.data.noalias() = weight * x.data;
    if (has_bias) out.data.colwise() += bias.col(0);
    if (cache) {
      cache->input = x.data;
      cache->in_c = x.c;
      cache->in_h = x.h;
      cache->in_w = x.w;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cc, const GradLookup<T>& gl,
                     bool need_dx) const {
    MatrixX<T>* dw = gl.find(weight);
    MatrixX<T>* db = has_bias ? gl.find(bias) : nullptr;
    if (dw) dw->noalias() += dy.data * cc.input.transpose();
    if (db) db->col(0) += dy.data.rowwise().sum();
    Tensor<T> dx;
    if (!need_dx) return dx;
    dx = Tensor<T>(cc.in_c, cc.in_h, cc.in_w, dy.batch());
    dx.data.noalias() = weight.transpose() * dy.data;
    return dx;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    fn(prefix + "/weight", weight);
    if (has_bias) fn(prefix + "/bias", bias);
  }
  template <typename Fn>
  void visit_state(const std::string& prefix, Fn&& fn) {
    visit_params(prefix, fn);
  }
  long long param_count() const {
    return static_cast<long long>(weight.size()) + (has_bias ? out_features : 0);
  }
};

// ---------------------------------------------------------------------------
// Residual unit: relu(bn2(conv2(relu(bn1(conv1(x))))) + skip(x)).
// The skip is identity, or projection conv (+bn) when channels/stride change.
// Kept as one composite so residual topology stays inside a single block
// position and the whole unit moves as one op.
// ---------------------------------------------------------------------------
template <typename T>
struct Residual {
  Conv2d<T> conv1;
  BatchNorm2d<T> bn1;
  Conv2d<T> conv2;
  BatchNorm2d<T> bn2;
  std::optional<Conv2d<T>> proj;
  std::optional<BatchNorm2d<T>> proj_bn;

  struct Cache {
    typename Conv2d<T>::Cache c1, c2, cp;
    typename BatchNorm2d<T>::Cache b1, b2, bp;
    Tensor<T> relu1_in;  // bn1 output, pre-activation
    Tensor<T> sum;       // main + skip, pre-activation
  };

  static Residual make(int in_ch, int out_ch, int stride, Rng& rng) {
    Residual r;
    r.conv1 = Conv2d<T>::make(in_ch, out_ch, 3, stride, 1, true, rng);
    r.bn1 = BatchNorm2d<T>::make(out_ch);
    r.conv2 = Conv2d<T>::make(out_ch, out_ch, 3, 1, 1, true, rng);
    r.bn2 = BatchNorm2d<T>::make(out_ch);
    if (stride != 1 || in_ch != out_ch) {
      r.proj = Conv2d<T>::make(in_ch, out_ch, 1, stride, 0, true, rng);
      r.proj_bn = BatchNorm2d<T>::make(out_ch);
    }
    return r;
  }

  template <bool kTrain>
  Tensor<T> forward_impl(const Tensor<T>& x, Cache* cache) {
    auto bn_fwd = [&](BatchNorm2d<T>& bn, const Tensor<T>& in,
                      typename BatchNorm2d<T>::Cache* bc) {
      if constexpr (kTrain) return bn.forward_train(in, bc);
      else return bn.forward_eval(in, bc);
    };
    Tensor<T> a = conv1.forward(x, cache ? &cache->c1 : nullptr);
    Tensor<T> b = bn_fwd(bn1, a, cache ? &cache->b1 : nullptr);
    if (cache) cache->relu1_in = b;
    Tensor<T> r(b.c, b.h, b.w, b.batch());
    r.data = b.data.cwiseMax(T(0));
    Tensor<T> c = conv2.forward(r, cache ? &cache->c2 : nullptr);
    Tensor<T> d = bn_fwd(bn2, c, cache ? &cache->b2 : nullptr);
    Tensor<T> s;
    if (proj) {
      Tensor<T> p = proj->forward(x, cache ? &cache->cp : nullptr);
      s = bn_fwd(*proj_bn, p, cache ? &cache->bp : nullptr);
    } else {
      s = x;
    }
    require(d.same_shape(s), "residual: main/skip shape mismatch " + d.shape_str() + " vs " + s.shape_str());
    Tensor<T> sum(d.c, d.h, d.w, d.batch());
    sum.data = d.data + s.data;
    if (cache) cache->sum = sum;
    Tensor<T> out(sum.c, sum.h, sum.w, sum.batch());
    out.data = sum.data.cwiseMax(T(0));
    return out;
  }

  Tensor<T> forward_train(const Tensor<T>& x, Cache* cache) { return forward_impl<true>(x, cache); }
  Tensor<T> forward_eval(const Tensor<T>& x, Cache* cache) const {
    return const_cast<Residual*>(this)->template forward_impl<false>(x, cache);
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cc, const GradLookup<T>& gl,
                     bool need_dx) const {
    Tensor<T> dsum(dy.c, dy.h, dy.w, dy.batch());
    dsum.data = ((cc.sum.data.array() > T(0)).template cast<T>() * dy.data.array()).matrix();
    // main path
    Tensor<T> dd = bn2.backward(dsum, cc.b2, gl, true);
    Tensor<T> dr = conv2.backward(dd, cc.c2, gl, true);
    Tensor<T> db(dr.c, dr.h, dr.w, dr.batch());
    db.data =
        ((cc.relu1_in.data.array() > T(0)).template cast<T>() * dr.data.array()).matrix();
    Tensor<T> da = bn1.backward(db, cc.b1, gl, true);
    Tensor<T> dx_main = conv1.backward(da, cc.c1, gl, need_dx);
    // skip path
    if (proj) {
      Tensor<T> dp = proj_bn->backward(dsum, cc.bp, gl, true);
      Tensor<T> dx_skip = proj->backward(dp, cc.cp, gl, need_dx);
      if (need_dx) dx_main.data += dx_skip.data;
    } else if (need_dx) {
      dx_main.data += dsum.data;
    }
    return dx_main;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    conv1.visit_params(prefix + "/conv1", fn);
    bn1.visit_params(prefix + "/bn1", fn);
    conv2.visit_params(prefix + "/conv2", fn);
    bn2.visit_params(prefix + "/bn2", fn);
    if (proj) proj->visit_params(prefix + "/proj", fn);
    if (proj_bn) proj_bn->visit_params(prefix + "/proj_bn", fn);
  }
  template <typename Fn>
  void visit_state(const std::string& prefix, Fn&& fn) {
    conv1.visit_state(prefix + "/conv1", fn);
    bn1.visit_state(prefix + "/bn1", fn);
    conv2.visit_state(prefix + "/conv2", fn);
    bn2.visit_state(prefix + "/bn2", fn);
    if (proj) proj->visit_state(prefix + "/proj", fn);
    if (proj_bn) proj_bn->visit_state(prefix + "/proj_bn", fn);
  }

  long long param_count() const {
    long long n = conv1.param_count() + bn1.param_count() + conv2.param_count() + bn2.param_count();
    if (proj) n += proj->param_count();
    if (proj_bn) n += proj_bn->param_count();
    return n;
  }
};

template <typename T>
using Layer = std::variant<Conv2d<T>, BatchNorm2d<T>, ReLU<T>, MaxPool2d<T>, Flatten<T>,
                           Linear<T>, Residual<T>>;

template <typename T>
using LayerCache =
    std::variant<typename Conv2d<T>::Cache, typename BatchNorm2d<T>::Cache,
                 typename ReLU<T>::Cache, typename MaxPool2d<T>::Cache,
                 typename Flatten<T>::Cache, typename Linear<T>::Cache,
                 typename Residual<T>::Cache>;

template <typename T>
const char* layer_kind(const Layer<T>& l) {
  return std::visit(
      [](const auto& v) -> const char* {
        using L = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<L, Conv2d<T>>) return "conv";
        else if constexpr (std::is_same_v<L, BatchNorm2d<T>>) return "bn";
        else if constexpr (std::is_same_v<L, ReLU<T>>) return "relu";
        else if constexpr (std::is_same_v<L, MaxPool2d<T>>) return "maxpool";
        else if constexpr (std::is_same_v<L, Flatten<T>>) return "flatten";
        else if constexpr (std::is_same_v<L, Linear<T>>) return "linear";
        else return "residual";
      },
      l);
}

// Forward one layer. `train` selects batch-norm behaviour; only batch-norm
// layers mutate (running statistics), everything else is pure.
template <typename T>
Tensor<T> layer_forward(Layer<T>& layer, const Tensor<T>& x, bool train, LayerCache<T>* cache) {
  return std::visit(
      [&](auto& l) -> Tensor<T> {
        using L = std::decay_t<decltype(l)>;
        typename L::Cache* lc = nullptr;
        if (cache) {
          *cache = typename L::Cache{};
          lc = &std::get<typename L::Cache>(*cache);
        }
        if constexpr (std::is_same_v<L, BatchNorm2d<T>> || std::is_same_v<L, Residual<T>>) {
          return train ? l.forward_train(x, lc) : l.forward_eval(x, lc);
        } else {
          return l.forward(x, lc);
        }
      },
      layer);
}

template <typename T>
Tensor<T> layer_forward_frozen(const Layer<T>& layer, const Tensor<T>& x, LayerCache<T>* cache) {
  return layer_forward(const_cast<Layer<T>&>(layer), x, /*train=*/false, cache);
}

template <typename T>
Tensor<T> layer_backward(const Layer<T>& layer, const Tensor<T>& dy, const LayerCache<T>& cache,
                         const GradLookup<T>& gl, bool need_dx) {
  return std::visit(
      [&](const auto& l) -> Tensor<T> {
        using L = std::decay_t<decltype(l)>;
        return l.backward(dy, std::get<typename L::Cache>(cache), gl, need_dx);
      },
      layer);
}

template <typename T, typename Fn>
void layer_visit_params(Layer<T>& layer, const std::string& prefix, Fn&& fn) {
  std::visit([&](auto& l) { l.visit_params(prefix, fn); }, layer);
}

template <typename T, typename Fn>
void layer_visit_state(Layer<T>& layer, const std::string& prefix, Fn&& fn) {
  std::visit([&](auto& l) { l.visit_state(prefix, fn); }, layer);
}

template <typename T>
long long layer_param_count(const Layer<T>& layer) {
  return std::visit([](const auto& l) { return l.param_count(); }, layer);
}

}  // namespace graftkd
