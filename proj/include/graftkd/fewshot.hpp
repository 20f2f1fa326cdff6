#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "graftkd/rng.hpp"
#include "graftkd/tensor.hpp"

namespace graftkd {

// A labeled image dataset, pixels raw in [0,1].
template <typename T>
struct LabeledDataset {
  Tensor<T> images;
  std::vector<int> labels;
  int n_classes = 0;
  std::string source_id;

  Eigen::Index size() const { return images.batch(); }
};

// K unlabeled samples per class. Labels are stripped at sampling time; only
// the source indices are kept as provenance for manifests.
template <typename T>
struct FewShotDataset {
  Tensor<T> samples;
  int K = 0;
  int n_classes = 0;
  std::string source_id;
  std::uint64_t seed = 0;
  std::vector<int> source_indices;

  Eigen::Index size() const { return samples.batch(); }
};

// K uniform draws per class, without replacement, deterministic under seed.
template <typename T>
FewShotDataset<T> sample_kshot(const LabeledDataset<T>& source, int K, std::uint64_t seed) {
  require(K >= 1, "sample_kshot: K must be >= 1");
  std::vector<std::vector<int>> by_class(source.n_classes);
  for (Eigen::Index i = 0; i < source.size(); ++i) {
    const int y = source.labels[i];
    require(y >= 0 && y < source.n_classes, strf("sample_kshot: label %d out of range", y));
    by_class[y].push_back(static_cast<int>(i));
  }
  FewShotDataset<T> out;
  out.K = K;
  out.n_classes = source.n_classes;
  out.source_id = source.source_id;
  out.seed = seed;
  for (int c = 0; c < source.n_classes; ++c) {
    if (static_cast<int>(by_class[c].size()) < K)
      fail(strf("sample_kshot: class %d has only %zu samples, need K=%d", c, by_class[c].size(),
                K));
    Rng rng(mix_seed(seed, {0x5A17u, static_cast<std::uint64_t>(c)}));
    rng.shuffle(by_class[c]);
    for (int k = 0; k < K; ++k) out.source_indices.push_back(by_class[c][k]);
  }
  out.samples = Tensor<T>(source.images.c, source.images.h, source.images.w,
                          static_cast<Eigen::Index>(out.source_indices.size()));
  for (size_t i = 0; i < out.source_indices.size(); ++i)
    out.samples.data.col(static_cast<Eigen::Index>(i)) =
        source.images.data.col(out.source_indices[i]);
  return out;
}

// Batch size rule: floor(64*K/10), clamped below at 1.
inline int batch_size_for(int K) {
  require(K >= 1, "batch_size_for: K must be >= 1");
  return std::max(1, 64 * K / 10);
}

struct AugmentConfig {
  int crop_padding = 4;
  bool flip = true;
};

// In-place horizontal flip of one sample stored channel-major.
template <typename T>
void flip_horizontal(T* chw, int c, int h, int w) {
  for (int ch = 0; ch < c; ++ch) {
    T* plane = chw + static_cast<std::ptrdiff_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      T* row = plane + static_cast<std::ptrdiff_t>(y) * w;
      for (int x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
    }
  }
}

// Random crop from a zero-padded frame, then horizontal flip with p=0.5.
// Resolution is unchanged. Draw order: crop dy, dx, then flip coin.
template <typename T>
void augment_sample(const T* src, T* dst, int c, int h, int w, Rng& rng,
                    const AugmentConfig& cfg) {
  const int p = cfg.crop_padding;
  int dy = 0, dx = 0;
  if (p > 0) {
    dy = rng.uniform_int(2 * p + 1) - p;
    dx = rng.uniform_int(2 * p + 1) - p;
  }
  for (int ch = 0; ch < c; ++ch) {
    const T* sp = src + static_cast<std::ptrdiff_t>(ch) * h * w;
    T* dp = dst + static_cast<std::ptrdiff_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      const int sy = y + dy;
      for (int x = 0; x < w; ++x) {
        const int sx = x + dx;
        dp[static_cast<std::ptrdiff_t>(y) * w + x] =
            (sy >= 0 && sy < h && sx >= 0 && sx < w)
                ? sp[static_cast<std::ptrdiff_t>(sy) * w + sx]
                : T(0);
      }
    }
  }
  if (cfg.flip && rng.bernoulli(0.5)) flip_horizontal(dst, c, h, w);
}

// Copying convenience for tests: augments a single sample tensor.
template <typename T>
Tensor<T> augment(const Tensor<T>& image, Rng& rng, const AugmentConfig& cfg) {
  require(image.batch() == 1, "augment: expects a single sample");
  Tensor<T> out(image.c, image.h, image.w, 1);
  augment_sample(image.data.col(0).data(), out.data.col(0).data(), image.c, image.h, image.w,
                 rng, cfg);
  return out;
}

// Per-channel normalization constants declared in the experiment config.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

template <typename T>
void normalize_inplace(Tensor<T>& t, const Normalization& norm) {
  require(static_cast<int>(norm.mean.size()) == t.c &&
              static_cast<int>(norm.stddev.size()) == t.c,
          "normalize: constants do not match channel count");
  const Eigen::Index hw = t.plane_size();
  for (int c = 0; c < t.c; ++c) {
    auto blk = t.data.middleRows(static_cast<Eigen::Index>(c) * hw, hw);
    blk = ((blk.array() - static_cast<T>(norm.mean[c])) / static_cast<T>(norm.stddev[c])).matrix();
  }
}

namespace detail {

inline std::vector<std::vector<int>> epoch_index_batches(Eigen::Index n, int batch_size,
                                                         std::uint64_t seed, int epoch) {
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, {0x0EDu, static_cast<std::uint64_t>(epoch)}));
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (size_t i = 0; i < order.size(); i += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(order.size(), i + static_cast<size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace detail

// Epoch-shuffled, seeded batch iterator over an unlabeled few-shot set.
// Augmentation randomness is a pure function of (seed, epoch, sample index),
// so batch composition and per-sample transforms are independent.
template <typename T>
class FewShotLoader {
 public:
  FewShotLoader(const FewShotDataset<T>& data, int batch_size, std::uint64_t seed,
                AugmentConfig aug, Normalization norm)
      : data_(&data), batch_size_(batch_size), seed_(seed), aug_(aug), norm_(std::move(norm)) {
    require(batch_size >= 1, "loader: batch size must be >= 1");
    require(data.size() > 0, "loader: empty dataset");
  }

  std::vector<std::vector<int>> epoch_batches(int epoch) const {
    return detail::epoch_index_batches(data_->size(), batch_size_, seed_, epoch);
  }

  Tensor<T> load_batch(const std::vector<int>& indices, int epoch) const {
    const Tensor<T>& src = data_->samples;
    Tensor<T> batch(src.c, src.h, src.w, static_cast<Eigen::Index>(indices.size()));
    for (size_t i = 0; i < indices.size(); ++i) {
      Rng rng(mix_seed(seed_, {0xA26u, static_cast<std::uint64_t>(epoch),
                                static_cast<std::uint64_t>(indices[i])}));
      augment_sample(src.data.col(indices[i]).data(),
                     batch.data.col(static_cast<Eigen::Index>(i)).data(), src.c, src.h, src.w,
                     rng, aug_);
    }
    normalize_inplace(batch, norm_);
    return batch;
  }

  const Normalization& normalization() const { return norm_; }

 private:
  const FewShotDataset<T>* data_;
  int batch_size_;
  std::uint64_t seed_;
  AugmentConfig aug_;
  Normalization norm_;
};

template <typename T>
FewShotLoader<T> make_loader(const FewShotDataset<T>& data, int batch_size, std::uint64_t seed,
                             AugmentConfig aug = {}, Normalization norm = {}) {
  return FewShotLoader<T>(data, batch_size, seed, aug, std::move(norm));
}

// Labeled counterpart used for teacher training and evaluation.
template <typename T>
class LabeledLoader {
 public:
  LabeledLoader(const LabeledDataset<T>& data, int batch_size, std::uint64_t seed,
                AugmentConfig aug, Normalization norm, bool augment_on)
      : data_(&data), batch_size_(batch_size), seed_(seed), aug_(aug), norm_(std::move(norm)),
        augment_on_(augment_on) {
    require(batch_size >= 1, "loader: batch size must be >= 1");
    require(data.size() > 0, "loader: empty dataset");
  }

  std::vector<std::vector<int>> epoch_batches(int epoch) const {
    return detail::epoch_index_batches(data_->size(), batch_size_, seed_, epoch);
  }

  std::pair<Tensor<T>, std::vector<int>> load_batch(const std::vector<int>& indices,
                                                    int epoch) const {
    const Tensor<T>& src = data_->images;
    Tensor<T> batch(src.c, src.h, src.w, static_cast<Eigen::Index>(indices.size()));
    std::vector<int> labels(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
      if (augment_on_) {
        Rng rng(mix_seed(seed_, {0xA26u, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(indices[i])}));
        augment_sample(src.data.col(indices[i]).data(),
                       batch.data.col(static_cast<Eigen::Index>(i)).data(), src.c, src.h, src.w,
                       rng, aug_);
      } else {
        batch.data.col(static_cast<Eigen::Index>(i)) = src.data.col(indices[i]);
      }
      labels[i] = data_->labels[indices[i]];
    }
    normalize_inplace(batch, norm_);
    return {std::move(batch), std::move(labels)};
  }

 private:
  const LabeledDataset<T>* data_;
  int batch_size_;
  std::uint64_t seed_;
  AugmentConfig aug_;
  Normalization norm_;
  bool augment_on_;
};

}  // namespace graftkd
