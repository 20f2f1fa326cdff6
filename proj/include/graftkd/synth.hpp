#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "graftkd/fewshot.hpp"

namespace graftkd {

// ---------------------------------------------------------------------------
// Procedural 10-class image set ("shapes10"): parametric texture/shape
// families with random position, scale, colors, stripe frequency/phase and
// additive noise. Classes are invariant under horizontal flips so standard
// augmentation is label-preserving.
// ---------------------------------------------------------------------------
struct SynthSpec {
  int n_train = 5000;
  int n_test = 1000;
  int classes = 10;
  int size = 32;
  std::uint64_t seed = 7;
};

namespace detail {

inline double smoothstep01(double d) {
  // signed distance (pixels, negative inside) -> coverage in [0,1]
  return std::clamp(0.5 - d, 0.0, 1.0);
}

inline void synth_image(int cls, int size, Rng& rng, float* chw) {
  constexpr double kTau = 6.283185307179586;
  const double S = static_cast<double>(size);
  // background: linear gradient between two colors along a random direction
  double bgA[3], bgB[3], fg[3];
  for (int c = 0; c < 3; ++c) {
    bgA[c] = 0.05 + 0.9 * rng.uniform01();
    bgB[c] = std::clamp(bgA[c] + 0.45 * (rng.uniform01() - 0.5), 0.0, 1.0);
  }
  double dist = 0.0;
  do {
    dist = 0.0;
    for (int c = 0; c < 3; ++c) {
      fg[c] = 0.05 + 0.9 * rng.uniform01();
      const double mid = 0.5 * (bgA[c] + bgB[c]);
      dist += (fg[c] - mid) * (fg[c] - mid);
    }
  } while (std::sqrt(dist) < 0.45);
  const double gphi = kTau * rng.uniform01();
  const double gx = std::cos(gphi) / S, gy = std::sin(gphi) / S;

  const double cx = (0.32 + 0.36 * rng.uniform01()) * S;
  const double cy = (0.32 + 0.36 * rng.uniform01()) * S;
  const double r = (0.16 + 0.14 * rng.uniform01()) * S;
  // flip-symmetric rotation jitter: shapes up to +-30 deg, periodic patterns
  // up to +-12 deg so the three stripe orientations stay separated
  const double shape_rot = (rng.uniform01() - 0.5) * (kTau / 6.0);
  const double stripe_rot = (rng.uniform01() - 0.5) * (kTau / 15.0);
  const double lam = 4.0 + 5.0 * rng.uniform01();
  const double phase = kTau * rng.uniform01();
  const double diag_sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
  const double checker_lam = 3.0 + 3.0 * rng.uniform01();
  const double ox = rng.uniform01() * checker_lam, oy = rng.uniform01() * checker_lam;
  const double noise = 0.03 + 0.06 * rng.uniform01();
  const double brightness = 0.85 + 0.3 * rng.uniform01();

  const double cs = std::cos(shape_rot), sn = std::sin(shape_rot);
  const double base_angle = cls == 4 ? 0.0 : cls == 5 ? kTau / 4.0 : diag_sign * kTau / 8.0;
  const double sa = base_angle + stripe_rot;
  const double sx = std::cos(sa), sy = std::sin(sa);
  const double ccs = std::cos(stripe_rot), csn = std::sin(stripe_rot);

  auto stripe_alpha = [&](double coord) {
    const double s = std::sin(kTau * coord / lam + phase);
    return std::clamp(0.5 + s * lam / kTau, 0.0, 1.0);
  };

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dx0 = px - cx, dy0 = py - cy;
      // rotated shape frame
      const double dx = dx0 * cs + dy0 * sn;
      const double dy = -dx0 * sn + dy0 * cs;
      const double rad = std::sqrt(dx * dx + dy * dy);
      const double box = std::max(std::abs(dx), std::abs(dy));
      double alpha = 0.0;
      switch (cls) {
        case 0:  // disk
          alpha = smoothstep01(rad - r);
          break;
        case 1:  // ring
          alpha = smoothstep01(std::max(rad - r, 0.55 * r - rad));
          break;
        case 2:  // filled square
          alpha = smoothstep01(box - 0.85 * r);
          break;
        case 3:  // square outline
          alpha = smoothstep01(std::max(box - 0.85 * r, 0.5 * r - box));
          break;
        case 4:   // near-horizontal stripes
        case 5:   // near-vertical stripes
        case 6:   // diagonal stripes (either orientation)
          alpha = stripe_alpha(py * sx - px * sy);
          break;
        case 7: {  // checkerboard, slightly rotated
          const double ux = px * ccs + py * csn;
          const double uy = -px * csn + py * ccs;
          const long long ix = static_cast<long long>(std::floor((ux + ox) / checker_lam));
          const long long iy = static_cast<long long>(std::floor((uy + oy) / checker_lam));
          alpha = static_cast<double>((ix + iy) & 1LL);
          break;
        }
        case 8: {  // soft radial blob
          const double sig = 0.6 * r;
          alpha = std::exp(-rad * rad / (2.0 * sig * sig));
          break;
        }
        default:  // cross / plus
          alpha = smoothstep01(std::max(std::min(std::abs(dx), std::abs(dy)) - 0.3 * r,
                                        box - 1.1 * r));
          break;
      }
      const double t = std::clamp(0.5 + (px - 0.5 * S) * gx + (py - 0.5 * S) * gy, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        const double bg = bgA[c] + (bgB[c] - bgA[c]) * t;
        const double v = (bg + (fg[c] - bg) * alpha) * brightness + noise * rng.normal();
        chw[(static_cast<std::ptrdiff_t>(c) * size + y) * size + x] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

}  // namespace detail

template <typename T>
LabeledDataset<T> generate_synth_split(const SynthSpec& spec, int n, std::uint64_t split_tag) {
  require(spec.classes == 10, "synth: the shapes10 family defines exactly 10 classes");
  require(spec.size >= 16, "synth: image size must be >= 16");
  LabeledDataset<T> ds;
  ds.n_classes = spec.classes;
  ds.source_id = strf("synth://shapes10?size=%d&seed=%llu", spec.size,
                      static_cast<unsigned long long>(spec.seed));
  ds.images = Tensor<T>(3, spec.size, spec.size, n);
  ds.labels.resize(static_cast<size_t>(n));
  std::vector<float> buf(static_cast<size_t>(3) * spec.size * spec.size);
  for (int i = 0; i < n; ++i) {
    const int cls = i % spec.classes;
    Rng rng(mix_seed(spec.seed, {split_tag, static_cast<std::uint64_t>(i)}));
    detail::synth_image(cls, spec.size, rng, buf.data());
    for (size_t j = 0; j < buf.size(); ++j)
      ds.images.data(static_cast<Eigen::Index>(j), i) = static_cast<T>(buf[j]);
    ds.labels[static_cast<size_t>(i)] = cls;
  }
  return ds;
}

template <typename T>
std::pair<LabeledDataset<T>, LabeledDataset<T>> generate_synth(const SynthSpec& spec) {
  return {generate_synth_split<T>(spec, spec.n_train, 0xA11u),
          generate_synth_split<T>(spec, spec.n_test, 0xBEEu)};
}

// ---------------------------------------------------------------------------
// Packed array file (.gkp): magic "GKPACK01", then u32 count, u8 channels,
// u16 height, u16 width, u16 classes, followed by records of
// (u8 label, channels*h*w u8 pixels). Pixels quantize [0,1] to 0..255.
// ---------------------------------------------------------------------------
namespace detail {

template <typename V>
void write_pod(std::ofstream& f, V v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V read_pod(std::ifstream& f) {
  V v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(V));
  return v;
}

}  // namespace detail

template <typename T>
void save_packed(const std::string& path, const LabeledDataset<T>& ds) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "save_packed: cannot open " + path);
  f.write("GKPACK01", 8);
  detail::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(ds.size()));
  detail::write_pod<std::uint8_t>(f, static_cast<std::uint8_t>(ds.images.c));
  detail::write_pod<std::uint16_t>(f, static_cast<std::uint16_t>(ds.images.h));
  detail::write_pod<std::uint16_t>(f, static_cast<std::uint16_t>(ds.images.w));
  detail::write_pod<std::uint16_t>(f, static_cast<std::uint16_t>(ds.n_classes));
  std::vector<std::uint8_t> rec(static_cast<size_t>(ds.images.features()));
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    detail::write_pod<std::uint8_t>(f, static_cast<std::uint8_t>(ds.labels[i]));
    for (Eigen::Index j = 0; j < ds.images.features(); ++j) {
      const double v = std::clamp(static_cast<double>(ds.images.data(j, i)), 0.0, 1.0);
      rec[static_cast<size_t>(j)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    f.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
  require(f.good(), "save_packed: write failed for " + path);
}

template <typename T>
LabeledDataset<T> load_packed(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "load_packed: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  require(std::string(magic, 8) == "GKPACK01", "load_packed: bad magic in " + path);
  const auto n = detail::read_pod<std::uint32_t>(f);
  const int c = detail::read_pod<std::uint8_t>(f);
  const int h = detail::read_pod<std::uint16_t>(f);
  const int w = detail::read_pod<std::uint16_t>(f);
  const int classes = detail::read_pod<std::uint16_t>(f);
  LabeledDataset<T> ds;
  ds.n_classes = classes;
  ds.source_id = path;
  ds.images = Tensor<T>(c, h, w, n);
  ds.labels.resize(n);
  std::vector<std::uint8_t> rec(static_cast<size_t>(c) * h * w);
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.labels[i] = detail::read_pod<std::uint8_t>(f);
    f.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    for (size_t j = 0; j < rec.size(); ++j)
      ds.images.data(static_cast<Eigen::Index>(j), i) = static_cast<T>(rec[j] / 255.0);
  }
  require(f.good(), "load_packed: truncated file " + path);
  return ds;
}

// CIFAR-10 binary batches: records of (u8 label, 3072 u8 pixels), channel-major
// 32x32 RGB, no header. Recognized by record-aligned file size.
template <typename T>
void append_cifar_bin(const std::string& path, LabeledDataset<T>& ds) {
  namespace fs = std::filesystem;
  const auto bytes = fs::file_size(path);
  require(bytes % 3073 == 0, "cifar bin: file size not a multiple of 3073: " + path);
  const Eigen::Index n = static_cast<Eigen::Index>(bytes / 3073);
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cifar bin: cannot open " + path);
  const Eigen::Index base = ds.images.batch();
  if (base == 0) {
    ds.images = Tensor<T>(3, 32, 32, n);
  } else {
    ds.images.data.conservativeResize(Eigen::NoChange, base + n);
  }
  ds.labels.resize(static_cast<size_t>(base + n));
  std::vector<std::uint8_t> rec(3072);
  for (Eigen::Index i = 0; i < n; ++i) {
    ds.labels[static_cast<size_t>(base + i)] = detail::read_pod<std::uint8_t>(f);
    f.read(reinterpret_cast<char*>(rec.data()), 3072);
    for (size_t j = 0; j < rec.size(); ++j)
      ds.images.data(static_cast<Eigen::Index>(j), base + i) = static_cast<T>(rec[j] / 255.0);
  }
  ds.n_classes = 10;
  ds.source_id = path;
}

// ---------------------------------------------------------------------------
// Locator resolution. Three forms:
//   synth://shapes10?train=5000&test=1000&seed=7[&size=32]
//   <dir>  containing train.gkp + test.gkp, or CIFAR-style data_batch_*.bin
//          plus test_batch.bin
//   <file>.gkp used for both splits is rejected; a directory is required for
//          file-backed sources so train/test stay distinct.
// ---------------------------------------------------------------------------
inline std::map<std::string, std::string> parse_query(const std::string& q) {
  std::map<std::string, std::string> out;
  size_t pos = 0;
  while (pos < q.size()) {
    size_t amp = q.find('&', pos);
    if (amp == std::string::npos) amp = q.size();
    const std::string kv = q.substr(pos, amp - pos);
    const size_t eq = kv.find('=');
    require(eq != std::string::npos, "locator: malformed query parameter '" + kv + "'");
    out[kv.substr(0, eq)] = kv.substr(eq + 1);
    pos = amp + 1;
  }
  return out;
}

template <typename T>
std::pair<LabeledDataset<T>, LabeledDataset<T>> load_source(const std::string& locator) {
  namespace fs = std::filesystem;
  if (locator.rfind("synth://", 0) == 0) {
    std::string rest = locator.substr(8);
    std::string family = rest, query;
    if (const size_t qpos = rest.find('?'); qpos != std::string::npos) {
      family = rest.substr(0, qpos);
      query = rest.substr(qpos + 1);
    }
    require(family == "shapes10", "locator: unknown synthetic family '" + family + "'");
    auto params = parse_query(query);
    SynthSpec spec;
    if (params.count("train")) spec.n_train = std::stoi(params["train"]);
    if (params.count("test")) spec.n_test = std::stoi(params["test"]);
    if (params.count("seed")) spec.seed = std::stoull(params["seed"]);
    if (params.count("size")) spec.size = std::stoi(params["size"]);
    return generate_synth<T>(spec);
  }
  require(fs::exists(locator), "locator: path does not exist: " + locator);
  require(fs::is_directory(locator),
          "locator: expected a directory with train/test splits (or a synth:// locator): " +
              locator);
  const fs::path dir(locator);
  if (fs::exists(dir / "train.gkp") && fs::exists(dir / "test.gkp")) {
    return {load_packed<T>((dir / "train.gkp").string()),
            load_packed<T>((dir / "test.gkp").string())};
  }
  // CIFAR-style directory
  std::vector<std::string> train_bins;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("data_batch", 0) == 0 && name.ends_with(".bin"))
      train_bins.push_back(e.path().string());
  }
  std::sort(train_bins.begin(), train_bins.end());
  require(!train_bins.empty() && fs::exists(dir / "test_batch.bin"),
          "locator: directory has neither train.gkp/test.gkp nor CIFAR data_batch_*.bin + "
          "test_batch.bin: " + locator);
  LabeledDataset<T> train, test;
  for (const auto& p : train_bins) append_cifar_bin(p, train);
  append_cifar_bin((dir / "test_batch.bin").string(), test);
  train.source_id = locator;
  test.source_id = locator;
  return {std::move(train), std::move(test)};
}

}  // namespace graftkd
