#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "graftkd/layers.hpp"

namespace graftkd {

// Channel/spatial contract at a block boundary. in/out channel widths, the
// cumulative downsampling factor applied inside the block, and the spatial
// resolution expected at block entry.
struct BoundarySignature {
  int in_channels = 0;
  int out_channels = 0;
  int spatial_stride = 1;
  std::pair<int, int> input_resolution{0, 0};  // (height, width)

  std::pair<int, int> output_resolution() const {
    return {input_resolution.first / spatial_stride, input_resolution.second / spatial_stride};
  }
};

// A contiguous run of layers delimited at downsampling boundaries. Every
// graftable block starts with a convolution (or an op whose entry is a
// convolution), which the adaption-fold relies on.
template <typename T>
struct Block {
  std::vector<Layer<T>> layers;
  BoundarySignature sig;

  using Cache = std::vector<LayerCache<T>>;

  Tensor<T> forward(const Tensor<T>& x, bool train, Cache* cache) {
    if (cache) cache->resize(layers.size());
    Tensor<T> cur = x;
    for (size_t i = 0; i < layers.size(); ++i) {
      cur = layer_forward(layers[i], cur, train, cache ? &(*cache)[i] : nullptr);
    }
    return cur;
  }

  // Frozen forward: batch-norm uses running statistics, nothing mutates.
  Tensor<T> forward_frozen(const Tensor<T>& x, Cache* cache) const {
    return const_cast<Block*>(this)->forward(x, /*train=*/false, cache);
  }

  Tensor<T> eval(const Tensor<T>& x) const { return forward_frozen(x, nullptr); }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache, const GradLookup<T>& gl,
                     bool need_dx) const {
    Tensor<T> cur = dy;
    for (size_t i = layers.size(); i-- > 0;) {
      const bool dx_needed = need_dx || i > 0;
      cur = layer_backward(layers[i], cur, cache[i], gl, dx_needed);
    }
    return cur;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    for (size_t i = 0; i < layers.size(); ++i) {
      layer_visit_params(layers[i], prefix + "/l" + std::to_string(i), fn);
    }
  }
  template <typename Fn>
  void visit_state(const std::string& prefix, Fn&& fn) {
    for (size_t i = 0; i < layers.size(); ++i) {
      layer_visit_state(layers[i], prefix + "/l" + std::to_string(i), fn);
    }
  }
};

// An ordered chain of blocks plus an optional classifier head; the composite
// maps an input image batch to a logit batch.
template <typename T>
struct BlockwiseNetwork {
  std::vector<Block<T>> blocks;
  std::optional<Block<T>> head;
  std::string arch_name;
  int n_classes = 0;

  int block_count() const { return static_cast<int>(blocks.size()); }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    Tensor<T> cur = x;
    for (auto& b : blocks) cur = b.forward(cur, train, nullptr);
    if (head) cur = head->forward(cur, train, nullptr);
    return cur;
  }

  Tensor<T> eval(const Tensor<T>& x) const {
    Tensor<T> cur = x;
    for (const auto& b : blocks) cur = b.eval(cur);
    if (head) cur = head->eval(cur);
    return cur;
  }

  // logits as (classes x batch)
  MatrixX<T> logits(const Tensor<T>& x) const { return eval(x).data; }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit_params(prefix + "/b" + std::to_string(i + 1), fn);
    if (head) head->visit_params(prefix + "/head", fn);
  }
  template <typename Fn>
  void visit_state(const std::string& prefix, Fn&& fn) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit_state(prefix + "/b" + std::to_string(i + 1), fn);
    if (head) head->visit_state(prefix + "/head", fn);
  }
};

// Architecture descriptor resolved against the registry.
struct ArchSpec {
  std::string name;
  int classes = 10;
  int width = 16;  // base channel width for parameterized families
  int in_channels = 3;
  std::pair<int, int> resolution{32, 32};
};

namespace detail {

// Validates the boundary chain and reports the first violating boundary.
template <typename T>
void validate_chain(const std::vector<Block<T>>& blocks, int in_channels,
                    std::pair<int, int> resolution) {
  require(blocks.size() >= 2, "network must have at least 2 blocks");
  int ch = in_channels;
  auto res = resolution;
  for (size_t l = 0; l < blocks.size(); ++l) {
    const auto& s = blocks[l].sig;
    require(s.spatial_stride >= 1, strf("block %zu: spatial_stride must be >= 1", l + 1));
    if (s.in_channels != ch)
      fail(strf("inconsistent channel chain at boundary %zu: expected in_channels=%d, got %d",
                l, ch, s.in_channels));
    if (s.input_resolution != res)
      fail(strf("inconsistent resolution at boundary %zu: expected %dx%d, got %dx%d", l,
                res.first, res.second, s.input_resolution.first, s.input_resolution.second));
    ch = s.out_channels;
    res = {res.first / s.spatial_stride, res.second / s.spatial_stride};
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------
template <typename T>
class ArchRegistry {
 public:
  using Builder = std::function<BlockwiseNetwork<T>(const ArchSpec&, Rng&)>;

  static ArchRegistry& instance() {
    static ArchRegistry reg;
    return reg;
  }

  void add(const std::string& name, Builder b) { builders_[name] = std::move(b); }

  bool contains(const std::string& name) const { return builders_.count(name) > 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : builders_) out.push_back(k);
    return out;
  }

  BlockwiseNetwork<T> build(const ArchSpec& spec, Rng& rng) const {
    auto it = builders_.find(spec.name);
    if (it == builders_.end()) fail("unknown architecture: " + spec.name);
    return it->second(spec, rng);
  }

 private:
  ArchRegistry();
  std::map<std::string, Builder> builders_;
};

namespace detail {

template <typename T>
Block<T> conv_bn_relu_block(int in_ch, int out_ch, std::pair<int, int> res, bool pool, Rng& rng,
                            int extra_convs = 0) {
  Block<T> b;
  b.layers.push_back(Conv2d<T>::make(in_ch, out_ch, 3, 1, 1, true, rng));
  b.layers.push_back(BatchNorm2d<T>::make(out_ch));
  b.layers.push_back(ReLU<T>{});
  for (int i = 0; i < extra_convs; ++i) {
    b.layers.push_back(Conv2d<T>::make(out_ch, out_ch, 3, 1, 1, true, rng));
    b.layers.push_back(BatchNorm2d<T>::make(out_ch));
    b.layers.push_back(ReLU<T>{});
  }
  if (pool) b.layers.push_back(MaxPool2d<T>{2, 2});
  b.sig = {in_ch, out_ch, pool ? 2 : 1, res};
  return b;
}

// 4 blocks of paired 3x3 convolutions (the common conv-conv-pool pattern),
// base width w doubling to 4w.
template <typename T>
BlockwiseNetwork<T> build_toy_cnn(const ArchSpec& spec, Rng& rng) {
  const int w = spec.width;
  require(w >= 1, "toy-cnn-4block: width must be positive");
  const auto [rh, rw] = spec.resolution;
  BlockwiseNetwork<T> net;
  net.arch_name = spec.name;
  net.n_classes = spec.classes;
  net.blocks.push_back(
      conv_bn_relu_block<T>(spec.in_channels, w, {rh, rw}, false, rng, /*extra_convs=*/1));
  net.blocks.push_back(conv_bn_relu_block<T>(w, 2 * w, {rh, rw}, true, rng, 1));
  net.blocks.push_back(conv_bn_relu_block<T>(2 * w, 4 * w, {rh / 2, rw / 2}, true, rng, 1));
  net.blocks.push_back(conv_bn_relu_block<T>(4 * w, 4 * w, {rh / 4, rw / 4}, true, rng, 1));
  const int feat = 4 * w * (rh / 8) * (rw / 8);
  Block<T> head;
  head.layers.push_back(Flatten<T>{});
  head.layers.push_back(Linear<T>::make(feat, spec.classes, true, rng));
  head.sig = {4 * w, spec.classes, 1, {rh / 8, rw / 8}};
  net.head = std::move(head);
  return net;
}

template <typename T>
BlockwiseNetwork<T> build_toy_resnet(const ArchSpec& spec, Rng& rng) {
  const int w = spec.width;
  require(w >= 1, "toy-resnet-4block: width must be positive");
  const auto [rh, rw] = spec.resolution;
  BlockwiseNetwork<T> net;
  net.arch_name = spec.name;
  net.n_classes = spec.classes;
  // Block 1: conv stem + identity-skip unit; blocks 2..4 start with a
  // projection unit so the adaption-fold has a convolution on every input path.
  Block<T> b1;
  b1.layers.push_back(Conv2d<T>::make(spec.in_channels, w, 3, 1, 1, true, rng));
  b1.layers.push_back(BatchNorm2d<T>::make(w));
  b1.layers.push_back(ReLU<T>{});
  b1.layers.push_back(Residual<T>::make(w, w, 1, rng));
  b1.sig = {spec.in_channels, w, 1, {rh, rw}};
  net.blocks.push_back(std::move(b1));
  auto res_block = [&](int in_ch, int out_ch, std::pair<int, int> res) {
    Block<T> b;
    b.layers.push_back(Residual<T>::make(in_ch, out_ch, 2, rng));
    b.sig = {in_ch, out_ch, 2, res};
    return b;
  };
  net.blocks.push_back(res_block(w, 2 * w, {rh, rw}));
  net.blocks.push_back(res_block(2 * w, 4 * w, {rh / 2, rw / 2}));
  net.blocks.push_back(res_block(4 * w, 4 * w, {rh / 4, rw / 4}));
  const int feat = 4 * w * (rh / 8) * (rw / 8);
  Block<T> head;
  head.layers.push_back(Flatten<T>{});
  head.layers.push_back(Linear<T>::make(feat, spec.classes, true, rng));
  head.sig = {4 * w, spec.classes, 1, {rh / 8, rw / 8}};
  net.head = std::move(head);
  return net;
}

// VGG16 variant for 32x32 inputs: 13 convs with batch norm grouped into five
// pool-terminated blocks, classifier 512-512-classes. This follows the common
// CIFAR adaptation of VGG16; channel widths are scaled by `scale`.
template <typename T>
BlockwiseNetwork<T> build_vgg16(const ArchSpec& spec, Rng& rng, int scale_div) {
  const auto [rh, rw] = spec.resolution;
  auto ch = [&](int full) { return full / scale_div; };
  BlockwiseNetwork<T> net;
  net.arch_name = spec.name;
  net.n_classes = spec.classes;
  struct Group {
    int out_ch;
    int convs;
  };
  const Group groups[5] = {{64, 2}, {128, 2}, {256, 3}, {512, 3}, {512, 3}};
  int in_ch = spec.in_channels;
  std::pair<int, int> res = {rh, rw};
  for (const auto& g : groups) {
    const int out_ch = ch(g.out_ch);
    Block<T> b;
    int cur = in_ch;
    for (int i = 0; i < g.convs; ++i) {
      b.layers.push_back(Conv2d<T>::make(cur, out_ch, 3, 1, 1, true, rng));
      b.layers.push_back(BatchNorm2d<T>::make(out_ch));
      b.layers.push_back(ReLU<T>{});
      cur = out_ch;
    }
    b.layers.push_back(MaxPool2d<T>{2, 2});
    b.sig = {in_ch, out_ch, 2, res};
    net.blocks.push_back(std::move(b));
    in_ch = out_ch;
    res = {res.first / 2, res.second / 2};
  }
  const int feat = in_ch * res.first * res.second;
  Block<T> head;
  head.layers.push_back(Flatten<T>{});
  head.layers.push_back(Linear<T>::make(feat, 512, true, rng));
  head.layers.push_back(ReLU<T>{});
  head.layers.push_back(Linear<T>::make(512, spec.classes, true, rng));
  head.sig = {in_ch, spec.classes, 1, res};
  net.head = std::move(head);
  return net;
}

}  // namespace detail

template <typename T>
ArchRegistry<T>::ArchRegistry() {
  builders_["toy-cnn-4block"] = [](const ArchSpec& s, Rng& r) {
    return detail::build_toy_cnn<T>(s, r);
  };
  builders_["toy-resnet-4block"] = [](const ArchSpec& s, Rng& r) {
    return detail::build_toy_resnet<T>(s, r);
  };
  builders_["vgg16-cifar"] = [](const ArchSpec& s, Rng& r) {
    return detail::build_vgg16<T>(s, r, 1);
  };
  builders_["vgg16-half-cifar"] = [](const ArchSpec& s, Rng& r) {
    return detail::build_vgg16<T>(s, r, 2);
  };
}

// Builds a registered architecture, validates its boundary chain, and
// initializes parameters (He scheme) deterministically under `seed`.
template <typename T>
BlockwiseNetwork<T> build_network(const ArchSpec& spec, std::uint64_t seed) {
  Rng rng(mix_seed(seed, {0x2e7u}));
  BlockwiseNetwork<T> net = ArchRegistry<T>::instance().build(spec, rng);
  detail::validate_chain(net.blocks, spec.in_channels, spec.resolution);
  return net;
}

// The L blocks in forward order, classifier head folded into the last block
// so the chain reproduces the full network forward exactly.
template <typename T>
std::vector<Block<T>> decompose(const BlockwiseNetwork<T>& network) {
  std::vector<Block<T>> out = network.blocks;
  if (network.head) {
    Block<T>& last = out.back();
    for (const auto& l : network.head->layers) last.layers.push_back(l);
    last.sig.out_channels = network.n_classes;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------
template <typename T>
long long count_params(const Block<T>& block) {
  long long n = 0;
  for (const auto& l : block.layers) n += layer_param_count(l);
  return n;
}

template <typename T>
long long count_params(const BlockwiseNetwork<T>& net) {
  long long n = 0;
  for (const auto& b : net.blocks) n += count_params(b);
  if (net.head) n += count_params(*net.head);
  return n;
}

// FLOPs for one forward pass at the given input shape, counting each
// multiply-accumulate of convolution/affine layers as 2 FLOPs. Padded border
// positions count full kernel MACs; normalization, activation and pooling
// contribute zero. The convention string travels with reports.
inline constexpr const char* kFlopConvention =
    "MAC=2 FLOPs; convolution and affine MACs only, full kernel at padded borders";

template <typename T>
long long count_flops_block(const Block<T>& block, int& c, int& h, int& w) {
  long long flops = 0;
  for (const auto& l : block.layers) {
    std::visit(
        [&](const auto& v) {
          using L = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            require(c == v.in_ch, strf("flops: channel mismatch (%d vs %d)", c, v.in_ch));
            const auto [ho, wo] = v.out_hw(h, w);
            flops += 2LL * v.out_ch * v.in_ch * v.ksize * v.ksize * ho * wo;
            c = v.out_ch;
            h = ho;
            w = wo;
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            require(c * h * w == v.in_features, "flops: linear feature mismatch");
            flops += 2LL * v.in_features * v.out_features;
            c = v.out_features;
            h = 1;
            w = 1;
          } else if constexpr (std::is_same_v<L, MaxPool2d<T>>) {
            auto [ho, wo] = v.out_hw(h, w);
            h = ho;
            w = wo;
          } else if constexpr (std::is_same_v<L, Flatten<T>>) {
            c = c * h * w;
            h = 1;
            w = 1;
          } else if constexpr (std::is_same_v<L, Residual<T>>) {
            const auto [ho, wo] = v.conv1.out_hw(h, w);
            flops += 2LL * v.conv1.out_ch * v.conv1.in_ch * 9 * ho * wo;
            flops += 2LL * v.conv2.out_ch * v.conv2.in_ch * 9 * ho * wo;
            if (v.proj) flops += 2LL * v.proj->out_ch * v.proj->in_ch * ho * wo;
            c = v.conv2.out_ch;
            h = ho;
            w = wo;
          }
        },
        l);
  }
  return flops;
}

template <typename T>
long long count_flops(const BlockwiseNetwork<T>& net, int in_channels, int height, int width) {
  require(!net.blocks.empty(), "count_flops: empty network");
  const auto& s0 = net.blocks.front().sig;
  require(in_channels == s0.in_channels && std::make_pair(height, width) == s0.input_resolution,
          strf("count_flops: input shape (%d,%d,%d) does not match network entry (%d,%d,%d)",
               in_channels, height, width, s0.in_channels, s0.input_resolution.first,
               s0.input_resolution.second));
  int c = in_channels, h = height, w = width;
  long long flops = 0;
  for (const auto& b : net.blocks) flops += count_flops_block(b, c, h, w);
  if (net.head) flops += count_flops_block(*net.head, c, h, w);
  return flops;
}

}  // namespace graftkd
