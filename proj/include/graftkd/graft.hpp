#pragma once

#include <map>
#include <optional>
#include <vector>

#include "graftkd/netzoo.hpp"

namespace graftkd {

enum class AdaptionDirection { teacher_to_student, student_to_teacher };

inline const char* to_string(AdaptionDirection d) {
  return d == AdaptionDirection::teacher_to_student ? "t2s" : "s2t";
}

// Bias-free pointwise (1x1) channel map: out[c] = sum_i W(c,i) * in[i] at
// every spatial location. Purely linear so it can later be folded away.
template <typename T>
struct AdaptionModule {
  AdaptionDirection direction = AdaptionDirection::teacher_to_student;
  MatrixX<T> weight;  // out_channels x in_channels

  struct Cache {
    Tensor<T> input;
  };

  int in_channels() const { return static_cast<int>(weight.cols()); }
  int out_channels() const { return static_cast<int>(weight.rows()); }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    require(x.c == in_channels(),
            strf("adaption: expected %d channels, got %d", in_channels(), x.c));
    Tensor<T> out(out_channels(), x.h, x.w, x.batch());
    for (Eigen::Index b = 0; b < x.batch(); ++b) {
      out.plane(b).noalias() = weight * x.cplane(b);
    }
    if (cache) cache->input = x;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cc, const GradLookup<T>& gl,
                     bool need_dx) const {
    MatrixX<T>* dw = gl.find(weight);
    Tensor<T> dx;
    if (need_dx) dx = Tensor<T>(in_channels(), dy.h, dy.w, dy.batch());
    for (Eigen::Index b = 0; b < dy.batch(); ++b) {
      ConstPlaneMap<T> dyp(dy.data.col(b).data(), out_channels(), dy.plane_size());
      if (dw) dw->noalias() += dyp * cc.input.cplane(b).transpose();
      if (need_dx) dx.plane(b).noalias() = weight.transpose() * dyp;
    }
    return dx;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    fn(prefix + "/weight", weight);
  }
  template <typename Fn>
  void visit_state(const std::string& prefix, Fn&& fn) {
    visit_params(prefix, fn);
  }
};

template <typename T>
AdaptionModule<T> make_adaption(int in_channels, int out_channels, AdaptionDirection direction,
                                std::uint64_t seed) {
  require(in_channels > 0 && out_channels > 0,
          strf("adaption: channel counts must be positive (got %d -> %d)", in_channels,
               out_channels));
  AdaptionModule<T> a;
  a.direction = direction;
  a.weight.resize(out_channels, in_channels);
  Rng rng(mix_seed(seed, {0xADA, static_cast<std::uint64_t>(direction)}));
  he_init(a.weight, in_channels, rng);
  return a;
}

// Student block h_l wrapped in channel adaptions so it spans teacher
// boundaries: H_l = post . h_l . pre, with pre absent at l=1 and post absent
// at l=L.
template <typename T>
struct WrappedScion {
  int index = 1;       // l, 1-based
  int block_count = 0;  // L
  std::optional<AdaptionModule<T>> pre;   // teacher ch at boundary l-1 -> student in
  Block<T> core;                          // h_l
  std::optional<AdaptionModule<T>> post;  // student out -> teacher ch at boundary l

  struct Cache {
    typename AdaptionModule<T>::Cache pre_c, post_c;
    typename Block<T>::Cache core_c;
  };

  Tensor<T> forward(const Tensor<T>& x, bool train, Cache* cache) {
    Tensor<T> cur = x;
    if (pre) cur = pre->forward(cur, cache ? &cache->pre_c : nullptr);
    cur = core.forward(cur, train, cache ? &cache->core_c : nullptr);
    if (post) cur = post->forward(cur, cache ? &cache->post_c : nullptr);
    return cur;
  }

  Tensor<T> forward_frozen(const Tensor<T>& x, Cache* cache) const {
    return const_cast<WrappedScion*>(this)->forward(x, /*train=*/false, cache);
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cc, const GradLookup<T>& gl,
                     bool need_dx) const {
    Tensor<T> cur = dy;
    if (post) cur = post->backward(cur, cc.post_c, gl, true);
    cur = core.backward(cur, cc.core_c, gl, need_dx || pre.has_value());
    if (pre) cur = pre->backward(cur, cc.pre_c, gl, need_dx);
    return cur;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    if (pre) pre->visit_params(prefix + "/pre", fn);
    core.visit_params(prefix + "/core", fn);
    if (post) post->visit_params(prefix + "/post", fn);
  }
  template <typename Fn>
  void visit_state(const std::string& prefix, Fn&& fn) {
    if (pre) pre->visit_state(prefix + "/pre", fn);
    core.visit_state(prefix + "/core", fn);
    if (post) post->visit_state(prefix + "/post", fn);
  }

  long long param_count() const {
    long long n = count_params(core);
    if (pre) n += pre->weight.size();
    if (post) n += post->weight.size();
    return n;
  }
};

// Wraps a student block for position l of an L-block teacher whose decomposed
// boundary signatures are `teacher_sigs`. Adaption sizes follow the channel
// mismatch; spatial strides must agree or the shapes downstream diverge.
template <typename T>
WrappedScion<T> wrap_scion(const Block<T>& h_l, int l, int L,
                           const std::vector<BoundarySignature>& teacher_sigs,
                           std::uint64_t seed) {
  require(L >= 2 && static_cast<int>(teacher_sigs.size()) == L,
          "wrap_scion: teacher signature list must cover all L blocks");
  require(l >= 1 && l <= L, strf("wrap_scion: index %d outside 1..%d", l, L));
  const BoundarySignature& tsig = teacher_sigs[l - 1];
  if (h_l.sig.spatial_stride != tsig.spatial_stride)
    fail(strf("wrap_scion: stride mismatch at block %d: student stride %d vs teacher stride %d",
              l, h_l.sig.spatial_stride, tsig.spatial_stride));
  WrappedScion<T> s;
  s.index = l;
  s.block_count = L;
  s.core = h_l;
  if (l > 1) {
    s.pre = make_adaption<T>(teacher_sigs[l - 2].out_channels, h_l.sig.in_channels,
                             AdaptionDirection::teacher_to_student, mix_seed(seed, {(std::uint64_t)l, 1}));
  } else {
    require(h_l.sig.in_channels == tsig.in_channels,
            strf("wrap_scion: block 1 input channels %d must equal teacher input %d",
                 h_l.sig.in_channels, tsig.in_channels));
  }
  if (l < L) {
    s.post = make_adaption<T>(h_l.sig.out_channels, tsig.out_channels,
                              AdaptionDirection::student_to_teacher, mix_seed(seed, {(std::uint64_t)l, 2}));
  } else {
    require(h_l.sig.out_channels == tsig.out_channels,
            strf("wrap_scion: last block output %d must equal teacher output %d",
                 h_l.sig.out_channels, tsig.out_channels));
  }
  return s;
}

// Wraps every block of a student network against a teacher's decomposed
// signatures. Both networks must already satisfy their own chain invariants,
// which keeps the later adaption compositions square.
template <typename T>
std::vector<WrappedScion<T>> wrap_student(const BlockwiseNetwork<T>& student,
                                          const std::vector<BoundarySignature>& teacher_sigs,
                                          std::uint64_t seed) {
  auto sblocks = decompose(student);
  const int L = static_cast<int>(teacher_sigs.size());
  require(static_cast<int>(sblocks.size()) == L,
          strf("wrap_student: student has %zu blocks, teacher has %d", sblocks.size(), L));
  std::vector<WrappedScion<T>> out;
  out.reserve(sblocks.size());
  for (int l = 1; l <= L; ++l) out.push_back(wrap_scion(sblocks[l - 1], l, L, teacher_sigs, seed));
  return out;
}

// Teacher-copy scions with identity adaptions. Every grafted composite and
// the finalized student built from these reproduce the teacher exactly.
template <typename T>
std::vector<WrappedScion<T>> wrap_identity(const BlockwiseNetwork<T>& teacher) {
  auto blocks = decompose(teacher);
  const int L = static_cast<int>(blocks.size());
  std::vector<WrappedScion<T>> out;
  out.reserve(blocks.size());
  for (int l = 1; l <= L; ++l) {
    WrappedScion<T> s;
    s.index = l;
    s.block_count = L;
    s.core = blocks[static_cast<size_t>(l - 1)];
    if (l > 1) {
      AdaptionModule<T> a;
      a.direction = AdaptionDirection::teacher_to_student;
      const int ch = s.core.sig.in_channels;
      a.weight = MatrixX<T>::Identity(ch, ch);
      s.pre = std::move(a);
    }
    if (l < L) {
      AdaptionModule<T> a;
      a.direction = AdaptionDirection::student_to_teacher;
      const int ch = s.core.sig.out_channels;
      a.weight = MatrixX<T>::Identity(ch, ch);
      s.post = std::move(a);
    }
    out.push_back(std::move(s));
  }
  return out;
}

enum class GraftKind { block_graft, net_graft };

// Hybrid composite of frozen teacher blocks and trainable scions. Teacher
// blocks always run frozen (running statistics, no gradient application);
// scion cores honour the train flag.
template <typename T>
struct GraftedModel {
  GraftKind kind = GraftKind::block_graft;
  std::vector<Block<T>> teacher_blocks;  // decomposed teacher, head folded into last
  std::vector<BoundarySignature> teacher_sigs;
  std::map<int, WrappedScion<T>> scions;
  int graft_depth = 0;  // block_graft: the grafted index; net_graft: scions occupy 1..depth
  int n_classes = 0;

  struct Cache {
    std::vector<typename Block<T>::Cache> teacher;
    std::map<int, typename WrappedScion<T>::Cache> scion;
  };

  int block_count() const { return static_cast<int>(teacher_blocks.size()); }

  Tensor<T> forward(const Tensor<T>& x, bool train, Cache* cache) {
    if (cache) cache->teacher.resize(teacher_blocks.size());
    Tensor<T> cur = x;
    for (int l = 1; l <= block_count(); ++l) {
      auto it = scions.find(l);
      if (it != scions.end()) {
        cur = it->second.forward(cur, train, cache ? &cache->scion[l] : nullptr);
      } else {
        cur = teacher_blocks[l - 1].forward_frozen(cur, cache ? &cache->teacher[l - 1] : nullptr);
      }
    }
    return cur;
  }

  Tensor<T> eval(const Tensor<T>& x) const {
    return const_cast<GraftedModel*>(this)->forward(x, /*train=*/false, nullptr);
  }

  MatrixX<T> logits(const Tensor<T>& x) const { return eval(x).data; }

  void backward(const Tensor<T>& dlogits, const Cache& cache, const GradLookup<T>& gl) const {
    Tensor<T> cur = dlogits;
    for (int l = block_count(); l >= 1; --l) {
      const bool need_dx = l > 1;
      auto it = scions.find(l);
      if (it != scions.end()) {
        cur = it->second.backward(cur, cache.scion.at(l), gl, need_dx);
      } else {
        cur = teacher_blocks[l - 1].backward(cur, cache.teacher[l - 1], gl, need_dx);
      }
    }
  }

  template <typename Fn>
  void visit_teacher_state(Fn&& fn) {
    for (size_t i = 0; i < teacher_blocks.size(); ++i)
      teacher_blocks[i].visit_state("teacher/b" + std::to_string(i + 1), fn);
  }
  template <typename Fn>
  void visit_state(Fn&& fn) {
    visit_teacher_state(fn);
    for (auto& [l, s] : scions) s.visit_state("scion" + std::to_string(l), fn);
  }
};

namespace detail {

template <typename T>
void check_scion_boundaries(const WrappedScion<T>& s,
                            const std::vector<BoundarySignature>& sigs) {
  const int l = s.index;
  const int L = static_cast<int>(sigs.size());
  require(s.block_count == L, strf("scion %d was wrapped for L=%d, teacher has L=%d", l,
                                   s.block_count, L));
  const int want_in = (l == 1) ? sigs[0].in_channels : sigs[l - 2].out_channels;
  const int have_in = s.pre ? s.pre->in_channels() : s.core.sig.in_channels;
  require(have_in == want_in,
          strf("scion %d boundary mismatch: consumes %d channels, teacher provides %d", l,
               have_in, want_in));
  if (s.pre)
    require(s.pre->out_channels() == s.core.sig.in_channels,
            strf("scion %d: pre-adaption emits %d channels, core expects %d", l,
                 s.pre->out_channels(), s.core.sig.in_channels));
  const int want_out = sigs[l - 1].out_channels;
  const int have_out = s.post ? s.post->out_channels() : s.core.sig.out_channels;
  require(have_out == want_out,
          strf("scion %d boundary mismatch: emits %d channels, teacher expects %d", l, have_out,
               want_out));
  if (s.post)
    require(s.post->in_channels() == s.core.sig.out_channels,
            strf("scion %d: post-adaption consumes %d channels, core emits %d", l,
                 s.post->in_channels(), s.core.sig.out_channels));
}

template <typename T>
std::vector<BoundarySignature> decomposed_sigs(const std::vector<Block<T>>& blocks) {
  std::vector<BoundarySignature> sigs;
  sigs.reserve(blocks.size());
  for (const auto& b : blocks) sigs.push_back(b.sig);
  return sigs;
}

}  // namespace detail

// T_l^B: one teacher block replaced by a wrapped scion.
template <typename T>
GraftedModel<T> graft_block(const BlockwiseNetwork<T>& teacher, const WrappedScion<T>& scion) {
  GraftedModel<T> m;
  m.kind = GraftKind::block_graft;
  m.teacher_blocks = decompose(teacher);
  m.teacher_sigs = detail::decomposed_sigs(m.teacher_blocks);
  m.n_classes = teacher.n_classes;
  require(scion.index >= 1 && scion.index <= m.block_count(),
          strf("graft_block: index %d outside 1..%d", scion.index, m.block_count()));
  detail::check_scion_boundaries(scion, m.teacher_sigs);
  m.graft_depth = scion.index;
  m.scions.emplace(scion.index, scion);
  return m;
}

// T_l^N: teacher blocks 1..l replaced by the scion prefix.
template <typename T>
GraftedModel<T> graft_prefix(const BlockwiseNetwork<T>& teacher,
                             const std::vector<WrappedScion<T>>& scions) {
  require(!scions.empty(), "graft_prefix: need at least one scion");
  GraftedModel<T> m;
  m.kind = GraftKind::net_graft;
  m.teacher_blocks = decompose(teacher);
  m.teacher_sigs = detail::decomposed_sigs(m.teacher_blocks);
  m.n_classes = teacher.n_classes;
  const int depth = static_cast<int>(scions.size());
  require(depth <= m.block_count(),
          strf("graft_prefix: %d scions exceed teacher block count %d", depth, m.block_count()));
  for (int i = 0; i < depth; ++i) {
    if (scions[i].index != i + 1)
      fail(strf("graft_prefix: scions must be a contiguous prefix 1..l; position %d has index %d",
                i + 1, scions[i].index));
    detail::check_scion_boundaries(scions[i], m.teacher_sigs);
  }
  m.graft_depth = depth;
  for (const auto& s : scions) m.scions.emplace(s.index, s);
  return m;
}

// Matrix of the composition a_ts . a_st: maps student channels at boundary l
// (scion l output) to student channels consumed by scion l+1.
template <typename T>
MatrixX<T> compose_adaptions(const AdaptionModule<T>& a_ts, const AdaptionModule<T>& a_st) {
  require(a_ts.direction == AdaptionDirection::teacher_to_student &&
              a_st.direction == AdaptionDirection::student_to_teacher,
          "compose_adaptions: expected (t->s, s->t) pair");
  require(a_ts.in_channels() == a_st.out_channels(),
          strf("compose_adaptions: inner dimension mismatch (%d vs %d)", a_ts.in_channels(),
               a_st.out_channels()));
  return a_ts.weight * a_st.weight;
}

// Exact absorption of a square channel map M into a block's entry convolution
// (or affine): returns a block computing block(M x) with unchanged parameter
// count. A leading Flatten is transparent; any other op ahead of the first
// parameterized layer would break exactness and is rejected.
template <typename T>
Block<T> fold_into_conv(const Block<T>& block, const MatrixX<T>& M) {
  require(M.rows() == M.cols(),
          strf("fold_into_conv: matrix must be square, got %ldx%ld (a non-square fold would "
               "change the parameter count)",
               static_cast<long>(M.rows()), static_cast<long>(M.cols())));
  Block<T> out = block;
  const int cin = static_cast<int>(M.rows());

  auto fold_conv_weight = [&](MatrixX<T>& w, int k) {
    MatrixX<T> w2 = MatrixX<T>::Zero(w.rows(), w.cols());
    for (int u = 0; u < k; ++u) {
      for (int v = 0; v < k; ++v) {
        for (Eigen::Index o = 0; o < w.rows(); ++o) {
          for (int i = 0; i < cin; ++i) {
            T acc = T(0);
            for (int m = 0; m < cin; ++m) {
              acc += w(o, (static_cast<Eigen::Index>(m) * k + u) * k + v) * M(m, i);
            }
            w2(o, (static_cast<Eigen::Index>(i) * k + u) * k + v) = acc;
          }
        }
      }
    }
    w = std::move(w2);
  };

  for (auto& layer : out.layers) {
    if (std::holds_alternative<Flatten<T>>(layer)) continue;  // pure reshape, commutes
    if (auto* conv = std::get_if<Conv2d<T>>(&layer)) {
      require(conv->in_ch == cin, strf("fold_into_conv: conv expects %d channels, M has %d",
                                       conv->in_ch, cin));
      fold_conv_weight(conv->weight, conv->ksize);
      return out;
    }
    if (auto* lin = std::get_if<Linear<T>>(&layer)) {
      require(lin->in_features % cin == 0,
              strf("fold_into_conv: linear in_features %d not divisible by %d channels",
                   lin->in_features, cin));
      const int hw = lin->in_features / cin;
      MatrixX<T> w2 = MatrixX<T>::Zero(lin->weight.rows(), lin->weight.cols());
      for (Eigen::Index o = 0; o < lin->weight.rows(); ++o) {
        for (int i = 0; i < cin; ++i) {
          for (int p = 0; p < hw; ++p) {
            T acc = T(0);
            for (int m = 0; m < cin; ++m) {
              acc += lin->weight(o, static_cast<Eigen::Index>(m) * hw + p) * M(m, i);
            }
            w2(o, static_cast<Eigen::Index>(i) * hw + p) = acc;
          }
        }
      }
      lin->weight = std::move(w2);
      return out;
    }
    if (auto* res = std::get_if<Residual<T>>(&layer)) {
      require(res->proj.has_value(),
              "fold_into_conv: residual entry without projection consumes its input on the "
              "identity path; cannot fold");
      require(res->conv1.in_ch == cin, strf("fold_into_conv: residual expects %d channels, M has %d",
                                            res->conv1.in_ch, cin));
      fold_conv_weight(res->conv1.weight, res->conv1.ksize);
      fold_conv_weight(res->proj->weight, res->proj->ksize);
      return out;
    }
    fail(strf("fold_into_conv: first parameterized op is '%s', not a convolution/affine",
              layer_kind(layer)));
  }
  fail("fold_into_conv: block has no parameterized op");
}

// Merges all adaption pairs into the student blocks (Phase: after the full
// prefix is trained). The result has the student_spec architecture exactly:
// same layer structure, same parameter count, no adaption modules.
template <typename T>
BlockwiseNetwork<T> finalize_student(const std::vector<WrappedScion<T>>& scions,
                                     const BlockwiseNetwork<T>& student_spec) {
  const int L = static_cast<int>(scions.size());
  require(L == student_spec.block_count(),
          strf("finalize_student: %d scions vs %d student blocks", L,
               student_spec.block_count()));
  for (int i = 0; i < L; ++i)
    require(scions[i].index == i + 1, "finalize_student: scions must cover indices 1..L in order");
  for (int i = 0; i + 1 < L; ++i) {
    if (scions[i].core.sig.out_channels != scions[i + 1].core.sig.in_channels)
      fail(strf("finalize_student: inconsistent student channel chain at boundary %d (%d vs %d); "
                "fold would change shapes",
                i + 1, scions[i].core.sig.out_channels, scions[i + 1].core.sig.in_channels));
  }

  std::vector<Block<T>> folded;
  folded.reserve(L);
  folded.push_back(scions[0].core);
  for (int l = 2; l <= L; ++l) {
    MatrixX<T> M = compose_adaptions(*scions[l - 1].pre, *scions[l - 2].post);
    folded.push_back(fold_into_conv(scions[l - 1].core, M));
  }

  BlockwiseNetwork<T> out;
  out.arch_name = student_spec.arch_name;
  out.n_classes = student_spec.n_classes;
  out.blocks = std::move(folded);
  // The last folded core carries the head layers (decompose folded them when
  // the scions were wrapped); peel them back off to match student_spec.
  if (student_spec.head) {
    Block<T>& last = out.blocks.back();
    const size_t keep = student_spec.blocks.back().layers.size();
    require(last.layers.size() == keep + student_spec.head->layers.size(),
            "finalize_student: scion layer structure does not match student spec");
    Block<T> head;
    head.sig = student_spec.head->sig;
    head.layers.assign(last.layers.begin() + keep, last.layers.end());
    last.layers.resize(keep);
    out.head = std::move(head);
  }
  for (int i = 0; i < L; ++i) {
    out.blocks[i].sig = student_spec.blocks[i].sig;
    require(out.blocks[i].layers.size() == student_spec.blocks[i].layers.size(),
            "finalize_student: block structure mismatch against student spec");
  }
  require(count_params(out) == count_params(student_spec),
          "finalize_student: parameter count changed during fold");
  return out;
}

// The named parameters an optimizer may update for the given stage/unit.
// Stage 1 trains exactly the wrapped scion at index l; stage 2 at depth l
// trains the union of scions 1..l. Teacher parameters never appear.
template <typename T>
std::vector<ParamRef<T>> trainable_params(GraftedModel<T>& model, GraftKind stage, int l) {
  require(model.kind == stage, "trainable_params: model kind does not match stage");
  std::vector<ParamRef<T>> out;
  auto collect = [&](WrappedScion<T>& s) {
    s.visit_params("scion" + std::to_string(s.index),
                   [&](const std::string& name, MatrixX<T>& m) { out.push_back({name, &m}); });
  };
  if (stage == GraftKind::block_graft) {
    auto it = model.scions.find(l);
    require(it != model.scions.end(), strf("trainable_params: no scion at index %d", l));
    collect(it->second);
  } else {
    require(l >= 1 && l <= model.graft_depth,
            strf("trainable_params: depth %d exceeds scion coverage %d", l, model.graft_depth));
    for (int i = 1; i <= l; ++i) collect(model.scions.at(i));
  }
  return out;
}

}  // namespace graftkd
