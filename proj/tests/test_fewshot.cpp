#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "graftkd/synth.hpp"

using namespace graftkd;
using R = float;

// The few-shot type exposes no label accessor; distillation code cannot
// consume labels even by accident.
template <typename T>
constexpr bool has_labels = requires(T t) { t.labels; };
static_assert(!has_labels<FewShotDataset<R>>);
static_assert(has_labels<LabeledDataset<R>>);

namespace {

LabeledDataset<R> tiny_source(int per_class, int classes, std::uint64_t seed) {
  LabeledDataset<R> ds;
  ds.n_classes = classes;
  ds.source_id = "tiny";
  const int n = per_class * classes;
  ds.images = Tensor<R>(3, 8, 8, n);
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    ds.labels.push_back(i % classes);
    for (Eigen::Index r = 0; r < ds.images.data.rows(); ++r)
      ds.images.data(r, i) = static_cast<R>(rng.uniform01());
  }
  return ds;
}

}  // namespace

TEST_CASE("sample_kshot: per-class exactness and sizes") {
  auto src = tiny_source(20, 10, 1);
  SUBCASE("K=1 on a 10-class source gives 10 samples") {
    auto d = sample_kshot(src, 1, 7);
    CHECK(d.size() == 10);
    std::vector<int> per_class(10, 0);
    for (int idx : d.source_indices) per_class[static_cast<size_t>(src.labels[idx])]++;
    for (int c : per_class) CHECK(c == 1);
  }
  SUBCASE("K=10 gives K*N samples") {
    auto d = sample_kshot(src, 10, 7);
    CHECK(d.size() == 100);
    CHECK(d.K == 10);
    CHECK(d.n_classes == 10);
  }
  SUBCASE("draws are without replacement") {
    auto d = sample_kshot(src, 10, 7);
    std::vector<int> idx = d.source_indices;
    std::sort(idx.begin(), idx.end());
    CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
  }
}

TEST_CASE("sample_kshot: determinism contract") {
  auto src = tiny_source(15, 10, 2);
  auto a = sample_kshot(src, 5, 42);
  auto b = sample_kshot(src, 5, 42);
  CHECK(a.source_indices == b.source_indices);
  CHECK((a.samples.data.array() == b.samples.data.array()).all());
  auto c = sample_kshot(src, 5, 43);
  CHECK(a.source_indices != c.source_indices);
}

TEST_CASE("sample_kshot: class with fewer than K samples is rejected") {
  LabeledDataset<R> src;
  src.n_classes = 2;
  src.images = Tensor<R>(1, 2, 2, 3);
  src.images.data.setRandom();
  src.labels = {0, 0, 1};  // class 1 has a single sample
  CHECK_THROWS_WITH_AS(sample_kshot(src, 2, 1), doctest::Contains("class 1"), Error);
}

TEST_CASE("batch_size_for: floor(64K/10)") {
  CHECK(batch_size_for(1) == 6);
  CHECK(batch_size_for(5) == 32);
  CHECK(batch_size_for(10) == 64);
  CHECK(batch_size_for(2) == 12);
  CHECK_THROWS_AS(batch_size_for(0), Error);
}

TEST_CASE("augment: flip is an involution, zero padding is the identity") {
  auto src = tiny_source(1, 10, 3);
  Tensor<R> img(3, 8, 8, 1);
  img.data = src.images.data.col(0);

  SUBCASE("forced double flip restores the original") {
    Tensor<R> flipped = img;
    flip_horizontal(flipped.data.col(0).data(), 3, 8, 8);
    CHECK((flipped.data.array() != img.data.array()).any());
    flip_horizontal(flipped.data.col(0).data(), 3, 8, 8);
    CHECK((flipped.data.array() == img.data.array()).all());
  }
  SUBCASE("zero padding and no flip is the identity") {
    Rng rng(5);
    Tensor<R> out = augment(img, rng, AugmentConfig{0, false});
    CHECK((out.data.array() == img.data.array()).all());
  }
  SUBCASE("flip preserves the pixel-value multiset") {
    Tensor<R> flipped = img;
    flip_horizontal(flipped.data.col(0).data(), 3, 8, 8);
    std::vector<R> a(img.data.data(), img.data.data() + img.data.size());
    std::vector<R> b(flipped.data.data(), flipped.data.data() + flipped.data.size());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
  SUBCASE("crop offsets stay within the padded frame") {
    // all-ones image: any crop keeps values in {0,1}, zeros only near borders
    Tensor<R> ones(3, 8, 8, 1);
    ones.data.setOnes();
    Rng rng(6);
    for (int t = 0; t < 20; ++t) {
      Tensor<R> out = augment(ones, rng, AugmentConfig{4, true});
      CHECK(((out.data.array() == 0) || (out.data.array() == 1)).all());
      // the central region is never cropped away with padding 4 on 8x8... the
      // shift is at most 4, so at least the opposite half remains ones
      CHECK(out.data.sum() >= 3 * 4 * 4);
    }
  }
}

TEST_CASE("make_loader: batch split, determinism, epoch coverage") {
  auto src = tiny_source(1, 10, 4);
  auto shots = sample_kshot(src, 1, 9);
  Normalization norm{{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};
  auto loader = make_loader(shots, 6, 77, AugmentConfig{2, true}, norm);

  SUBCASE("10 samples at batch 6 split [6,4], partial batch retained") {
    auto batches = loader.epoch_batches(0);
    REQUIRE(batches.size() == 2);
    CHECK(batches[0].size() == 6);
    CHECK(batches[1].size() == 4);
  }
  SUBCASE("same seed gives identical order and tensors") {
    auto other = make_loader(shots, 6, 77, AugmentConfig{2, true}, norm);
    for (int epoch = 0; epoch < 3; ++epoch) {
      auto ba = loader.epoch_batches(epoch);
      auto bb = other.epoch_batches(epoch);
      CHECK(ba == bb);
      for (size_t i = 0; i < ba.size(); ++i) {
        const Tensor<R> ta = loader.load_batch(ba[i], epoch);
        const Tensor<R> tb = other.load_batch(bb[i], epoch);
        CHECK((ta.data.array() == tb.data.array()).all());
      }
    }
  }
  SUBCASE("one epoch covers the dataset exactly once") {
    auto batches = loader.epoch_batches(3);
    std::vector<int> seen;
    for (const auto& b : batches) seen.insert(seen.end(), b.begin(), b.end());
    std::sort(seen.begin(), seen.end());
    std::vector<int> expect(10);
    std::iota(expect.begin(), expect.end(), 0);
    CHECK(seen == expect);
  }
  SUBCASE("epochs shuffle differently") {
    CHECK(loader.epoch_batches(0) != loader.epoch_batches(1));
  }
  SUBCASE("empty dataset and non-positive batch are rejected") {
    FewShotDataset<R> empty;
    empty.samples = Tensor<R>(3, 8, 8, 0);
    CHECK_THROWS_AS(make_loader(empty, 4, 1, {}, norm), Error);
    CHECK_THROWS_AS(make_loader(shots, 0, 1, {}, norm), Error);
  }
}

TEST_CASE("augmentation stream depends only on (seed, epoch, sample index)") {
  auto src = tiny_source(1, 10, 8);
  auto shots = sample_kshot(src, 1, 9);
  Normalization norm{{0, 0, 0}, {1, 1, 1}};
  auto loader = make_loader(shots, 4, 123, AugmentConfig{2, true}, norm);
  // sample 3 must get the same transform whichever batch it lands in
  const Tensor<R> alone = loader.load_batch({3}, 5);
  const Tensor<R> grouped = loader.load_batch({0, 3, 7}, 5);
  CHECK((alone.data.col(0).array() == grouped.data.col(1).array()).all());
}

TEST_CASE("synthetic dataset: determinism and class balance") {
  SynthSpec spec;
  spec.n_train = 100;
  spec.n_test = 40;
  auto [train, test] = generate_synth<R>(spec);
  CHECK(train.size() == 100);
  CHECK(test.size() == 40);
  std::vector<int> per_class(10, 0);
  for (int y : train.labels) per_class[static_cast<size_t>(y)]++;
  for (int c : per_class) CHECK(c == 10);
  CHECK((train.images.data.array() >= 0).all());
  CHECK((train.images.data.array() <= 1).all());

  auto [train2, test2] = generate_synth<R>(spec);
  CHECK((train.images.data.array() == train2.images.data.array()).all());
  CHECK((test.images.data.array() == test2.images.data.array()).all());

  SynthSpec other = spec;
  other.seed = 99;
  auto [train3, test3] = generate_synth<R>(other);
  (void)test3;
  CHECK((train.images.data.array() != train3.images.data.array()).any());
}

TEST_CASE("packed dataset round-trip and locator forms") {
  SynthSpec spec;
  spec.n_train = 30;
  spec.n_test = 10;
  auto [train, test] = generate_synth<R>(spec);

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "graftkd_test_pack";
  fs::create_directories(dir);
  save_packed((dir / "train.gkp").string(), train);
  save_packed((dir / "test.gkp").string(), test);

  auto loaded = load_packed<R>((dir / "train.gkp").string());
  CHECK(loaded.size() == train.size());
  CHECK(loaded.labels == train.labels);
  // u8 quantization: within half a step, and a second round-trip is exact
  CHECK((loaded.images.data - train.images.data).cwiseAbs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);
  save_packed((dir / "train2.gkp").string(), loaded);
  auto loaded2 = load_packed<R>((dir / "train2.gkp").string());
  CHECK((loaded2.images.data.array() == loaded.images.data.array()).all());

  auto [ltrain, ltest] = load_source<R>(dir.string());
  CHECK(ltrain.size() == 30);
  CHECK(ltest.size() == 10);

  auto [strain, stest] = load_source<R>("synth://shapes10?train=30&test=10&seed=7");
  CHECK(strain.size() == 30);
  CHECK((strain.images.data.array() == train.images.data.array()).all());
  (void)stest;

  CHECK_THROWS_WITH_AS(load_source<R>("synth://nope?train=1&test=1"),
                       doctest::Contains("unknown synthetic family"), Error);
  CHECK_THROWS_AS(load_source<R>("/no/such/path"), Error);
  fs::remove_all(dir);
}

TEST_CASE("cifar-format binary ingestion") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "graftkd_test_cifar";
  fs::create_directories(dir);
  // fabricate 4-record batches in the 3073-byte record format
  auto write_bin = [&](const fs::path& p, int n, std::uint8_t label_base) {
    std::ofstream f(p, std::ios::binary);
    for (int i = 0; i < n; ++i) {
      const std::uint8_t label = static_cast<std::uint8_t>((label_base + i) % 10);
      f.put(static_cast<char>(label));
      for (int j = 0; j < 3072; ++j) f.put(static_cast<char>((i * 7 + j) % 251));
    }
  };
  write_bin(dir / "data_batch_1.bin", 4, 0);
  write_bin(dir / "data_batch_2.bin", 4, 4);
  write_bin(dir / "test_batch.bin", 2, 1);
  auto [train, test] = load_source<R>(dir.string());
  CHECK(train.size() == 8);
  CHECK(test.size() == 2);
  CHECK(train.labels[0] == 0);
  CHECK(train.labels[4] == 4);
  CHECK(test.labels[0] == 1);
  CHECK(train.images.c == 3);
  CHECK(train.images.h == 32);
  // pixel 0 of record 1 in batch 1: (1*7+0)%251 = 7 -> 7/255
  CHECK(train.images.data(0, 1) == doctest::Approx(7.0 / 255.0));
  fs::remove_all(dir);
}
