#include <algorithm>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "model_fixtures.hpp"

using namespace shaspec;
namespace O = shaspec::ops;
using fixtures::random_batch;
using fixtures::tiny_classifier;
using fixtures::tiny_segmenter;

namespace {

Tensor mean_of(const std::vector<Tensor>& xs) {
  Tensor out(xs.front().shape());
  for (const auto& x : xs)
    for (std::size_t k = 0; k < x.size(); ++k) out[k] += x[k];
  for (auto& v : out.data()) v /= static_cast<double>(xs.size());
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

// Bundle of constant shared features for an arbitrary mask.
FeatureBundle constant_bundle(Tape& tape, const ModalityMask& mask, const std::vector<Tensor>& shared) {
  FeatureBundle b;
  b.mask = mask;
  b.shared.resize(mask.size());
  b.specific.resize(mask.size());
  b.fused.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      b.shared[i] = tape.constant(shared[i]);
      b.fused[i] = b.shared[i];
    }
  return b;
}

}  // namespace

TEST_CASE("parameter groups have the declared structure") {
  for (auto dao : {"ce", "kl", "l1"}) {
    auto cfg = tiny_classifier(3);
    cfg.dao = DaoVariant::parse(dao);
    ShaSpecModel m(cfg);
    for (std::size_t i = 0; i < 3; ++i) CHECK(m.group(ParamGroup::specific, i).size() == 4);
    CHECK(m.group(ParamGroup::shared).size() == 4);
    CHECK(m.group(ParamGroup::dco).size() == 2);
    CHECK(m.parameter("dco.w").value.shape() == Shape{4, 3});
    if (cfg.dao.kind == DaoKind::ce_uniform) CHECK(m.parameter("dao.w").value.shape() == Shape{4, 3});
    if (cfg.dao.kind == DaoKind::kl_pairwise) CHECK(m.parameter("dao.w").value.shape() == Shape{4, 8});
    if (cfg.dao.kind == DaoKind::pnorm) {
      CHECK(m.group(ParamGroup::dao).empty());
      Tape t;
      CHECK_THROWS_AS(m.dao_logits(t, t.constant(Tensor(Shape{1, 4}))), ContractError);
    }
  }
}

TEST_CASE("config validation") {
  auto cfg = tiny_classifier();
  cfg.modality_count = 1;
  cfg.input_shapes.resize(1);
  CHECK_THROWS_AS(ShaSpecModel{cfg}, ValidationError);
  cfg = tiny_classifier();
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(ShaSpecModel{cfg}, ValidationError);
  auto seg = tiny_segmenter();
  seg.input_shapes[1] = Shape{1, 6, 6};
  CHECK_THROWS_AS(ShaSpecModel{seg}, DimensionError);
  CHECK_THROWS_AS(DaoVariant::parse("l3"), ValidationError);
  CHECK(DaoVariant::parse("mse").name() == "mse");
}

TEST_CASE("initialization is seeded and fan-in bounded") {
  ShaSpecModel a(tiny_classifier(3, 7)), b(tiny_classifier(3, 7)), c(tiny_classifier(3, 8));
  CHECK(a.parameter("shared.fc1.w").value == b.parameter("shared.fc1.w").value);
  CHECK_FALSE(a.parameter("shared.fc1.w").value == c.parameter("shared.fc1.w").value);
  for (const auto* p : a.parameters()) {
    if (p->name.ends_with(".b")) {
      for (double v : p->value.data()) CHECK(v == 0.0);
    }
  }
  for (double v : a.parameter("shared.fc1.w").value.data()) CHECK(std::abs(v) <= 1.0 / std::sqrt(5.0));
}

TEST_CASE("encode populates exactly the available slots") {
  ShaSpecModel m2(tiny_classifier(2));
  Tape t;
  auto full = m2.encode(t, random_batch(m2.config(), ModalityMask::full(2), 3, 1));
  CHECK(full.shared[0]);
  CHECK(full.shared[1]);
  CHECK(full.specific[1]);
  CHECK(full.shared[0]->shape() == Shape{3, 4});

  ShaSpecModel m3(tiny_classifier(3));
  auto mask = ModalityMask::from_bits("101");
  auto b = m3.encode(t, random_batch(m3.config(), mask, 3, 2));
  CHECK(b.shared[0]);
  CHECK_FALSE(b.shared[1]);
  CHECK_FALSE(b.specific[1]);
  CHECK(b.shared[2]);
  CHECK_FALSE(b.fused[0]);
}

TEST_CASE("identical inputs give identical shared features") {
  ShaSpecModel m(tiny_classifier(3));
  auto batch = random_batch(m.config(), ModalityMask::full(3), 4, 3);
  batch.inputs[2] = batch.inputs[0];
  Tape t;
  auto b = m.encode(t, batch);
  CHECK(b.shared[0]->value() == b.shared[2]->value());
  CHECK_FALSE(b.specific[0]->value() == b.specific[2]->value());
}

TEST_CASE("perturbing the shared encoder moves every shared feature") {
  ShaSpecModel m(tiny_classifier(3));
  auto batch = random_batch(m.config(), ModalityMask::full(3), 2, 4);
  Tape t1;
  auto before = m.encode(t1, batch);
  m.parameter("shared.fc2.b").value[0] += 0.5;
  Tape t2;
  auto after = m.encode(t2, batch);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK_FALSE(before.shared[i]->value() == after.shared[i]->value());
    CHECK(before.specific[i]->value() == after.specific[i]->value());
  }
}

TEST_CASE("encode rejects mismatched inputs") {
  ShaSpecModel m(tiny_classifier(3));
  auto batch = random_batch(m.config(), ModalityMask::full(3), 2, 5);
  batch.inputs[1] = Tensor(Shape{2, 6});
  Tape t;
  CHECK_THROWS_AS(m.encode(t, batch), DimensionError);
  batch = random_batch(m.config(), ModalityMask::full(3), 2, 5);
  batch.inputs[1].reset();
  CHECK_THROWS_AS(m.encode(t, batch), ContractError);
}

TEST_CASE("zero projection makes fusion the identity on shared features") {
  for (auto cfg : {tiny_classifier(3), tiny_segmenter(3)}) {
    ShaSpecModel m(cfg);
    m.parameter("proj.w").value.fill(0.0);
    Tape t;
    auto b = m.encode(t, random_batch(cfg, ModalityMask::from_bits("110"), 2, 6));
    m.fuse(t, b);
    CHECK(b.fused[0]->value() == b.shared[0]->value());
    CHECK(b.fused[1]->value() == b.shared[1]->value());
    CHECK_FALSE(b.fused[2]);
  }
}

TEST_CASE("fusion by hand") {
  auto cfg = tiny_classifier(2);
  cfg.feature_dim = 2;
  ShaSpecModel m(cfg);
  m.parameter("proj.w").value = Tensor(Shape{4, 2}, {1, 0, 0, 1, 0, 0, 0, 0});
  Tape t;
  FeatureBundle b;
  b.mask = ModalityMask::from_bits("10");
  b.shared = {t.constant(Tensor::matrix({{1, 2}})), std::nullopt};
  b.specific = {t.constant(Tensor::matrix({{0, 0}})), std::nullopt};
  b.fused.resize(2);
  m.fuse(t, b);
  CHECK(b.fused[0]->value() == Tensor::matrix({{2, 4}}));
}

TEST_CASE("fused minus shared equals an independently computed projection") {
  ShaSpecModel m(tiny_classifier(3, 11));
  Tape t;
  auto b = m.encode(t, random_batch(m.config(), ModalityMask::full(3), 3, 7));
  m.fuse(t, b);
  const Tensor& w = m.parameter("proj.w").value;  // [2D x D]
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor& r = b.shared[i]->value();
    const Tensor& s = b.specific[i]->value();
    const Tensor& f = b.fused[i]->value();
    for (std::size_t row = 0; row < 3; ++row)
      for (std::size_t j = 0; j < 4; ++j) {
        double proj = 0.0;
        for (std::size_t k = 0; k < 4; ++k) proj += r[row * 4 + k] * w[k * 4 + j];
        for (std::size_t k = 0; k < 4; ++k) proj += s[row * 4 + k] * w[(4 + k) * 4 + j];
        CHECK(std::abs((f[row * 4 + j] - r[row * 4 + j]) - proj) < 1e-12);
      }
  }
}

TEST_CASE("fuse requires both features of an available modality") {
  ShaSpecModel m(tiny_classifier(2));
  Tape t;
  auto b = m.encode(t, random_batch(m.config(), ModalityMask::full(2), 2, 8));
  b.specific[1].reset();
  CHECK_THROWS_AS(m.fuse(t, b), ContractError);
}

TEST_CASE("imputation worked example") {
  Tape t;
  auto mask = ModalityMask::from_bits("011");
  auto b = constant_bundle(t, mask, {Tensor(), Tensor::vector({1, 2}), Tensor::vector({3, 4})});
  impute_missing(t, b, mask);
  CHECK(b.fused[0]->value() == Tensor::vector({2, 3}));
  CHECK(b.complete());
}

TEST_CASE("imputation equals the mean of available shared features") {
  std::mt19937_64 rng(9);
  for (std::size_t n : {2u, 3u, 4u}) {
    for (const auto& mask : ModalityMask::all_nonempty(n)) {
      if (mask.is_full()) continue;
      std::vector<Tensor> shared(n);
      for (auto& s : shared) s = fd::random_tensor(Shape{3, 5}, rng);
      Tape t;
      auto b = constant_bundle(t, mask, shared);
      const auto before = b.fused;
      impute_missing(t, b, mask);
      std::vector<Tensor> avail;
      for (auto i : mask.available_indices()) avail.push_back(shared[i]);
      const Tensor expected = mean_of(avail);
      for (std::size_t i = 0; i < n; ++i) {
        if (mask[i]) {
          CHECK(b.fused[i]->id() == before[i]->id());
        } else {
          CHECK(max_abs_diff(b.fused[i]->value(), expected) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("imputation is invariant to the order of available modalities") {
  std::mt19937_64 rng(10);
  const std::size_t n = 4;
  auto mask = ModalityMask::from_bits("1010");
  std::vector<Tensor> shared(n);
  for (auto& s : shared) s = fd::random_tensor(Shape{2, 3}, rng);
  Tape t;
  auto a = constant_bundle(t, mask, shared);
  impute_missing(t, a, mask);
  std::swap(shared[0], shared[2]);
  auto b = constant_bundle(t, mask, shared);
  impute_missing(t, b, mask);
  CHECK(max_abs_diff(a.fused[1]->value(), b.fused[1]->value()) <= 1e-12);
  CHECK(a.fused[1]->value() == a.fused[3]->value());
}

TEST_CASE("full-mask imputation is a no-op") {
  std::mt19937_64 rng(11);
  auto mask = ModalityMask::full(3);
  std::vector<Tensor> shared(3);
  for (auto& s : shared) s = fd::random_tensor(Shape{2, 3}, rng);
  Tape t;
  auto b = constant_bundle(t, mask, shared);
  const auto size_before = t.size();
  const auto before = b.fused;
  impute_missing(t, b, mask);
  CHECK(t.size() == size_before);
  for (std::size_t i = 0; i < 3; ++i) CHECK(b.fused[i]->id() == before[i]->id());
}

TEST_CASE("zero imputation fills missing slots with zeros") {
  Tape t;
  auto mask = ModalityMask::from_bits("10");
  auto b = constant_bundle(t, mask, {Tensor::vector({1, 2}), Tensor()});
  impute_missing(t, b, mask, ImputationMode::zero);
  CHECK(b.fused[1]->value() == Tensor::vector({0, 0}));
}

TEST_CASE("imputation with no usable shared feature is a contract error") {
  Tape t;
  auto mask = ModalityMask::from_bits("10");
  FeatureBundle b;
  b.mask = mask;
  b.shared.resize(2);
  b.fused.resize(2);
  CHECK_THROWS_AS(impute_missing(t, b, mask), ContractError);
}

TEST_CASE("decoder output shapes") {
  ShaSpecModel c(tiny_classifier(3));
  Tape t;
  auto r = c.forward(t, random_batch(c.config(), ModalityMask::from_bits("010"), 5, 12), {});
  CHECK(r.prediction.shape() == Shape{5, 3});

  ShaSpecModel s(tiny_segmenter(2));
  auto rs = s.forward(t, random_batch(s.config(), ModalityMask::from_bits("01"), 2, 13), {});
  CHECK(rs.prediction.shape() == Shape{2, 2, 4, 4});
}

TEST_CASE("decode rejects an incomplete bundle") {
  ShaSpecModel m(tiny_classifier(3));
  Tape t;
  auto b = m.encode(t, random_batch(m.config(), ModalityMask::from_bits("110"), 2, 14));
  m.fuse(t, b);
  CHECK_THROWS_AS(m.decode(t, b, {}), ContractError);
}

TEST_CASE("decoder weight tying makes slot order irrelevant") {
  auto cfg = tiny_classifier(2, 15);
  ShaSpecModel m(cfg);
  Tensor& w = m.parameter("dec.fc1.w").value;  // [2D x H]
  const std::size_t d = 4, h = 6;
  std::mt19937_64 rng(15);
  const Tensor a = fd::random_tensor(Shape{2, d}, rng), b = fd::random_tensor(Shape{2, d}, rng);
  auto logits = [&](const Tensor& x0, const Tensor& x1) {
    Tape t;
    FeatureBundle bundle;
    bundle.mask = ModalityMask::full(2);
    bundle.fused = {t.constant(x0), t.constant(x1)};
    return m.decode(t, bundle, {}).value();
  };
  CHECK_FALSE(logits(a, b) == logits(b, a));
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < h; ++j) w[(d + k) * h + j] = w[k * h + j];
  CHECK(max_abs_diff(logits(a, b), logits(b, a)) < 1e-12);
}

TEST_CASE("full-mask forward matches the path without imputation") {
  ShaSpecModel m(tiny_classifier(3));
  auto batch = random_batch(m.config(), ModalityMask::full(3), 4, 16);
  Tape t1;
  auto r = m.forward(t1, batch, {});
  Tape t2;
  auto b = m.encode(t2, batch);
  m.fuse(t2, b);
  CHECK(r.prediction.value() == m.decode(t2, b, {}).value());
}

TEST_CASE("missing inputs cannot influence the prediction or their encoders") {
  for (auto cfg : {tiny_classifier(2), tiny_segmenter(2)}) {
    ShaSpecModel m(cfg);
    auto mask = ModalityMask::from_bits("10");
    auto full = random_batch(cfg, ModalityMask::full(2), 3, 17);
    auto batch = full;
    batch.mask = mask;
    Tape t1;
    const Tensor p1 = m.forward(t1, batch, {}).prediction.value();
    for (auto& v : batch.inputs[1]->data()) v += 3.0;
    Tape t2;
    auto r = m.forward(t2, batch, {});
    CHECK(r.prediction.value() == p1);

    m.zero_grad();
    t2.backward(fd::contract(r.prediction, 3));
    for (auto* p : m.group(ParamGroup::specific, 1))
      for (double g : p->grad.data()) CHECK(g == 0.0);
    double shared_grad = 0.0;
    for (auto* p : m.group(ParamGroup::shared))
      for (double g : p->grad.data()) shared_grad += std::abs(g);
    CHECK(shared_grad > 0.0);
  }
}

TEST_CASE("eval forward is deterministic; dropout only in training") {
  auto cfg = tiny_classifier(3);
  cfg.dropout = 0.5;
  ShaSpecModel m(cfg);
  auto batch = random_batch(cfg, ModalityMask::from_bits("011"), 6, 18);
  auto run = [&](ForwardOptions o) {
    Tape t;
    return m.forward(t, batch, o).prediction.value();
  };
  CHECK(run({}) == run({}));
  CHECK(run({true, 5}) == run({true, 5}));
  CHECK_FALSE(run({true, 5}) == run({}));
  CHECK_FALSE(run({true, 5}) == run({true, 6}));
}

TEST_CASE("heterogeneous modalities get adapter stems") {
  auto cfg = tiny_classifier(2);
  cfg.input_shapes = {Shape{5}, Shape{9}};
  ShaSpecModel m(cfg);
  CHECK(m.group(ParamGroup::stem, 0).empty());
  CHECK(m.group(ParamGroup::stem, 1).size() == 2);
  CHECK(m.parameter("stem.1.w").value.shape() == Shape{9, 5});
  CHECK(m.parameter("specific.1.fc1.w").value.shape() == Shape{9, 6});
  Tape t;
  auto r = m.forward(t, random_batch(cfg, ModalityMask::full(2), 2, 19), {});
  CHECK(r.bundle.shared[0]->shape() == r.bundle.shared[1]->shape());

  auto seg = tiny_segmenter(2);
  seg.input_shapes[1] = Shape{3, 4, 4};
  ShaSpecModel ms(seg);
  CHECK(ms.parameter("stem.1.w").value.shape() == Shape{1, 3});
  Tape t2;
  CHECK(ms.forward(t2, random_batch(seg, ModalityMask::full(2), 2, 20), {}).prediction.shape() ==
        Shape{2, 2, 4, 4});
}

TEST_CASE("clone copies values and is independent") {
  ShaSpecModel m(tiny_classifier(3, 21));
  for (auto* p : m.parameters()) p->value.fill(0.25);
  auto c = m.clone();
  CHECK(c.parameter("proj.w").value == m.parameter("proj.w").value);
  c.parameter("proj.w").value.fill(1.0);
  CHECK(m.parameter("proj.w").value[0] == 0.25);
}

TEST_CASE("batching stacks samples under one mask") {
  std::vector<ModalitySample> samples;
  for (std::uint32_t k = 0; k < 3; ++k)
    samples.push_back({{Tensor::vector({double(k), 1}), std::nullopt}, ModalityMask::from_bits("10"), k});
  Dataset data{TaskKind::classification, 2, samples};
  std::vector<std::size_t> idx{2, 0};
  auto b = Batch::from_dataset(data, idx, ModalityMask::from_bits("10"));
  CHECK(b.size == 2);
  CHECK(*b.inputs[0] == Tensor::matrix({{2, 1}, {0, 1}}));
  CHECK_FALSE(b.inputs[1]);
  CHECK(b.class_labels == std::vector<std::uint32_t>{2, 0});
  CHECK_THROWS_AS(Batch::from_dataset(data, idx, ModalityMask::full(2)), ContractError);
}

TEST_CASE("model forward gradients match finite differences") {
  for (auto cfg : {tiny_classifier(3, 22), tiny_segmenter(2, 23)}) {
    ShaSpecModel m(cfg);
    const auto mask = cfg.modality_count == 3 ? ModalityMask::from_bits("101") : ModalityMask::from_bits("01");
    auto batch = random_batch(cfg, mask, 2, 24);
    m.zero_grad();
    {
      Tape t;
      t.backward(fd::contract(m.forward(t, batch, {}).prediction, 9));
    }
    auto value = [&] {
      Tape t;
      return fd::contract(m.forward(t, batch, {}).prediction, 9).value().item();
    };
    double worst = 0.0;
    const double h = 1e-5;
    for (auto* p : m.parameters()) {
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double orig = p->value[i];
        p->value[i] = orig + h;
        const double up = value();
        p->value[i] = orig - h;
        const double down = value();
        p->value[i] = orig;
        worst = std::max(worst, fd::rel_err(p->grad[i], (up - down) / (2 * h)));
      }
    }
    CHECK(worst < 1e-5);
  }
}
