#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "model_fixtures.hpp"
#include "shaspec/objectives.hpp"

using namespace shaspec;
namespace O = shaspec::ops;
using fixtures::random_batch;
using fixtures::tiny_classifier;
using fixtures::tiny_segmenter;

namespace {

// Plain-loop references, independent of the tape.
double ce_row(const double* z, std::size_t n, const Tensor& target) {
  double m = *std::max_element(z, z + n), s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] - m);
  const double lse = m + std::log(s);
  double out = 0.0;
  for (std::size_t j = 0; j < n; ++j) out -= target[j] * (z[j] - lse);
  return out;
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor* b) {
  const std::size_t rows = x.dim(0), in = w.dim(0), out = w.dim(1);
  Tensor y(Shape{rows, out});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out; ++j) {
      double acc = b ? (*b)[j] : 0.0;
      for (std::size_t k = 0; k < in; ++k) acc += x[r * in + k] * w[k * out + j];
      y[r * out + j] = acc;
    }
  return y;
}

double mean_ce(const Tensor& logits, const Tensor& target) {
  const std::size_t rows = logits.dim(0), n = logits.dim(1);
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) s += ce_row(&logits[r * n], n, target);
  return s / static_cast<double>(rows);
}

double dco_term(ShaSpecModel& m, const Tensor& specific, std::size_t i) {
  auto logits = affine(specific, m.parameter("dco.w").value, &m.parameter("dco.b").value);
  return mean_ce(logits, AlignmentTargets::one_hot(i, m.modality_count()));
}

double dice_reference(const Tensor& logits, const Tensor& labels) {
  const std::size_t b = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  double total = 0.0;
  for (std::size_t c = 1; c < k; ++c) {
    double pg = 0.0, p = 0.0, g = 0.0;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t q = 0; q < hw; ++q) {
        double mx = -1e300;
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits[(n * k + j) * hw + q]);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[(n * k + j) * hw + q] - mx);
        const double prob = std::exp(logits[(n * k + c) * hw + q] - mx) / z;
        const double truth = labels[n * hw + q] == static_cast<double>(c) ? 1.0 : 0.0;
        pg += prob * truth;
        p += prob;
        g += truth;
      }
    total += 1.0 - (2.0 * pg + 1e-5) / (p + g + 1e-5);
  }
  return total / static_cast<double>(k - 1);
}

struct Eval {
  double task, dao, dco, total;
};

Eval evaluate(ShaSpecModel& m, const Batch& batch, LossWeights w, const DaoVariant& v) {
  Tape t;
  auto r = m.forward(t, batch, {});
  auto terms = total_loss(t, m, r, batch, w, v);
  return {terms.task.value().item(), terms.dao.value().item(), terms.dco.value().item(), terms.total.value().item()};
}

std::vector<Tensor> grads_after(ShaSpecModel& m, const Batch& batch, LossWeights w, const DaoVariant& v) {
  m.zero_grad();
  Tape t;
  auto r = m.forward(t, batch, {});
  t.backward(total_loss(t, m, r, batch, w, v).total);
  std::vector<Tensor> out;
  for (auto* p : m.parameters()) out.push_back(p->grad);
  return out;
}

}  // namespace

TEST_CASE("alignment targets") {
  CHECK(AlignmentTargets::one_hot(1, 3) == Tensor::vector({0, 1, 0}));
  CHECK(AlignmentTargets::uniform(4) == Tensor(Shape{4}, 0.25));
  CHECK_THROWS_AS(AlignmentTargets::one_hot(3, 3), ValidationError);
}

TEST_CASE("loss weights must be finite and non-negative") {
  CHECK_NOTHROW((LossWeights{0.0, 0.0}.validate()));
  CHECK_THROWS_AS((LossWeights{-0.1, 0.0}.validate()), ValidationError);
  CHECK_THROWS_AS((LossWeights{0.0, std::nan("")}.validate()), ValidationError);
}

TEST_CASE("uniform domain classifier gives ln N per available modality") {
  ShaSpecModel m(tiny_classifier(3));
  m.parameter("dco.w").value.fill(0.0);
  for (const auto& mask : ModalityMask::all_nonempty(3)) {
    Tape t;
    auto b = m.encode(t, random_batch(m.config(), mask, 4, 1));
    const double loss = dco_loss(t, m, b, mask).value().item();
    CHECK(loss == doctest::Approx(mask.count() * std::log(3.0)).epsilon(1e-12));
  }
}

TEST_CASE("domain classification matches a term-wise oracle") {
  auto cfg = tiny_classifier(4, 2);
  ShaSpecModel m(cfg);
  for (auto& v : m.parameter("dco.b").value.data()) v = 0.3;
  Tape t;
  auto b = m.encode(t, random_batch(cfg, ModalityMask::full(4), 5, 2));
  double expected = 0.0;
  for (std::size_t i = 0; i < 4; ++i) expected += dco_term(m, b.specific[i]->value(), i);
  CHECK(std::abs(dco_loss(t, m, b, ModalityMask::full(4)).value().item() - expected) < 1e-10);
}

TEST_CASE("losses of missing modalities are omitted") {
  // Encoders act per modality, so the full-mask bundle provides each
  // modality's features exactly as a reduced problem would compute them.
  for (auto variant : {"ce", "kl", "l1", "l2", "mse"}) {
    auto cfg = tiny_classifier(3, 3);
    cfg.dao = DaoVariant::parse(variant);
    ShaSpecModel m(cfg);
    const auto all = random_batch(cfg, ModalityMask::full(3), 4, 3);
    for (const auto& mask : ModalityMask::all_nonempty(3)) {
      Batch masked = all;
      masked.mask = mask;
      for (std::size_t i = 0; i < 3; ++i)
        if (!mask[i]) masked.inputs[i].reset();
      Tape t;
      auto b = m.encode(t, masked);
      const double dco = dco_loss(t, m, b, mask).value().item();
      const double dao = dao_loss(t, m, b, mask, cfg.dao).value().item();

      Tape ref;
      auto full = m.encode(ref, all);
      FeatureBundle reduced;
      reduced.mask = mask;
      reduced.shared.resize(3);
      reduced.specific.resize(3);
      double dco_expected = 0.0;
      for (auto i : mask.available_indices()) {
        reduced.shared[i] = full.shared[i];
        reduced.specific[i] = full.specific[i];
        dco_expected += dco_term(m, full.specific[i]->value(), i);
      }
      CHECK(std::abs(dco - dco_expected) < 1e-10);
      CHECK(std::abs(dao - dao_loss(ref, m, reduced, mask, cfg.dao).value().item()) < 1e-10);
    }
  }
}

TEST_CASE("pairwise alignment vanishes for identical features and single modalities") {
  for (auto variant : {"kl", "l1", "l2", "mse"}) {
    auto cfg = tiny_classifier(3);
    cfg.dao = DaoVariant::parse(variant);
    ShaSpecModel m(cfg);
    std::mt19937_64 rng(4);
    const Tensor r = fd::random_tensor(Shape{3, 4}, rng);
    Tape t;
    FeatureBundle b;
    b.mask = ModalityMask::full(3);
    b.shared = {t.constant(r), t.constant(r), t.constant(r)};
    b.specific.resize(3);
    CHECK(dao_loss(t, m, b, b.mask, cfg.dao).value().item() == 0.0);

    auto single = ModalityMask::from_bits("010");
    auto enc = m.encode(t, random_batch(cfg, single, 3, 5));
    CHECK(dao_loss(t, m, enc, single, cfg.dao).value().item() == 0.0);
  }
}

TEST_CASE("alignment terms are non-negative and zero only at coincidence") {
  std::mt19937_64 rng(6);
  for (auto variant : {"ce", "kl", "l1", "l2", "mse"}) {
    auto cfg = tiny_classifier(3, 7);
    cfg.dao = DaoVariant::parse(variant);
    ShaSpecModel m(cfg);
    for (int rep = 0; rep < 5; ++rep) {
      Tape t;
      auto b = m.encode(t, random_batch(cfg, ModalityMask::full(3), 3, rng()));
      const double dao = dao_loss(t, m, b, b.mask, cfg.dao).value().item();
      const double dco = dco_loss(t, m, b, b.mask).value().item();
      CHECK(dao > 0.0);
      CHECK(dco > 0.0);
    }
  }
}

TEST_CASE("uniform-target alignment is bounded below by ln N") {
  auto cfg = tiny_classifier(2);
  cfg.dao = DaoVariant::parse("ce");
  ShaSpecModel m(cfg);
  m.parameter("dao.w").value.fill(0.0);
  Tape t;
  auto b = m.encode(t, random_batch(cfg, ModalityMask::from_bits("10"), 2, 8));
  double best = 1e9, best_gap = 1e9;
  for (int i = -20; i <= 20; ++i)
    for (int j = -20; j <= 20; ++j) {
      m.parameter("dao.b").value = Tensor::vector({0.25 * i, 0.25 * j});
      const double loss = dao_loss(t, m, b, b.mask, cfg.dao).value().item();
      CHECK(loss >= std::numbers::ln2 - 1e-15);
      if (loss < best) {
        best = loss;
        best_gap = std::abs(0.25 * (i - j));
      }
      if (i == j) CHECK(loss == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
      else CHECK(loss > std::numbers::ln2 + 1e-6);
    }
  CHECK(best_gap == 0.0);
}

TEST_CASE("p-norm alignment is symmetric under modality relabeling") {
  std::mt19937_64 rng(9);
  std::vector<Tensor> r;
  for (int i = 0; i < 3; ++i) r.push_back(fd::random_tensor(Shape{3, 4}, rng));
  auto cfg = tiny_classifier(4);
  const auto mask = ModalityMask::from_bits("1101");
  const std::vector<std::size_t> slots = mask.available_indices();
  for (auto p : {"l1", "l2", "mse"}) {
    cfg.dao = DaoVariant::parse(p);
    ShaSpecModel m(cfg);
    std::vector<std::size_t> perm{0, 1, 2};
    double first = -1.0;
    do {
      Tape t;
      FeatureBundle b;
      b.mask = mask;
      b.shared.resize(4);
      for (std::size_t k = 0; k < 3; ++k) b.shared[slots[k]] = t.constant(r[perm[k]]);
      const double v = dao_loss(t, m, b, mask, cfg.dao).value().item();
      if (first < 0) first = v;
      CHECK(std::abs(v - first) < 1e-12);
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
}

TEST_CASE("dice loss: perfect, disjoint, and formula oracle") {
  Tensor labels(Shape{1, 4, 4});
  for (std::size_t q = 0; q < 8; ++q) labels[q] = 1.0;
  Tensor perfect(Shape{1, 2, 4, 4}), disjoint(Shape{1, 2, 4, 4});
  for (std::size_t q = 0; q < 16; ++q) {
    const bool fg = labels[q] == 1.0;
    perfect[q] = fg ? -40.0 : 40.0;
    perfect[16 + q] = fg ? 40.0 : -40.0;
    disjoint[q] = fg ? 40.0 : -40.0;
    disjoint[16 + q] = fg ? -40.0 : 40.0;
  }
  Tape t;
  CHECK(dice_loss(t.constant(perfect), labels).value().item() < 1e-4);
  CHECK(dice_loss(t.constant(disjoint), labels).value().item() == doctest::Approx(1.0).epsilon(1e-6));

  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor z = fd::random_tensor(Shape{2, 2, 8, 8}, rng, -3, 3);
    Tensor y(Shape{2, 8, 8});
    for (auto& v : y.data()) v = static_cast<double>(rng() % 2);
    CHECK(std::abs(dice_loss(t.constant(z), y).value().item() - dice_reference(z, y)) < 1e-10);
  }
  const Tensor z3 = fd::random_tensor(Shape{1, 3, 4, 4}, rng, -3, 3);
  Tensor y3(Shape{1, 4, 4});
  for (auto& v : y3.data()) v = static_cast<double>(rng() % 3);
  CHECK(std::abs(dice_loss(t.constant(z3), y3).value().item() - dice_reference(z3, y3)) < 1e-10);

  Tensor y2(Shape{2, 4, 4});
  for (auto& v : y2.data()) v = static_cast<double>(rng() % 3);
  std::vector<Parameter> ps{{"z", fd::random_tensor(Shape{2, 3, 4, 4}, rng)}};
  CHECK(fd::max_gradient_error(ps, [&](Tape&, std::vector<Var>& v) { return dice_loss(v[0], y2); }) < 1e-6);
}

TEST_CASE("task loss validates labels") {
  Tape t;
  Batch b;
  b.class_labels = {0, 3};
  CHECK_THROWS_AS(task_loss(t.constant(Tensor(Shape{2, 3})), b, TaskKind::classification), ValidationError);
  b.class_labels = {0, 2};
  CHECK(task_loss(t.constant(Tensor(Shape{2, 3})), b, TaskKind::classification).value().item() ==
        doctest::Approx(std::log(3.0)));
  CHECK_THROWS_AS(dice_loss(t.constant(Tensor(Shape{1, 2, 2, 2})), Tensor(Shape{1, 2, 2}, 2.0)), ValidationError);
  CHECK_THROWS_AS(dice_loss(t.constant(Tensor(Shape{1, 2, 2, 2})), Tensor(Shape{1, 3, 2})), DimensionError);
}

TEST_CASE("total loss combines the weighted terms") {
  auto cfg = tiny_classifier(3, 11);
  ShaSpecModel m(cfg);
  auto batch = random_batch(cfg, ModalityMask::from_bits("011"), 4, 11);
  const auto zero = evaluate(m, batch, {0.0, 0.0}, cfg.dao);
  CHECK(zero.total == zero.task);
  const auto defaults = evaluate(m, batch, {0.1, 0.02}, cfg.dao);
  CHECK(std::abs(defaults.total - (defaults.task + 0.1 * defaults.dao + 0.02 * defaults.dco)) < 1e-12);

  // Affine in (alpha, beta): three evaluations reconstruct any fourth.
  const double dao = evaluate(m, batch, {1.0, 0.0}, cfg.dao).total - zero.total;
  const double dco = evaluate(m, batch, {0.0, 1.0}, cfg.dao).total - zero.total;
  const auto probe = evaluate(m, batch, {0.7, 0.5}, cfg.dao);
  CHECK(std::abs(probe.total - (zero.total + 0.7 * dao + 0.5 * dco)) < 1e-12);
}

TEST_CASE("gradients are routed to the right parameter groups") {
  for (auto variant : {"ce", "kl", "l1"}) {
    auto cfg = tiny_classifier(3, 12);
    cfg.dao = DaoVariant::parse(variant);
    ShaSpecModel m(cfg);
    auto batch = random_batch(cfg, ModalityMask::full(3), 4, 12);
    const auto params = m.parameters();
    const auto g00 = grads_after(m, batch, {0.0, 0.0}, cfg.dao);
    const auto ga = grads_after(m, batch, {0.5, 0.0}, cfg.dao);
    const auto gb = grads_after(m, batch, {0.0, 0.5}, cfg.dao);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& name = params[k]->name;
      const bool shared = name.starts_with("shared."), specific = name.starts_with("specific.");
      const bool dao = name.starts_with("dao."), dco = name.starts_with("dco.");
      double da = 0.0, db = 0.0;
      for (std::size_t e = 0; e < g00[k].size(); ++e) {
        da = std::max(da, std::abs(ga[k][e] - g00[k][e]));
        db = std::max(db, std::abs(gb[k][e] - g00[k][e]));
      }
      if (dao || dco) CHECK(std::all_of(g00[k].data().begin(), g00[k].data().end(), [](double g) { return g == 0; }));
      // alpha touches only shared (and its head); beta only specific (and its head).
      if (specific || dco) CHECK(da == 0.0);
      if (shared || dao) CHECK(db == 0.0);
      if (!shared && !dao) CHECK(da == 0.0);
      if (!specific && !dco) CHECK(db == 0.0);
      if (dco) CHECK(db > 0.0);
      if (specific) CHECK(db > 0.0);
      if (shared) CHECK(da > 0.0);
    }
  }
}

TEST_CASE("total loss gradients match finite differences for every variant") {
  for (auto variant : {"ce", "kl", "l1", "l2", "mse"}) {
    for (auto cfg : {tiny_classifier(3, 13), tiny_segmenter(2, 14)}) {
      cfg.dao = DaoVariant::parse(variant);
      ShaSpecModel m(cfg);
      const auto mask = cfg.modality_count == 3 ? ModalityMask::from_bits("110") : ModalityMask::full(2);
      auto batch = random_batch(cfg, mask, 2, 15);
      const LossWeights w{0.3, 0.2};
      auto value = [&] { return evaluate(m, batch, w, cfg.dao).total; };
      grads_after(m, batch, w, cfg.dao);
      double worst = 0.0;
      const double h = 1e-5;
      for (auto* p : m.parameters())
        for (std::size_t i = 0; i < p->value.size(); ++i) {
          const double orig = p->value[i];
          p->value[i] = orig + h;
          const double up = value();
          p->value[i] = orig - h;
          const double down = value();
          p->value[i] = orig;
          worst = std::max(worst, fd::rel_err(p->grad[i], (up - down) / (2 * h)));
        }
      CHECK_MESSAGE(worst < 1e-4, variant);
    }
  }
}
