#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "shaspec/metrics.hpp"
#include "shaspec/synth.hpp"
#include "shaspec/trainer.hpp"

using namespace shaspec;

namespace {

Tensor map_of(std::size_t h, std::size_t w, std::initializer_list<double> v) {
  Tensor t(Shape{h, w});
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

long foreground(const Tensor& m) {
  return std::count_if(m.data().begin(), m.data().end(), [](double v) { return v != 0.0; });
}

// Union-find over foreground pixels, joining pairs within Chebyshev distance 2.
Tensor smooth_oracle(const Tensor& mask, long min_region) {
  const long h = static_cast<long>(mask.shape()[0]), w = static_cast<long>(mask.shape()[1]);
  std::vector<long> parent(h * w);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](long x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  auto on = [&](long r, long c) { return mask[r * w + c] != 0.0; };
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      if (!on(r, c)) continue;
      for (long r2 = 0; r2 < h; ++r2)
        for (long c2 = 0; c2 < w; ++c2)
          if (on(r2, c2) && std::max(std::abs(r - r2), std::abs(c - c2)) <= 2)
            parent[find(r * w + c)] = find(r2 * w + c2);
    }
  std::vector<long> size(h * w, 0);
  for (long p = 0; p < h * w; ++p)
    if (mask[p] != 0.0) ++size[find(p)];
  Tensor out(mask.shape());
  for (long p = 0; p < h * w; ++p)
    if (mask[p] != 0.0 && size[find(p)] >= min_region) out[p] = 1.0;
  return out;
}

double silhouette_oracle(const std::vector<std::vector<double>>& pts, const std::vector<std::size_t>& lab) {
  auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
  };
  const std::size_t n = pts.size();
  const std::size_t k = *std::max_element(lab.begin(), lab.end()) + 1;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> sum(k, 0.0);
    std::vector<double> cnt(k, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      sum[lab[j]] += dist(pts[i], pts[j]);
      cnt[lab[j]] += 1;
    }
    const double a = sum[lab[i]] / cnt[lab[i]];
    double b = INFINITY;
    for (std::size_t c = 0; c < k; ++c)
      if (c != lab[i] && cnt[c] > 0) b = std::min(b, sum[c] / cnt[c]);
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

SynthSpec small_spec(std::uint64_t seed = 4) {
  SynthSpec s;
  s.modality_count = 3;
  s.seed = seed;
  s.sample_count = 90;
  s.input_dim = 6;
  s.shared_latent_dim = 3;
  s.specific_latent_dim = 3;
  s.class_count = 3;
  return s;
}

ShaSpecModel small_model(const Dataset& data) {
  ModelConfig base;
  base.encoder_hidden = 8;
  base.feature_dim = 4;
  base.decoder_hidden = 8;
  base.seed = 9;
  return ShaSpecModel(model_config_for(data, base));
}

}  // namespace

TEST_CASE("argmax and accuracy") {
  Tensor s(Shape{4, 3});
  const double v[] = {0.1, 0.7, 0.2, 2, 2, 1, -1, -3, -0.5, 0, 0, 0};
  std::copy(std::begin(v), std::end(v), s.data().begin());
  CHECK(argmax_rows(s) == std::vector<std::size_t>{1, 0, 2, 0});
  const std::uint32_t labels[] = {1, 1, 2, 0};
  CHECK(accuracy(s, labels) == 0.75);
  CHECK_THROWS_AS(accuracy(s, std::span<const std::uint32_t>(labels, 3)), DimensionError);
}

TEST_CASE("accuracy matches a direct count on random scores") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor s(Shape{50, 4});
    for (auto& x : s.data()) x = g(rng);
    std::vector<std::uint32_t> y(50);
    for (auto& l : y) l = static_cast<std::uint32_t>(rng() % 4);
    int hits = 0;
    for (std::size_t r = 0; r < 50; ++r) {
      const double* row = &s[r * 4];
      hits += static_cast<std::uint32_t>(std::max_element(row, row + 4) - row) == y[r];
    }
    CHECK(accuracy(s, y) == doctest::Approx(hits / 50.0).epsilon(1e-15));
  }
}

TEST_CASE("dice score") {
  const auto a = map_of(2, 3, {1, 1, 0, 0, 1, 0});
  const auto b = map_of(2, 3, {1, 0, 0, 1, 1, 1});
  CHECK(dice_score(a, b) == doctest::Approx(2.0 * 2 / (3 + 4)));
  CHECK(dice_score(a, b) == dice_score(b, a));
  CHECK(dice_score(a, a) == 1.0);
  CHECK(dice_score(Tensor(Shape{2, 2}), Tensor(Shape{2, 2})) == 1.0);
  CHECK(dice_score(map_of(1, 2, {1, 0}), map_of(1, 2, {0, 1})) == 0.0);
  CHECK_THROWS_AS(dice_score(a, Tensor(Shape{3, 2})), DimensionError);
}

TEST_CASE("smoothing removes small regions and joins pixels two hops apart") {
  // lone pixel at (0,0); pair at (0,4),(2,4) two rows apart; 2x2 block bottom right
  auto m = Tensor(Shape{8, 7});
  m[0 * 7 + 0] = 1;
  m[0 * 7 + 4] = 1;
  m[2 * 7 + 4] = 1;
  for (auto p : {6 * 7 + 5, 6 * 7 + 6, 7 * 7 + 5, 7 * 7 + 6}) m[p] = 1;
  const auto kept2 = smoothness_enhance(m, 2);
  CHECK(kept2[0] == 0.0);
  CHECK(kept2[4] == 1.0);
  CHECK(kept2[2 * 7 + 4] == 1.0);
  CHECK(foreground(kept2) == 6);
  const auto kept4 = smoothness_enhance(m, 4);
  CHECK(foreground(kept4) == 4);
  CHECK(kept4[7 * 7 + 6] == 1.0);
  CHECK(smoothness_enhance(m, 1).data()[0] == 1.0);

  // three pixels apart are separate components
  auto far = Tensor(Shape{1, 7});
  far[0] = 1;
  far[3] = 1;
  CHECK(foreground(smoothness_enhance(far, 2)) == 0);
  CHECK_THROWS_AS(smoothness_enhance(m, 0), ValidationError);
  CHECK_THROWS_AS(smoothness_enhance(Tensor(Shape{4}), 2), DimensionError);
}

TEST_CASE("smoothing agrees with a union-find oracle on random masks") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 3 + rng() % 10, w = 3 + rng() % 10;
    const double density = 0.05 + 0.35 * static_cast<double>(rng() % 100) / 100.0;
    const long min_region = 1 + static_cast<long>(rng() % 6);
    Tensor m(Shape{h, w});
    std::bernoulli_distribution on(density);
    for (auto& v : m.data()) v = on(rng) ? 1.0 : 0.0;
    const auto got = smoothness_enhance(m, min_region);
    REQUIRE(std::ranges::equal(got.data(), smooth_oracle(m, min_region).data()));
    // idempotent and never adds foreground
    CHECK(std::ranges::equal(smoothness_enhance(got, min_region).data(), got.data()));
    for (std::size_t p = 0; p < m.size(); ++p) CHECK(got[p] <= m[p]);
  }
}

TEST_CASE("silhouette") {
  SUBCASE("hand example") {
    const std::vector<std::vector<double>> p = {{0}, {1}, {4}, {6}};
    const std::vector<std::size_t> l = {0, 0, 1, 1};
    // point 0: a=1, b=5; point 1: a=1, b=4; point 2: a=2, b=3.5; point 3: a=2, b=5.5
    const double expect = (4.0 / 5 + 3.0 / 4 + 1.5 / 3.5 + 3.5 / 5.5) / 4;
    CHECK(silhouette(p, l) == doctest::Approx(expect).epsilon(1e-14));
  }
  SUBCASE("oracle on random clouds") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<std::vector<double>> p;
      std::vector<std::size_t> l;
      for (int i = 0; i < 30; ++i) {
        l.push_back(i % 3);
        p.push_back({g(rng) + (i % 3), g(rng), g(rng)});
      }
      CHECK(silhouette(p, l) == doctest::Approx(silhouette_oracle(p, l)).epsilon(1e-12));
    }
  }
  SUBCASE("separated clusters score high, identical points zero, shuffles near zero") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 0.1);
    std::vector<std::vector<double>> p;
    std::vector<std::size_t> l;
    for (int i = 0; i < 60; ++i) {
      l.push_back(i % 3);
      p.push_back({10.0 * (i % 3) + g(rng), g(rng)});
    }
    CHECK(silhouette(p, l) > 0.9);
    for (int s = 0; s < 20; ++s) {
      auto shuffled = l;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      CHECK(std::abs(silhouette(p, shuffled)) < 0.1);
    }
    const std::vector<std::vector<double>> same(6, std::vector<double>{1.0, 2.0});
    CHECK(silhouette(same, std::vector<std::size_t>{0, 0, 1, 1, 2, 2}) == 0.0);
  }
  SUBCASE("errors") {
    const std::vector<std::vector<double>> p = {{0}, {1}, {2}};
    CHECK_THROWS_AS(silhouette(p, std::vector<std::size_t>{0, 0, 0}), ValidationError);
    CHECK_THROWS_AS(silhouette(p, std::vector<std::size_t>{0, 0, 1}), ValidationError);
    CHECK_THROWS_AS(silhouette(p, std::vector<std::size_t>{0, 1}), DimensionError);
  }
}

TEST_CASE("all-subset evaluation") {
  const auto data = generate(small_spec());
  auto model = small_model(data);
  EvalOptions opts;
  opts.batch_size = 7;
  opts.seed = 42;
  const auto rep = eval_all_subsets(model, data, opts);
  REQUIRE(rep.rows.size() == 7);
  const std::vector<std::string> order = {"100", "010", "001", "110", "101", "011", "111"};
  double sum = 0;
  for (std::size_t k = 0; k < 7; ++k) {
    CHECK(rep.rows[k].mask == order[k]);
    CHECK(rep.rows[k].metric == "accuracy");
    CHECK(rep.rows[k].seed == 42);
    sum += rep.rows[k].value;
  }
  REQUIRE(rep.aggregate.size() == 1);
  CHECK(rep.aggregate[0].mask == "avg");
  CHECK(std::abs(rep.aggregate[0].value - sum / 7) <= 1e-12);

  // the full row equals a direct evaluation of every sample in one batch
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto batch = Batch::from_dataset(data, idx, ModalityMask::full(3));
  Tape tape;
  const auto logits = model.forward(tape, batch, {}).prediction.value();
  CHECK(rep.rows[6].value == doctest::Approx(accuracy(logits, batch.class_labels)).epsilon(1e-15));

  const auto again = eval_all_subsets(model, data, opts);
  CHECK(again.to_csv() == rep.to_csv());
  const auto csv = rep.to_csv();
  CHECK(csv.rfind("mask,metric,value,seed\n100,accuracy,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
}

TEST_CASE("evaluation skips samples lacking a requested modality") {
  auto data = generate(small_spec());
  const auto masks = realize_masks(AvailabilityPolicy::uniform_subset(), 3, data.size(), 8);
  for (std::size_t j = 0; j < data.size(); ++j) {
    data.samples[j].mask = masks[j];
    for (std::size_t i = 0; i < 3; ++i)
      if (!masks[j][i]) data.samples[j].inputs[i].reset();
  }
  auto model = small_model(data);
  const auto m = ModalityMask::from_bits("110");
  Dataset subset;
  subset.task = data.task;
  subset.modality_count = 3;
  for (const auto& s : data.samples)
    if (s.mask[0] && s.mask[1]) subset.samples.push_back(s);
  REQUIRE(subset.size() > 0);
  CHECK(evaluate_mask(model, data, m) == evaluate_mask(model, subset, m));
  Dataset none = subset;
  for (auto& s : none.samples) {
    s.mask = ModalityMask::from_bits("001");
    s.inputs = {std::nullopt, std::nullopt, s.inputs[0]};
  }
  CHECK_THROWS_AS(evaluate_mask(model, none, m), ValidationError);
}

TEST_CASE("segmentation evaluation uses per-sample Dice of the foreground") {
  SynthSpec s;
  s.task = TaskKind::segmentation;
  s.modality_count = 2;
  s.image_size = 8;
  s.min_area = 6;
  s.max_area = 20;
  s.sample_count = 5;
  s.seed = 6;
  const auto data = generate(s);
  ModelConfig base;
  base.channels1 = 2;
  base.channels2 = 3;
  ShaSpecModel model(model_config_for(data, base));
  for (std::optional<long> smooth : {std::optional<long>{}, std::optional<long>{4}}) {
    EvalOptions opts;
    opts.smooth = smooth;
    double expect = 0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const std::size_t one[] = {j};
      const auto b = Batch::from_dataset(data, one, ModalityMask::full(2));
      Tape tape;
      const auto logits = model.forward(tape, b, {}).prediction.value();
      Tensor pred(Shape{8, 8});
      for (std::size_t p = 0; p < 64; ++p) pred[p] = logits[64 + p] > logits[p] ? 1.0 : 0.0;
      if (smooth) pred = smooth_oracle(pred, *smooth);
      Tensor truth(Shape{8, 8});
      for (std::size_t p = 0; p < 64; ++p) truth[p] = (*b.segmentation_labels)[p] != 0.0 ? 1.0 : 0.0;
      expect += dice_score(pred, truth);
    }
    expect /= static_cast<double>(data.size());
    CHECK(evaluate_mask(model, data, ModalityMask::full(2), opts) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(metric_name(TaskKind::segmentation, opts) == (smooth ? "dice_smoothed" : "dice"));
  }
}

TEST_CASE("features and embeddings") {
  auto data = generate(small_spec());
  data.samples[0].mask = ModalityMask::from_bits("101");
  data.samples[0].inputs[1].reset();
  auto model = small_model(data);
  const auto fs = collect_features(model, data, 10);
  CHECK(fs.shared.size() == 29);
  CHECK(fs.specific.size() == 29);
  CHECK(fs.modality[0] == 0);
  CHECK(fs.modality[1] == 2);
  CHECK(fs.sample[2] == 1);
  CHECK(fs.shared[0].size() == model.pooled_dim());

  const auto stats = feature_silhouettes(model, data, 40);
  CHECK(stats.shared >= -1.0);
  CHECK(stats.specific <= 1.0);

  const auto csv = embeddings_csv(model, data);
  CHECK(csv == embeddings_csv(model, data));
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "kind,modality,sample,dim0,dim1,dim2,dim3");
  std::size_t rows = 0;
  std::getline(in, line);
  CHECK(line.rfind("shared,1,0,", 0) == 0);
  std::getline(in, line);
  CHECK(line.rfind("specific,1,0,", 0) == 0);
  rows = 2;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 2 * (3 * data.size() - 1));
}
