// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Exit status is non-zero when a criterion fails that is not listed in
// --expect-fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include <unistd.h>

#include "CLI11.hpp"
#include "commands.hpp"
#include "shaspec/binary_io.hpp"
#include "shaspec/objectives.hpp"
#include "shaspec/synth.hpp"

using namespace shaspec;
using namespace shaspec::cli;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  std::vector<std::string> info;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor& param(ShaSpecModel& model, const std::string& name) {
  for (auto* p : model.parameters())
    if (p->name == name) return p->value;
  throw std::runtime_error("no parameter " + name);
}

// Plain row-major matrix helpers for the oracles.
using Mat = std::vector<std::vector<double>>;

Mat rows_of(const Tensor& t) {
  const std::size_t b = t.shape()[0], d = t.size() / b;
  Mat m(b, std::vector<double>(d));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) m[i][j] = t[i * d + j];
  return m;
}

std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor* bias) {
  const std::size_t in = w.shape()[0], out = w.shape()[1];
  std::vector<double> y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = bias ? (*bias)[o] : 0.0;
    for (std::size_t k = 0; k < in; ++k) acc += x[k] * w[k * out + o];
    y[o] = acc;
  }
  return y;
}

std::vector<double> softmax(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) s += p[j] = std::exp(z[j] - m);
  for (auto& v : p) v /= s;
  return p;
}

ModelConfig tiny(std::size_t n, std::uint64_t seed, const char* dao = "l1") {
  ModelConfig c;
  c.task = TaskKind::classification;
  c.modality_count = n;
  c.input_shapes.assign(n, Shape{5});
  c.class_count = 3;
  c.encoder_hidden = 6;
  c.feature_dim = 4;
  c.decoder_hidden = 6;
  c.dropout = 0.0;
  c.activation = Activation::tanh;
  c.dao = DaoVariant::parse(dao);
  c.kl_projection_dim = 3;
  c.seed = seed;
  return c;
}

Batch random_batch(const ModelConfig& c, const ModalityMask& mask, std::size_t b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Batch batch;
  batch.mask = mask;
  batch.size = b;
  batch.inputs.resize(c.modality_count);
  for (std::size_t i = 0; i < c.modality_count; ++i) {
    if (!mask[i]) continue;
    Tensor t(Shape{b, c.input_shapes[i][0]});
    for (auto& v : t.data()) v = u(rng);
    batch.inputs[i] = std::move(t);
  }
  for (std::size_t k = 0; k < b; ++k) batch.class_labels.push_back(static_cast<std::uint32_t>(rng() % c.class_count));
  return batch;
}

/// Same inputs as `full` with the modalities outside `mask` removed.
Batch restrict(const Batch& full, const ModalityMask& mask) {
  Batch b = full;
  b.mask = mask;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) b.inputs[i].reset();
  return b;
}

// ---------------------------------------------------------------------------
// 1

Outcome gradient_suite() {
  GradCheckRequest req;
  req.seed = 0;
  req.seeds = 20;
  req.tol = 1e-4;
  const auto r = grad_check(req);
  std::set<std::string> daos;
  bool full = false, missing = false;
  for (const auto& c : r.cases) {
    daos.insert(c.label.substr(c.label.find('/') + 1, c.label.find('/', c.label.find('/') + 1) - c.label.find('/') - 1));
    (c.label.find("/111/") != std::string::npos ? full : missing) = true;
  }
  Outcome o;
  o.pass = r.worst < 1e-4 && full && missing && daos.count("ce") && daos.count("kl") && daos.count("l1");
  o.detail = "worst relative error " + fmt("%.2e", r.worst) + " (" + r.worst_param + ", " + r.worst_case + ") over " +
             std::to_string(r.cases.size()) + " cases, 20 seeds, tol 1e-4";
  return o;
}

// ---------------------------------------------------------------------------
// 2

Outcome imputation_oracle() {
  double worst = 0.0, worst_perm = 0.0;
  bool noop = true;
  std::size_t masks = 0;
  for (std::size_t n : {2, 3, 4}) {
    const auto cfg = tiny(n, 100 + n);
    ShaSpecModel model(cfg);
    const auto full_batch = random_batch(cfg, ModalityMask::full(n), 5, 7 * n);
    for (const auto& mask : ModalityMask::all_nonempty(n)) {
      Tape tape;
      const auto batch = restrict(full_batch, mask);
      auto bundle = model.encode(tape, batch);
      model.fuse(tape, bundle);
      if (mask.is_full()) {
        std::vector<Tensor> before;
        std::vector<std::size_t> ids;
        for (auto& f : bundle.fused) {
          before.push_back(f->value());
          ids.push_back(f->id());
        }
        const auto size = tape.size();
        impute_missing(tape, bundle, mask);
        noop = noop && tape.size() == size;
        for (std::size_t i = 0; i < n; ++i)
          noop = noop && bundle.fused[i]->id() == ids[i] &&
                 std::ranges::equal(bundle.fused[i]->value().data(), before[i].data());
        continue;
      }
      ++masks;
      const auto avail = mask.available_indices();
      auto permuted = bundle;
      impute_missing(tape, bundle, mask);
      // mean of available shared features, plain arithmetic
      const std::size_t len = bundle.shared[avail[0]]->value().size();
      std::vector<double> mean(len, 0.0);
      for (auto i : avail)
        for (std::size_t j = 0; j < len; ++j) mean[j] += bundle.shared[i]->value()[j];
      for (auto& v : mean) v /= static_cast<double>(avail.size());
      for (auto m : mask.missing_indices())
        for (std::size_t j = 0; j < len; ++j) worst = std::max(worst, std::abs(bundle.fused[m]->value()[j] - mean[j]));

      // rotate the shared features among the available slots
      for (std::size_t k = 0; k < avail.size(); ++k)
        permuted.shared[avail[k]] = bundle.shared[avail[(k + 1) % avail.size()]];
      impute_missing(tape, permuted, mask);
      for (auto m : mask.missing_indices())
        for (std::size_t j = 0; j < len; ++j)
          worst_perm = std::max(worst_perm, std::abs(permuted.fused[m]->value()[j] - bundle.fused[m]->value()[j]));
    }
  }
  Outcome o;
  o.pass = worst <= 1e-12 && worst_perm <= 1e-12 && noop && masks == 2 + 6 + 14;
  o.detail = std::to_string(masks) + " non-full masks for N=2,3,4: max |imputed - mean| " + fmt("%.1e", worst) +
             ", permutation " + fmt("%.1e", worst_perm) + ", full-mask no-op " + (noop ? "bit-exact" : "VIOLATED");
  return o;
}

// ---------------------------------------------------------------------------
// 3

double dco_oracle(const std::vector<Mat>& spec, const ModalityMask& mask, ShaSpecModel& model) {
  const auto& w = param(model, "dco.w");
  const auto& b = param(model, "dco.b");
  double total = 0.0;
  for (auto i : mask.available_indices()) {
    double acc = 0.0;
    for (const auto& row : spec[i]) acc += -std::log(softmax(affine(row, w, &b))[i]);
    total += acc / static_cast<double>(spec[i].size());
  }
  return total;
}

double dao_oracle(const std::vector<Mat>& shared, const ModalityMask& mask, ShaSpecModel& model,
                  const DaoVariant& v) {
  const auto avail = mask.available_indices();
  const std::size_t n = mask.size(), rows = shared[avail[0]].size();
  double total = 0.0;
  if (v.kind == DaoKind::ce_uniform) {
    const auto& w = param(model, "dao.w");
    const auto& b = param(model, "dao.b");
    for (auto i : avail) {
      double acc = 0.0;
      for (const auto& row : shared[i]) {
        const auto p = softmax(affine(row, w, &b));
        for (double pj : p) acc += -std::log(pj) / static_cast<double>(n);
      }
      total += acc / static_cast<double>(rows);
    }
  } else if (v.kind == DaoKind::kl_pairwise) {
    const auto& w = param(model, "dao.w");
    for (auto i : avail)
      for (auto k : avail) {
        if (i == k) continue;
        double acc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          const auto p = softmax(affine(shared[i][r], w, nullptr));
          const auto q = softmax(affine(shared[k][r], w, nullptr));
          for (std::size_t j = 0; j < p.size(); ++j)
            if (p[j] > 0) acc += p[j] * std::log(p[j] / std::max(q[j], 1e-12));
        }
        total += acc / static_cast<double>(rows);
      }
  } else {
    for (std::size_t a = 0; a < avail.size(); ++a)
      for (std::size_t c = a + 1; c < avail.size(); ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          const auto& x = shared[avail[a]][r];
          const auto& y = shared[avail[c]][r];
          double s = 0.0;
          for (std::size_t j = 0; j < x.size(); ++j) {
            const double d = x[j] - y[j];
            s += v.p == ops::PNorm::l1 ? std::abs(d) : d * d;
          }
          acc += v.p == ops::PNorm::l2 ? std::sqrt(s) : s / static_cast<double>(x.size());
        }
        total += acc / static_cast<double>(rows);
      }
  }
  return total;
}

Outcome omission_rule() {
  double worst = 0.0;
  std::size_t checks = 0;
  for (const char* dao : {"ce", "kl", "l1", "l2", "mse"}) {
    const auto cfg = tiny(3, 31, dao);
    ShaSpecModel model(cfg);
    const auto full_batch = random_batch(cfg, ModalityMask::full(3), 6, 99);
    // Features of every modality from a full-mask encode; the oracle only
    // reads the available ones.
    std::vector<Mat> shared, spec;
    {
      Tape tape;
      const auto bundle = model.encode(tape, full_batch);
      for (std::size_t i = 0; i < 3; ++i) {
        shared.push_back(rows_of(bundle.shared[i]->value()));
        spec.push_back(rows_of(bundle.specific[i]->value()));
      }
    }
    for (const auto& mask : ModalityMask::all_nonempty(3)) {
      Tape tape;
      const auto bundle = model.encode(tape, restrict(full_batch, mask));
      const double dco = dco_loss(tape, model, bundle, mask).value().item();
      const double dao_v = dao_loss(tape, model, bundle, mask, cfg.dao).value().item();
      worst = std::max(worst, std::abs(dco - dco_oracle(spec, mask, model)));
      worst = std::max(worst, std::abs(dao_v - dao_oracle(shared, mask, model, cfg.dao)));
      ++checks;
    }
  }

  // Zero update of missing specific encoders, step by step, with optimizer
  // state built up by earlier steps.
  SynthSpec s;
  s.seed = 5;
  s.sample_count = 200;
  s.input_dim = 8;
  const auto data = generate(s);
  ModelConfig base;
  base.encoder_hidden = 16;
  base.feature_dim = 8;
  base.decoder_hidden = 16;
  ShaSpecModel model(model_config_for(data, base));
  TrainConfig tc;
  tc.iterations = 300;
  tc.seed = 3;
  std::size_t steps = 0, violations = 0;
  for (auto opt : {OptimizerConfig::adam(), OptimizerConfig::nesterov()}) {
    tc.optimizer = opt;
    Trainer tr(model, data, tc);
    for (std::size_t k = 0; k < 150; ++k) {
      const auto mask = tr.mask_at(k);
      std::vector<std::vector<Tensor>> before;
      for (std::size_t i = 0; i < 3; ++i) {
        before.emplace_back();
        for (auto* p : model.group(ParamGroup::specific, i)) before.back().push_back(p->value);
      }
      tr.step();
      ++steps;
      for (auto i : mask.missing_indices()) {
        const auto ps = model.group(ParamGroup::specific, i);
        for (std::size_t k2 = 0; k2 < ps.size(); ++k2)
          if (!std::ranges::equal(ps[k2]->value.data(), before[i][k2].data())) ++violations;
      }
    }
  }
  Outcome o;
  o.pass = worst <= 1e-10 && violations == 0;
  o.detail = std::to_string(checks) + " mask/variant pairs: max |loss - available-only oracle| " + fmt("%.1e", worst) +
             "; " + std::to_string(steps) + " steps (Adam, Nesterov), " + std::to_string(violations) +
             " missing-encoder updates";
  return o;
}

// ---------------------------------------------------------------------------
// 4

Outcome residual_fusion() {
  const auto cfg = tiny(3, 17);
  ShaSpecModel model(cfg);
  const auto batch = random_batch(cfg, ModalityMask::full(3), 4, 5);
  bool exact = true;
  double worst = 0.0;
  {
    auto& w = param(model, "proj.w");
    const Tensor saved = w;
    w.fill(0.0);
    Tape tape;
    auto bundle = model.encode(tape, batch);
    model.fuse(tape, bundle);
    for (std::size_t i = 0; i < 3; ++i)
      exact = exact && std::ranges::equal(bundle.fused[i]->value().data(), bundle.shared[i]->value().data());
    w = saved;
  }
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  auto& w = param(model, "proj.w");
  for (auto& v : w.data()) v = g(rng);
  Tape tape;
  auto bundle = model.encode(tape, batch);
  model.fuse(tape, bundle);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto r = rows_of(bundle.shared[i]->value());
    const auto s = rows_of(bundle.specific[i]->value());
    const auto f = rows_of(bundle.fused[i]->value());
    for (std::size_t b = 0; b < r.size(); ++b) {
      std::vector<double> cat = r[b];
      cat.insert(cat.end(), s[b].begin(), s[b].end());
      const auto proj = affine(cat, w, nullptr);
      for (std::size_t j = 0; j < proj.size(); ++j) worst = std::max(worst, std::abs((f[b][j] - r[b][j]) - proj[j]));
    }
  }
  Outcome o;
  o.pass = exact && worst <= 1e-12;
  o.detail = std::string("zero projection: fused == shared ") + (exact ? "exactly" : "NOT exactly") +
             "; random projection: max |(fused - shared) - proj(concat)| " + fmt("%.1e", worst);
  return o;
}

// ---------------------------------------------------------------------------
// 5, 6, 8

struct SeedResult {
  std::uint64_t seed = 0;
  EvalReport shaspec, baseline, full_only;
  FeatureStats features;
};

double single_mean(const EvalReport& r) {
  double s = 0.0;
  int n = 0;
  for (const auto& row : r.rows)
    if (std::count(row.mask.begin(), row.mask.end(), '1') == 1) {
      s += row.value;
      ++n;
    }
  return s / n;
}

double row_value(const EvalReport& r, const std::string& mask) {
  for (const auto& row : r.rows)
    if (row.mask == mask) return row.value;
  throw std::runtime_error("missing row " + mask);
}

struct Study {
  std::vector<SeedResult> seeds;
  double seconds = 0.0;
};

Study run_classification_study() {
  const auto t0 = std::chrono::steady_clock::now();
  Study st;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthSpec spec;
    spec.seed = seed;
    spec.sample_count = 2000;
    const auto train_set = generate(spec);
    spec.stream = 1;
    spec.sample_count = 500;
    const auto test_set = generate(spec);

    ModelConfig base;
    base.seed = seed;
    const auto mc = model_config_for(train_set, base);
    auto tc = TrainConfig::defaults_for(TaskKind::classification);
    tc.seed = seed;
    tc.log_interval = tc.iterations;

    SeedResult r;
    r.seed = seed;
    EvalOptions eo;
    eo.seed = seed;
    {
      ShaSpecModel m(mc);
      train(m, train_set, tc);
      r.shaspec = eval_all_subsets(m, test_set, eo);
      if (seed < 3) r.features = feature_silhouettes(m, test_set, 300);
    }
    auto bc = mc;
    bc.imputation = ImputationMode::zero;
    auto btc = tc;
    btc.weights = {0.0, 0.0};
    {
      ShaSpecModel m(bc);
      train(m, train_set, btc);
      r.baseline = eval_all_subsets(m, test_set, eo);
    }
    btc.availability = AvailabilityPolicy::full();
    {
      ShaSpecModel m(bc);
      train(m, train_set, btc);
      r.full_only = eval_all_subsets(m, test_set, eo);
    }
    st.seeds.push_back(std::move(r));
  }
  st.seconds = seconds_since(t0);
  return st;
}

Outcome missing_modality_benefit(const Study& st) {
  double gap = 0.0, ours = 0.0, theirs = 0.0, full_only = 0.0;
  Outcome o;
  for (const auto& r : st.seeds) {
    const double a = single_mean(r.shaspec), b = single_mean(r.baseline), c = single_mean(r.full_only);
    ours += a;
    theirs += b;
    full_only += c;
    o.info.push_back("seed " + std::to_string(r.seed) + ": single-modality accuracy ShaSpec " + fmt("%.4f", a) +
                     ", zero-imputation baseline " + fmt("%.4f", b) + ", full ShaSpec " +
                     fmt("%.4f", row_value(r.shaspec, "111")) + ", full baseline " +
                     fmt("%.4f", row_value(r.baseline, "111")));
  }
  const double n = static_cast<double>(st.seeds.size());
  gap = (ours - theirs) / n;
  o.info.push_back("not scored: zero-imputation baseline trained on complete data only, single-modality accuracy " +
                   fmt("%.4f", full_only / n) + " (gap " + fmt("%+.1f", 100.0 * (ours - full_only) / n) +
                   " points)");
  o.pass = gap >= 0.05 && st.seconds < 600.0;
  o.detail = "mean single-modality accuracy " + fmt("%.4f", ours / n) + " vs baseline " + fmt("%.4f", theirs / n) +
             ": gap " + fmt("%+.2f", 100.0 * gap) + " points (need >= +5) over 5 seeds, " + fmt("%.0f", st.seconds) +
             " s";
  return o;
}

Outcome monotonicity(const Study& st) {
  Outcome o;
  o.pass = true;
  double worst = 1.0;
  for (const auto& r : st.seeds) {
    const double full = row_value(r.shaspec, "111");
    for (const auto& row : r.shaspec.rows)
      if (std::count(row.mask.begin(), row.mask.end(), '1') == 1) {
        worst = std::min(worst, full - row.value);
        o.pass = o.pass && full >= row.value - 0.01;
      }
  }
  o.detail = "min over seeds and single masks of (full - single) = " + fmt("%+.4f", worst) + " (need >= -0.01)";
  return o;
}

Outcome feature_structure(const Study& st) {
  Outcome o;
  bool strict = true, specific_ok = true, shared_ok = true;
  std::string values;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& f = st.seeds[k].features;
    strict = strict && f.specific > f.shared;
    specific_ok = specific_ok && f.specific > 0.3;
    shared_ok = shared_ok && f.shared < 0.2;
    values += (k ? "; " : "") + fmt("%.3f", f.specific) + "/" + fmt("%.3f", f.shared);
  }
  o.pass = strict && specific_ok && shared_ok;
  o.detail = "silhouette specific/shared per seed " + values + ": specific > shared on 3/3 " +
             (strict ? "yes" : "no") + ", specific > 0.3 " + (specific_ok ? "yes" : "no") + ", shared < 0.2 " +
             (shared_ok ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------
// 7

Outcome ablation_machinery(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  KeyValues data_cfg{{"data.task", "classification"}, {"data.seed", "0"}};
  const auto data = work / "data";
  gen_data(data_cfg, data);
  const std::vector<std::string> grid = {"0", "0.02", "0.1", "0.5", "0.7", "1"};
  struct Job {
    std::string param;
    std::vector<std::string> values;
    KeyValues config;
    std::string dir;
  };
  const std::vector<Job> jobs = {{"alpha", grid, {}, "alpha"},
                                 {"beta", grid, {}, "beta"},
                                 {"dao", {"ce", "kl", "l1", "mse"}, {}, "dao"},
                                 {"alpha", {"1"}, {{"train.beta", "1"}}, "alpha_beta_1"}};
  Outcome o;
  bool ok = true;
  std::map<std::string, std::string> csvs;
  for (const auto& j : jobs) {
    SweepRequest req;
    req.param = j.param;
    req.values = j.values;
    req.config = j.config;
    req.data = data;
    req.out = work / j.dir;
    req.threads = threads_from_env();
    const auto csv = sweep_command(req);
    csvs[j.dir] = csv;
    const auto svg = render_svg(csv);
    std::ofstream(req.out / "sweep.svg", std::ios::binary) << svg;

    // well-formedness
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    bool good = line == kSweepHeader;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      std::vector<std::string> f;
      std::stringstream ls(line);
      for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
      good = good && f.size() == 6 && f[0] == j.param;
      if (f.size() == 6) {
        const double v = std::stod(f[4]);
        good = good && v >= 0.0 && v <= 1.0;
      }
    }
    good = good && rows == j.values.size() * 8;
    std::size_t lines = 0;
    for (std::size_t at = svg.find("<polyline"); at != std::string::npos; at = svg.find("<polyline", at + 1)) ++lines;
    good = good && svg.rfind("<svg", 0) == 0 && svg.ends_with("</svg>\n") && lines == 8;
    if (!good) o.info.push_back("malformed output for the " + j.dir + " sweep");
    ok = ok && good;
  }

  auto avg_of = [&](const std::string& dir, const std::string& setting) {
    std::istringstream in(csvs[dir]);
    std::string line;
    while (std::getline(in, line))
      if (line.find("," + setting + ",avg,") != std::string::npos) return std::stod(line.substr(line.rfind(',', line.rfind(',') - 1) + 1));
    return std::nan("");
  };
  for (const auto& v : grid)
    o.info.push_back("alpha=" + v + " avg accuracy " + fmt("%.4f", avg_of("alpha", v)) + "; beta=" + v + " " +
                     fmt("%.4f", avg_of("beta", v)));
  for (const char* v : {"ce", "kl", "l1", "mse"})
    o.info.push_back(std::string("dao=") + v + " avg accuracy " + fmt("%.4f", avg_of("dao", v)));
  o.info.push_back("recorded, not scored: alpha=beta=1 avg accuracy " + fmt("%.4f", avg_of("alpha_beta_1", "1")) +
                   " vs defaults " + fmt("%.4f", avg_of("alpha", "0.1")));
  const double secs = seconds_since(t0);
  o.pass = ok && secs < 1800.0;
  o.detail = "alpha and beta over {0,0.02,0.1,0.5,0.7,1}, dao over {ce,kl,l1,mse}: " +
             std::to_string(2 * grid.size() + 5) + " runs, CSV+SVG " + (ok ? "well-formed" : "MALFORMED") + ", " +
             fmt("%.0f", secs) + " s";
  return o;
}

// ---------------------------------------------------------------------------
// 9

Tensor union_find_smooth(const Tensor& mask, long min_region) {
  const long h = static_cast<long>(mask.shape()[0]), w = static_cast<long>(mask.shape()[1]);
  std::vector<long> parent(h * w);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<long(long)> find = [&](long x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
  for (long p = 0; p < h * w; ++p) {
    if (mask[p] == 0.0) continue;
    for (long q = p + 1; q < h * w; ++q)
      if (mask[q] != 0.0 && std::abs(p / w - q / w) <= 2 && std::abs(p % w - q % w) <= 2) parent[find(p)] = find(q);
  }
  std::map<long, long> size;
  for (long p = 0; p < h * w; ++p)
    if (mask[p] != 0.0) ++size[find(p)];
  Tensor out(mask.shape());
  for (long p = 0; p < h * w; ++p) out[p] = mask[p] != 0.0 && size[find(p)] >= min_region ? 1.0 : 0.0;
  return out;
}

Outcome segmentation_pipeline() {
  const auto t0 = std::chrono::steady_clock::now();
  SynthSpec spec;
  spec.task = TaskKind::segmentation;
  spec.sample_count = 1000;
  const auto train_set = generate(spec);
  spec.stream = 1;
  spec.sample_count = 250;
  const auto test_set = generate(spec);
  ShaSpecModel model(model_config_for(train_set, ModelConfig{}));
  auto tc = TrainConfig::defaults_for(TaskKind::segmentation);
  tc.log_interval = tc.iterations;
  train(model, train_set, tc);
  const double dice = evaluate_mask(model, test_set, ModalityMask::full(3));
  EvalOptions smooth;
  smooth.smooth = 4;
  const double dice_s = evaluate_mask(model, test_set, ModalityMask::full(3), smooth);

  std::mt19937_64 rng(2024);
  std::size_t mismatches = 0, grown = 0, unstable = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor m(Shape{16, 16});
    std::bernoulli_distribution on(0.02 + 0.4 * (trial % 20) / 20.0);
    for (auto& v : m.data()) v = on(rng) ? 1.0 : 0.0;
    const long min_region = 1 + trial % 8;
    const auto out = smoothness_enhance(m, min_region);
    if (!std::ranges::equal(out.data(), union_find_smooth(m, min_region).data())) ++mismatches;
    if (!std::ranges::equal(smoothness_enhance(out, min_region).data(), out.data())) ++unstable;
    for (std::size_t p = 0; p < m.size(); ++p)
      if (out[p] > m[p]) ++grown;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = dice >= 0.85 && mismatches == 0 && grown == 0 && unstable == 0 && secs < 600.0;
  o.detail = "full-modality test Dice " + fmt("%.4f", dice) + " (need >= 0.85), smoothed " + fmt("%.4f", dice_s) +
             "; smoothing on 1000 random masks: " + std::to_string(mismatches) + " oracle mismatches, " +
             std::to_string(unstable) + " non-idempotent, " + std::to_string(grown) + " added pixels; " +
             fmt("%.0f", secs) + " s";
  return o;
}

// ---------------------------------------------------------------------------
// 10

Outcome serialization(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data_dir = work / "det_data";
  gen_data({{"data.seed", "4"}}, data_dir);
  const auto data = load_split(data_dir, kTrainFile);

  // round trip
  ShaSpecModel model(model_config_for(data, ModelConfig{}));
  TrainConfig tc = TrainConfig::defaults_for(TaskKind::classification);
  tc.iterations = 400;
  tc.log_interval = 1;
  std::vector<LogRow> straight;
  {
    Trainer tr(model, data, tc);
    straight = tr.run();
    tr.save(work / "a.shsp");
  }
  const auto loaded = load_checkpoint(work / "a.shsp");
  bool values_exact = true;
  const auto orig = model.parameters();
  const auto back = loaded.model.parameters();
  for (std::size_t k = 0; k < orig.size(); ++k)
    for (std::size_t j = 0; j < orig[k]->value.size(); ++j)
      values_exact = values_exact && back[k]->value[j] == static_cast<double>(static_cast<float>(orig[k]->value[j]));
  const auto again = encode_checkpoint(loaded.model, loaded.optimizer, loaded.iteration, tc);
  const bool bytes_exact = std::string(again.begin(), again.end()) == slurp(work / "a.shsp");

  // resume from iteration 200
  double worst = 0.0;
  {
    ShaSpecModel first(model_config_for(data, ModelConfig{}));
    Trainer tr(first, data, tc);
    for (int k = 0; k < 200; ++k) tr.step();
    tr.save(work / "half.shsp");
    auto ck = load_checkpoint(work / "half.shsp");
    Trainer resumed(ck.model, data, tc);
    resumed.resume(ck.optimizer, ck.iteration);
    const auto tail = resumed.run();
    for (std::size_t k = 0; k < tail.size(); ++k) {
      const auto& a = straight[200 + k];
      for (auto [x, y] : {std::pair{a.task, tail[k].task}, {a.dao, tail[k].dao}, {a.dco, tail[k].dco},
                          {a.total, tail[k].total}})
        worst = std::max(worst, std::abs(x - y) / std::max(std::abs(x), 1e-12));
    }
  }

  // identical config + seed through the CLI layer
  std::string metrics[2], svgs[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = work / ("det_" + std::to_string(run));
    TrainRequest req;
    req.config = {{"train.iterations", "300"}, {"train.log_interval", "10"}, {"train.seed", "6"}};
    req.data = data_dir;
    req.out = out;
    train_command(req);
    metrics[run] = slurp(out / "metrics.csv");
    EvalRequest ev;
    ev.checkpoint = out / kCheckpointFile;
    ev.data = data_dir;
    svgs[run] = render_svg(eval_command(ev).to_csv());
  }
  const bool identical = metrics[0] == metrics[1] && svgs[0] == svgs[1];
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = values_exact && bytes_exact && worst <= 1e-5 && identical && secs < 300.0;
  o.detail = std::string("checkpoint values ") + (values_exact ? "bit-exact" : "DIFFER") + " at f32, re-encoded bytes " +
             (bytes_exact ? "identical" : "DIFFER") + "; resume max rel. loss deviation " + fmt("%.1e", worst) +
             " (need <= 1e-5); metrics CSV and SVG " + (identical ? "byte-identical" : "DIFFER") + "; " +
             fmt("%.0f", secs) + " s";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> expect_fail, only;
  std::optional<fs::path> workdir;
  app.add_option("--expect-fail", expect_fail, "Criteria known to fail; they do not affect the exit status")
      ->delimiter(',');
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--workdir", workdir, "Keep sweep and run artifacts here");
  CLI11_PARSE(app, argc, argv);

  const fs::path work =
      workdir ? *workdir : fs::temp_directory_path() / ("shaspec_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(work);

  std::optional<Study> study;
  auto get_study = [&]() -> const Study& {
    if (!study) study = run_classification_study();
    return *study;
  };

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient suite", [] { return gradient_suite(); }},
      {"imputation oracle", [] { return imputation_oracle(); }},
      {"omission rule", [] { return omission_rule(); }},
      {"residual fusion", [] { return residual_fusion(); }},
      {"missing-modality benefit", [&] { return missing_modality_benefit(get_study()); }},
      {"full >= missing monotonicity", [&] { return monotonicity(get_study()); }},
      {"ablation machinery", [&] { return ablation_machinery(work / "sweeps"); }},
      {"feature-space structure", [&] { return feature_structure(get_study()); }},
      {"segmentation pipeline", [] { return segmentation_pipeline(); }},
      {"serialization and determinism", [&] { return serialization(work); }},
  };
  const double budgets[] = {60, 5, 30, 5, 600, 600, 1800, 600, 600, 300};

  int unexpected = 0, passed = 0, ran = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    const double secs = seconds_since(t0);
    if (secs > budgets[k]) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", budgets[k]) + " s budget";
    }
    const bool expected_red = std::find(expect_fail.begin(), expect_fail.end(), id) != expect_fail.end();
    std::printf("criterion %2d %s  %s: %s (%.1f s)%s\n", id, o.pass ? "PASS" : "FAIL", criteria[k].first,
                o.detail.c_str(), secs, !o.pass && expected_red ? " [known failure]" : "");
    for (const auto& line : o.info) std::printf("             | %s\n", line.c_str());
    std::fflush(stdout);
    passed += o.pass;
    if (!o.pass && !expected_red) ++unexpected;
  }
  std::printf("%d of %d criteria pass\n", passed, ran);
  if (!workdir) fs::remove_all(work);
  return unexpected == 0 ? 0 : 1;
}
