#include "commands.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "shaspec/binary_io.hpp"
#include "shaspec/objectives.hpp"
#include "shaspec/rng.hpp"
#include "shaspec/synth.hpp"

namespace shaspec::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto at = s.find(sep, start);
    out.push_back(trim(s.substr(start, at - start)));
    if (at == std::string::npos) break;
    start = at + 1;
  }
  return out;
}

double parse_number(const std::string& what, const std::string& text) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end || text.empty() || !std::isfinite(v))
    throw ConfigError("invalid " + what + " '" + text + "'");
  return v;
}

std::uint64_t parse_count(const std::string& what, const std::string& text) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end || text.empty()) throw ConfigError("invalid " + what + " '" + text + "'");
  return v;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out.flush()) throw IoError("write failed for '" + path.string() + "'");
}

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string f2(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return std::string(buf) == "-0.00" ? "0.00" : buf;
}

std::pair<std::size_t, std::size_t> split_sizes(const KeyValues& kv, TaskKind task) {
  std::size_t train = task == TaskKind::classification ? 2000 : 1000;
  std::size_t test = task == TaskKind::classification ? 500 : 250;
  if (auto it = kv.find("data.train_samples"); it != kv.end()) train = parse_count("data.train_samples", it->second);
  if (auto it = kv.find("data.test_samples"); it != kv.end()) test = parse_count("data.test_samples", it->second);
  if (train == 0 || test == 0) throw ConfigError("data.train_samples and data.test_samples must be positive");
  return {train, test};
}

EvalOptions eval_options(const KeyValues& kv, TaskKind task, std::uint64_t seed) {
  EvalOptions o;
  o.seed = seed;
  if (auto it = kv.find("eval.smooth"); it != kv.end() && task == TaskKind::segmentation) {
    const auto v = parse_count("eval.smooth", it->second);
    if (v == 0) throw ConfigError("eval.smooth must be at least 1");
    o.smooth = static_cast<long>(v);
  }
  return o;
}

}  // namespace

int exit_code_for(const std::exception_ptr& error) {
  try {
    std::rethrow_exception(error);
  } catch (const VerificationFailure&) {
    return kVerification;
  } catch (const NumericalError&) {
    return kNumerical;
  } catch (const FormatError&) {
    return kIo;
  } catch (const IoError&) {
    return kIo;
  } catch (const fs::filesystem_error&) {
    return kIo;
  } catch (const ValidationError&) {
    return kConfig;
  } catch (const DimensionError&) {
    return kConfig;
  } catch (...) {
    return kInternal;
  }
}

KeyValues load_run_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  KeyValues kv;
  if (file) {
    std::ifstream in(*file, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file '" + file->string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    kv = parse_config_text(ss.str(), file->string());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    const auto key = trim(o.substr(0, eq));
    if (!is_known_key(key)) throw ConfigError("unknown key '" + key + "'");
    kv[key] = trim(o.substr(eq + 1));
  }
  return kv;
}

void write_resolved(const fs::path& dir, const KeyValues& kv) {
  fs::create_directories(dir);
  write_text(dir / kResolvedFile, format_config_text(kv));
}

// ---------------------------------------------------------------------------

GenDataResult gen_data(const KeyValues& config, const fs::path& out) {
  GenDataResult r;
  apply_config(config, r.spec);
  std::tie(r.train_count, r.test_count) = split_sizes(config, r.spec.task);
  r.spec.validate();

  fs::create_directories(out);
  SynthSpec spec = r.spec;
  spec.stream = 0;
  spec.sample_count = r.train_count;
  write_dataset(generate(spec), out / kTrainFile);
  spec.stream = 1;
  spec.sample_count = r.test_count;
  write_dataset(generate(spec), out / kTestFile);

  auto resolved = to_key_values(r.spec);
  resolved["data.train_samples"] = std::to_string(r.train_count);
  resolved["data.test_samples"] = std::to_string(r.test_count);
  write_resolved(out, resolved);

  std::ostringstream m;
  m << "# synthetic dataset\n"
    << "task = " << task_kind_name(r.spec.task) << "\n"
    << "modalities = " << r.spec.modality_count << "\n"
    << "seed = " << r.spec.seed << "\n"
    << "train.file = " << kTrainFile << "\n"
    << "train.samples = " << r.train_count << "\n"
    << "test.file = " << kTestFile << "\n"
    << "test.samples = " << r.test_count << "\n";
  write_text(out / "manifest.txt", m.str());
  return r;
}

Dataset load_split(const fs::path& path, const char* file) {
  return read_dataset(fs::is_directory(path) ? path / file : path);
}

// ---------------------------------------------------------------------------

ResolvedRun resolve_run(const KeyValues& kv, const Dataset& data, const std::optional<std::string>& dedicated_mask) {
  if (auto it = kv.find("model.task"); it != kv.end() && parse_task_kind(it->second) != data.task)
    throw ConfigError("model.task = " + it->second + " does not match the dataset");
  if (auto it = kv.find("model.modalities");
      it != kv.end() && parse_count("model.modalities", it->second) != data.modality_count)
    throw ConfigError("model.modalities = " + it->second + " does not match the dataset");

  ResolvedRun r;
  apply_config(kv, r.model);
  r.model = model_config_for(data, r.model);
  r.model.validate();
  r.train = TrainConfig::defaults_for(data.task);
  apply_config(kv, r.train);
  if (dedicated_mask) {
    ModalityMask m = ModalityMask::full(1);
    try {
      m = ModalityMask::from_bits(*dedicated_mask);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("--dedicated-mask: ") + e.what());
    }
    if (m.size() != data.modality_count)
      throw ConfigError("--dedicated-mask " + *dedicated_mask + " needs " + std::to_string(data.modality_count) +
                        " bits");
    r.train.availability = AvailabilityPolicy::fixed(m);
  }
  r.train.validate();
  r.train.availability.validate(data.modality_count);
  return r;
}

std::vector<LogRow> train_command(const TrainRequest& req) {
  const auto data = load_split(req.data, kTrainFile);
  auto run = resolve_run(req.config, data, req.dedicated_mask);
  run.train.output_dir = req.out;
  ShaSpecModel model(run.model);
  KeyValues resolved = to_key_values(model.config());
  resolved.merge(to_key_values(run.train));
  write_resolved(req.out, resolved);

  if (req.resume) {
    auto ck = load_checkpoint(req.out / kCheckpointFile);
    if (ck.config != resolved)
      throw ConfigError("checkpoint in '" + req.out.string() + "' was trained with a different configuration");
    Trainer t(ck.model, data, run.train);
    t.resume(ck.optimizer, ck.iteration);
    return t.run(req.on_log);
  }
  Trainer t(model, data, run.train);
  return t.run(req.on_log);
}

// ---------------------------------------------------------------------------

std::vector<ModalityMask> parse_subsets(const std::string& spec, std::size_t n) {
  if (spec == "all") return ModalityMask::all_nonempty(n);
  std::vector<ModalityMask> out;
  for (const auto& bits : split(spec, ',')) {
    ModalityMask m = ModalityMask::full(1);
    try {
      m = ModalityMask::from_bits(bits);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("--subsets: ") + e.what());
    }
    if (m.size() != n) throw ConfigError("--subsets: '" + bits + "' needs " + std::to_string(n) + " bits");
    if (m.count() == 0) throw ConfigError("--subsets: the empty mask cannot be evaluated");
    out.push_back(m);
  }
  return out;
}

std::string features_csv(const FeatureStats& s) {
  return "features,silhouette\nshared," + g9(s.shared) + "\nspecific," + g9(s.specific) + "\n";
}

EvalReport eval_command(const EvalRequest& req) {
  auto ck = load_checkpoint(req.checkpoint);
  const auto data = load_split(req.data, kTestFile);
  if (data.task != ck.model.task() || data.modality_count != ck.model.modality_count())
    throw ConfigError("dataset does not match the checkpoint");
  const auto masks = parse_subsets(req.subsets, data.modality_count);

  KeyValues kv;
  if (req.smooth) {
    if (*req.smooth < 1) throw ConfigError("--smooth must be at least 1");
    kv["eval.smooth"] = std::to_string(*req.smooth);
  }
  std::uint64_t seed = 0;
  if (auto it = ck.config.find("train.seed"); it != ck.config.end()) seed = parse_count("train.seed", it->second);
  const auto report = eval_subsets(ck.model, data, masks, eval_options(kv, data.task, seed));

  if (req.features) write_text(*req.features, features_csv(feature_silhouettes(ck.model, data)));
  if (req.embeddings) export_embeddings(ck.model, data, *req.embeddings);
  return report;
}

// ---------------------------------------------------------------------------

unsigned threads_from_env() {
  const char* v = std::getenv("SHASPEC_THREADS");
  if (!v || !*v) return 1;
  const auto n = parse_count("SHASPEC_THREADS", v);
  if (n == 0) throw ConfigError("SHASPEC_THREADS must be at least 1");
  return static_cast<unsigned>(n);
}

KeyValues sweep_overrides(const std::string& param, const std::string& value, std::size_t n) {
  if (param == "alpha" || param == "beta") {
    const double w = parse_number(param + " value", value);
    if (w < 0.0) throw ConfigError(param + " values must be non-negative, got " + value);
    return {{"train." + param, value}};
  }
  if (param == "dao") {
    try {
      DaoVariant::parse(value);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("dao value: ") + e.what());
    }
    return {{"model.dao", value}};
  }
  if (param == "audio_rate") {
    const double r = parse_number("audio_rate value", value);
    if (r < 0.0 || r > 1.0) throw ConfigError("audio_rate values must lie in [0, 1], got " + value);
    if (n < 2) throw ConfigError("audio_rate needs at least two modalities");
    std::string rates;
    for (std::size_t i = 0; i < n; ++i) rates += (i ? "," : "") + (i == 1 ? value : std::string("1"));
    return {{"train.availability", "per_modality_rate"}, {"train.rates", rates}};
  }
  throw ConfigError("unknown sweep parameter '" + param + "' (expected alpha, beta, dao or audio_rate)");
}

std::string sweep_command(const SweepRequest& req) {
  if (req.values.empty()) throw ConfigError("empty value list");
  const auto train_set = load_split(req.data, kTrainFile);
  const auto test_set = load_split(req.data, kTestFile);

  std::vector<KeyValues> configs;
  for (const auto& v : req.values) {
    if (v.empty()) throw ConfigError("empty entry in the value list");
    KeyValues kv = req.config;
    for (auto& [k, val] : sweep_overrides(req.param, v, train_set.modality_count)) kv[k] = val;
    configs.push_back(std::move(kv));
  }
  const auto subsets = req.config.count("eval.subsets") ? req.config.at("eval.subsets") : std::string("all");
  const auto masks = parse_subsets(subsets, train_set.modality_count);
  // Resolve everything up front so a bad setting fails before any training.
  std::vector<ResolvedRun> runs;
  for (const auto& kv : configs) runs.push_back(resolve_run(kv, train_set, std::nullopt));

  fs::create_directories(req.out);
  std::vector<std::string> parts(runs.size());
  std::vector<std::exception_ptr> errors(runs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < runs.size(); k = next++) {
      try {
        auto run = runs[k];
        std::string dir = req.param + "_" + req.values[k];
        for (auto& c : dir)
          if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' && c != '_') c = '_';
        run.train.output_dir = req.out / dir;
        ShaSpecModel model(run.model);
        KeyValues resolved = to_key_values(model.config());
        resolved.merge(to_key_values(run.train));
        write_resolved(run.train.output_dir, resolved);
        Trainer(model, train_set, run.train).run();
        const auto report =
            eval_subsets(model, test_set, masks, eval_options(configs[k], test_set.task, run.train.seed));
        write_text(run.train.output_dir / "eval.csv", report.to_csv());
        std::string rows;
        for (const auto* list : {&report.rows, &report.aggregate})
          for (const auto& r : *list)
            rows += req.param + "," + req.values[k] + "," + r.mask + "," + r.metric + "," + g9(r.value) + "," +
                    std::to_string(r.seed) + "\n";
        parts[k] = std::move(rows);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(req.threads, static_cast<unsigned>(runs.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::string csv = std::string(kSweepHeader) + "\n";
  for (const auto& p : parts) csv += p;
  write_text(req.out / "sweep.csv", csv);
  return csv;
}

// ---------------------------------------------------------------------------

namespace {

struct Record {
  std::string group;   // bar group or x position
  std::string series;  // legend entry
  double value = 0.0;
};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

template <class T>
std::size_t index_of(std::vector<T>& v, const T& x) {
  auto it = std::find(v.begin(), v.end(), x);
  if (it != v.end()) return static_cast<std::size_t>(it - v.begin());
  v.push_back(x);
  return v.size() - 1;
}

double nice_ceiling(double v) {
  if (v <= 1.0) return 1.0;
  const double mag = std::pow(10.0, std::floor(std::log10(v)));
  for (double step : {1.0, 2.0, 5.0, 10.0})
    if (step * mag >= v) return step * mag;
  return 10.0 * mag;
}

constexpr const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                    "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};

}  // namespace

std::string render_svg(const std::string& csv) {
  std::istringstream in(csv);
  std::string header;
  if (!std::getline(in, header)) throw ConfigError("no data rows");
  header = trim(header);
  const bool sweep = header == kSweepHeader;
  if (!sweep && header != "mask,metric,value,seed")
    throw ConfigError("unrecognised CSV header '" + header + "'");
  const std::size_t columns = sweep ? 6 : 4;

  struct Row {
    std::string param, setting, mask, metric, seed;
    double value;
  };
  std::vector<Row> rows;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != columns)
      throw ConfigError("line " + std::to_string(line_no) + ": expected " + std::to_string(columns) + " fields");
    Row r;
    const std::size_t o = sweep ? 2 : 0;
    if (sweep) {
      r.param = f[0];
      r.setting = f[1];
    }
    r.mask = f[o];
    r.metric = f[o + 1];
    r.value = parse_number("value on line " + std::to_string(line_no), f[o + 2]);
    r.seed = f[o + 3];
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ConfigError("no data rows");

  std::vector<std::string> params, seeds, metrics;
  for (const auto& r : rows) {
    index_of(params, r.param);
    index_of(seeds, r.seed);
    index_of(metrics, r.metric);
  }
  std::vector<Record> recs;
  for (const auto& r : rows) {
    Record rec;
    rec.value = r.value;
    std::string suffix = seeds.size() > 1 ? " seed " + r.seed : "";
    if (sweep) {
      rec.group = params.size() > 1 ? r.param + "=" + r.setting : r.setting;
      rec.series = r.mask + (metrics.size() > 1 ? " " + r.metric : "") + suffix;
    } else {
      rec.group = r.mask;
      rec.series = r.metric + suffix;
    }
    recs.push_back(std::move(rec));
  }
  std::vector<std::string> groups, series;
  for (const auto& r : recs) {
    index_of(groups, r.group);
    index_of(series, r.series);
  }

  double lo = 0.0, hi = 0.0;
  for (const auto& r : recs) {
    lo = std::min(lo, r.value);
    hi = std::max(hi, r.value);
  }
  hi = nice_ceiling(hi);
  lo = lo < 0.0 ? -nice_ceiling(-lo) : 0.0;

  const double width = 760, height = 420, left = 64, right = 180, top = 48, bottom = 72;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  auto ypos = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f2(width) << "\" height=\"" << f2(height)
    << "\" viewBox=\"0 0 " << f2(width) << " " << f2(height) << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const std::string title = sweep ? "Sweep over " + (params.size() == 1 ? params[0] : std::string("parameters"))
                                  : "Evaluation by modality subset";
  s << "<text x=\"" << f2(left) << "\" y=\"24\" font-size=\"16\">" << xml_escape(title) << "</text>\n";

  for (int t = 0; t <= 5; ++t) {
    const double v = lo + (hi - lo) * t / 5.0;
    const double y = ypos(v);
    s << "<line x1=\"" << f2(left) << "\" y1=\"" << f2(y) << "\" x2=\"" << f2(left + plot_w) << "\" y2=\"" << f2(y)
      << "\" stroke=\"#dddddd\"/>\n";
    s << "<text x=\"" << f2(left - 6) << "\" y=\"" << f2(y + 4) << "\" text-anchor=\"end\">" << f2(v) << "</text>\n";
  }
  s << "<line x1=\"" << f2(left) << "\" y1=\"" << f2(top) << "\" x2=\"" << f2(left) << "\" y2=\""
    << f2(top + plot_h) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << f2(left) << "\" y1=\"" << f2(ypos(0.0)) << "\" x2=\"" << f2(left + plot_w) << "\" y2=\""
    << f2(ypos(0.0)) << "\" stroke=\"black\"/>\n";

  const double slot = plot_w / static_cast<double>(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double cx = left + slot * (g + 0.5);
    s << "<text class=\"group\" x=\"" << f2(cx) << "\" y=\"" << f2(top + plot_h + 18)
      << "\" text-anchor=\"middle\">" << xml_escape(groups[g]) << "</text>\n";
  }

  if (!sweep) {
    const double bar = slot * 0.8 / static_cast<double>(series.size());
    for (const auto& r : recs) {
      const auto g = index_of(groups, r.group), k = index_of(series, r.series);
      const double x = left + slot * g + slot * 0.1 + bar * k;
      const double y0 = ypos(std::max(r.value, 0.0)), y1 = ypos(std::min(r.value, 0.0));
      s << "<rect class=\"bar\" x=\"" << f2(x) << "\" y=\"" << f2(y0) << "\" width=\"" << f2(bar) << "\" height=\""
        << f2(y1 - y0) << "\" fill=\"" << kPalette[k % 10] << "\"><title>" << xml_escape(r.group + " " + r.series)
        << " = " << g9(r.value) << "</title></rect>\n";
    }
  } else {
    for (std::size_t k = 0; k < series.size(); ++k) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& r : recs)
        if (r.series == series[k]) pts.emplace_back(left + slot * (index_of(groups, r.group) + 0.5), ypos(r.value));
      std::string path;
      for (const auto& [x, y] : pts) path += (path.empty() ? "" : " ") + f2(x) + "," + f2(y);
      s << "<polyline class=\"series\" fill=\"none\" stroke=\"" << kPalette[k % 10] << "\" stroke-width=\"2\" points=\""
        << path << "\"/>\n";
      for (const auto& [x, y] : pts)
        s << "<circle cx=\"" << f2(x) << "\" cy=\"" << f2(y) << "\" r=\"3\" fill=\"" << kPalette[k % 10] << "\"/>\n";
    }
  }

  for (std::size_t k = 0; k < series.size(); ++k) {
    const double y = top + 16.0 * k;
    s << "<rect x=\"" << f2(width - right + 16) << "\" y=\"" << f2(y) << "\" width=\"10\" height=\"10\" fill=\""
      << kPalette[k % 10] << "\"/>\n";
    s << "<text x=\"" << f2(width - right + 32) << "\" y=\"" << f2(y + 9) << "\">" << xml_escape(series[k])
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------------------

namespace {

struct GradCase {
  ModelConfig config;
  Batch batch;
  ModalityMask mask = ModalityMask::full(1);
  std::uint64_t dropout_seed = 0;
  std::string label;
};

Batch random_batch(const ModelConfig& c, const ModalityMask& mask, std::size_t b, Rng& rng) {
  Batch batch;
  batch.mask = mask;
  batch.size = b;
  batch.inputs.resize(c.modality_count);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t i = 0; i < c.modality_count; ++i) {
    if (!mask[i]) continue;
    Shape s{b};
    s.insert(s.end(), c.input_shapes[i].begin(), c.input_shapes[i].end());
    Tensor t(s);
    for (auto& v : t.data()) v = u(rng);
    batch.inputs[i] = std::move(t);
  }
  std::uniform_int_distribution<std::uint32_t> label(0, static_cast<std::uint32_t>(c.class_count - 1));
  if (c.task == TaskKind::classification) {
    for (std::size_t k = 0; k < b; ++k) batch.class_labels.push_back(label(rng));
  } else {
    Tensor y(Shape{b, c.input_shapes[0][1], c.input_shapes[0][2]});
    for (auto& v : y.data()) v = label(rng);
    batch.segmentation_labels = std::move(y);
  }
  return batch;
}

double loss_value(ShaSpecModel& model, const GradCase& gc, const LossWeights& w, bool backward) {
  Tape tape;
  const auto result = model.forward(tape, gc.batch, {true, gc.dropout_seed});
  const auto terms = total_loss(tape, model, result, gc.batch, w, gc.config.dao);
  if (backward) tape.backward(terms.total);
  return terms.total.value().item();
}

}  // namespace

GradCheckReport grad_check(const GradCheckRequest& req) {
  if (!(req.tol > 0.0)) throw ConfigError("--tol must be positive");
  if (req.seeds == 0) throw ConfigError("--seeds must be at least 1");
  GradCheckReport report;
  const LossWeights weights;
  constexpr double h = 1e-5;
  for (std::uint64_t seed = req.seed; seed < req.seed + req.seeds; ++seed) {
    for (TaskKind task : {TaskKind::classification, TaskKind::segmentation}) {
      for (const char* dao : {"ce", "kl", "l1", "mse"}) {
        for (int missing = 0; missing < 2; ++missing) {
          Rng rng(derive_seed(seed, static_cast<std::uint64_t>(task) * 16 + missing, 0x67726164));
          GradCase gc;
          auto& c = gc.config;
          c.task = task;
          c.modality_count = 3;
          c.activation = Activation::tanh;
          c.dao = DaoVariant::parse(dao);
          c.kl_projection_dim = 3;
          c.seed = rng();
          if (task == TaskKind::classification) {
            c.input_shapes = {Shape{5}, Shape{4}, Shape{6}};
            c.class_count = 3;
            c.stem_size = 5;
            c.encoder_hidden = 6;
            c.feature_dim = 4;
            c.decoder_hidden = 6;
            c.dropout = 0.5;
          } else {
            c.input_shapes.assign(3, Shape{1, 4, 4});
            c.class_count = 2;
            c.channels1 = 2;
            c.channels2 = 3;
          }
          if (missing) {
            std::vector<bool> bits(3);
            do {
              for (std::size_t i = 0; i < 3; ++i) bits[i] = rng() & 1;
            } while (std::count(bits.begin(), bits.end(), true) == 0 || std::count(bits.begin(), bits.end(), true) == 3);
            gc.mask = ModalityMask(bits);
          } else {
            gc.mask = ModalityMask::full(3);
          }
          gc.batch = random_batch(c, gc.mask, task == TaskKind::classification ? 4 : 2, rng);
          gc.dropout_seed = rng();
          gc.label = std::string(task_kind_name(task)) + "/" + dao + "/" + gc.mask.bits() + "/seed " +
                     std::to_string(seed);

          ShaSpecModel model(c);
          model.zero_grad();
          {
            fault::ScopedCorruption corrupt(req.corrupt);
            loss_value(model, gc, weights, true);
          }
          GradCheckCase result{gc.label, 0.0, ""};
          for (auto* p : model.parameters()) {
            for (std::size_t j = 0; j < p->value.size(); ++j) {
              const double orig = p->value[j];
              p->value[j] = orig + h;
              const double up = loss_value(model, gc, weights, false);
              p->value[j] = orig - h;
              const double down = loss_value(model, gc, weights, false);
              p->value[j] = orig;
              const double numeric = (up - down) / (2.0 * h);
              const double analytic = p->grad[j];
              const double err =
                  std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
              if (result.worst_param.empty() || err > result.worst) {
                result.worst = err;
                result.worst_param = p->name;
              }
            }
            ++report.parameters_checked;
          }
          if (result.worst > report.worst || report.worst_case.empty()) {
            report.worst = result.worst;
            report.worst_param = result.worst_param;
            report.worst_case = result.label;
          }
          report.cases.push_back(std::move(result));
        }
      }
    }
  }
  return report;
}

}  // namespace shaspec::cli
