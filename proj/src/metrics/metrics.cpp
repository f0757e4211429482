#include "shaspec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "shaspec/binary_io.hpp"

namespace shaspec {

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2) throw DimensionError("argmax_rows expects a matrix, got " + shape_to_string(scores.shape()));
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (scores[r * cols + c] > scores[r * cols + best]) best = c;
    out[r] = best;
  }
  return out;
}

double accuracy(const Tensor& scores, std::span<const std::uint32_t> labels) {
  if (labels.empty()) throw ValidationError("accuracy of an empty prediction set");
  const auto pred = argmax_rows(scores);
  if (pred.size() != labels.size()) throw DimensionError("accuracy: prediction and label counts differ");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < pred.size(); ++r) correct += pred[r] == labels[r];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double dice_score(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape())
    throw DimensionError("dice_score: shapes " + shape_to_string(pred.shape()) + " and " +
                         shape_to_string(truth.shape()) + " differ");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const bool a = pred[k] != 0.0, b = truth[k] != 0.0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

Tensor smoothness_enhance(const Tensor& mask, long min_region) {
  if (min_region < 1) throw ValidationError("min_region must be at least 1");
  if (mask.rank() != 2) throw DimensionError("smoothness_enhance expects an H x W map");
  const long h = static_cast<long>(mask.dim(0)), w = static_cast<long>(mask.dim(1));
  std::vector<int> component(mask.size(), -1);
  std::vector<std::size_t> sizes;
  std::vector<long> stack;
  for (long start = 0; start < h * w; ++start) {
    if (mask[start] == 0.0 || component[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    sizes.push_back(0);
    component[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const long at = stack.back();
      stack.pop_back();
      ++sizes[id];
      const long y = at / w, x = at % w;
      for (long dy = -2; dy <= 2; ++dy)
        for (long dx = -2; dx <= 2; ++dx) {
          const long ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
          const long n = ny * w + nx;
          if (mask[n] != 0.0 && component[n] < 0) {
            component[n] = id;
            stack.push_back(n);
          }
        }
    }
  }
  Tensor out = mask;
  for (std::size_t k = 0; k < out.size(); ++k)
    if (component[k] >= 0 && sizes[component[k]] < static_cast<std::size_t>(min_region)) out[k] = 0.0;
  return out;
}

double silhouette(const std::vector<std::vector<double>>& points, std::span<const std::size_t> labels) {
  if (points.size() != labels.size()) throw DimensionError("silhouette: point and label counts differ");
  std::map<std::size_t, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  if (counts.size() < 2) throw ValidationError("silhouette needs at least two labels");
  for (auto [l, c] : counts)
    if (c < 2) throw ValidationError("silhouette needs at least two points per label");
  std::vector<std::size_t> index;
  for (auto [l, c] : counts) index.push_back(l);
  auto slot = [&](std::size_t l) {
    return static_cast<std::size_t>(std::lower_bound(index.begin(), index.end(), l) - index.begin());
  };

  const std::size_t n = points.size();
  double total = 0.0;
  std::vector<double> sums(index.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < points[i].size(); ++k) {
        const double diff = points[i][k] - points[j][k];
        d += diff * diff;
      }
      sums[slot(labels[j])] += std::sqrt(d);
    }
    const std::size_t own = slot(labels[i]);
    const double a = sums[own] / static_cast<double>(counts[labels[i]] - 1);
    double b = INFINITY;
    for (std::size_t c = 0; c < index.size(); ++c)
      if (c != own) b = std::min(b, sums[c] / static_cast<double>(counts[index[c]]));
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------

std::string metric_name(TaskKind task, const EvalOptions& opts) {
  if (task == TaskKind::classification) return "accuracy";
  return opts.smooth ? "dice_smoothed" : "dice";
}

double evaluate_mask(ShaSpecModel& model, const Dataset& data, const ModalityMask& mask, const EvalOptions& opts) {
  if (mask.size() != model.modality_count()) throw DimensionError("mask size does not match the model");
  if (opts.batch_size == 0) throw ValidationError("batch_size must be positive");
  std::vector<std::size_t> usable;
  for (std::size_t j = 0; j < data.size(); ++j) {
    bool ok = true;
    for (std::size_t i = 0; i < mask.size(); ++i) ok = ok && (!mask[i] || data.samples[j].mask[i]);
    if (ok) usable.push_back(j);
  }
  if (usable.empty()) throw ValidationError("no evaluation sample provides modalities " + mask.bits());

  double score = 0.0;
  for (std::size_t start = 0; start < usable.size(); start += opts.batch_size) {
    const std::size_t end = std::min(usable.size(), start + opts.batch_size);
    const std::span<const std::size_t> idx(usable.data() + start, end - start);
    const auto batch = Batch::from_dataset(data, idx, mask);
    Tape tape;
    const Tensor out = model.forward(tape, batch, {}).prediction.value();
    if (model.task() == TaskKind::classification) {
      const auto pred = argmax_rows(out);
      for (std::size_t r = 0; r < pred.size(); ++r) score += pred[r] == batch.class_labels[r];
      continue;
    }
    const std::size_t k = out.dim(1), h = out.dim(2), w = out.dim(3);
    for (std::size_t b = 0; b < batch.size; ++b) {
      Tensor pred(Shape{h, w}), truth(Shape{h, w});
      for (std::size_t p = 0; p < h * w; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
          if (out[(b * k + c) * h * w + p] > out[(b * k + best) * h * w + p]) best = c;
        pred[p] = best != 0 ? 1.0 : 0.0;
        truth[p] = (*batch.segmentation_labels)[b * h * w + p] != 0.0 ? 1.0 : 0.0;
      }
      if (opts.smooth) pred = smoothness_enhance(pred, *opts.smooth);
      score += dice_score(pred, truth);
    }
  }
  return score / static_cast<double>(usable.size());
}

EvalReport eval_subsets(ShaSpecModel& model, const Dataset& data, const std::vector<ModalityMask>& masks,
                        const EvalOptions& opts) {
  EvalReport report;
  const auto metric = metric_name(model.task(), opts);
  double sum = 0.0;
  for (const auto& m : masks) {
    report.rows.push_back({m.bits(), metric, evaluate_mask(model, data, m, opts), opts.seed});
    sum += report.rows.back().value;
  }
  if (!masks.empty()) report.aggregate.push_back({"avg", metric, sum / static_cast<double>(masks.size()), opts.seed});
  return report;
}

EvalReport eval_all_subsets(ShaSpecModel& model, const Dataset& data, const EvalOptions& opts) {
  return eval_subsets(model, data, ModalityMask::all_nonempty(model.modality_count()), opts);
}

std::string EvalReport::to_csv() const {
  std::string out = "mask,metric,value,seed\n";
  char buf[48];
  for (const auto* group : {&rows, &aggregate})
    for (const auto& r : *group) {
      std::snprintf(buf, sizeof buf, "%.9g", r.value);
      out += r.mask + "," + r.metric + "," + buf + "," + std::to_string(r.seed) + "\n";
    }
  return out;
}

// ---------------------------------------------------------------------------

FeatureSet collect_features(ShaSpecModel& model, const Dataset& data, std::size_t max_samples) {
  FeatureSet out;
  const std::size_t count = max_samples ? std::min(max_samples, data.size()) : data.size();
  for (std::size_t j = 0; j < count; ++j) {
    const auto& sample = data.samples[j];
    const ModalitySample* ptr = &sample;
    const auto batch = Batch::from_samples(std::span<const ModalitySample* const>(&ptr, 1), sample.mask);
    Tape tape;
    const auto bundle = model.encode(tape, batch);
    for (auto i : sample.mask.available_indices()) {
      const Tensor r = model.pool(*bundle.shared[i]).value();
      const Tensor s = model.pool(*bundle.specific[i]).value();
      out.shared.emplace_back(r.data().begin(), r.data().end());
      out.specific.emplace_back(s.data().begin(), s.data().end());
      out.modality.push_back(i);
      out.sample.push_back(j);
    }
  }
  return out;
}

FeatureStats feature_silhouettes(ShaSpecModel& model, const Dataset& data, std::size_t max_samples) {
  const auto f = collect_features(model, data, max_samples);
  return {silhouette(f.shared, f.modality), silhouette(f.specific, f.modality)};
}

std::string embeddings_csv(ShaSpecModel& model, const Dataset& data) {
  const auto f = collect_features(model, data);
  std::string out = "kind,modality,sample";
  for (std::size_t d = 0; d < model.pooled_dim(); ++d) out += ",dim" + std::to_string(d);
  out += "\n";
  char buf[48];
  for (std::size_t k = 0; k < f.modality.size(); ++k) {
    for (const auto* kind : {"shared", "specific"}) {
      const auto& v = std::string(kind) == "shared" ? f.shared[k] : f.specific[k];
      out += std::string(kind) + "," + std::to_string(f.modality[k] + 1) + "," + std::to_string(f.sample[k]);
      for (double x : v) {
        std::snprintf(buf, sizeof buf, ",%.9g", x);
        out += buf;
      }
      out += "\n";
    }
  }
  return out;
}

void export_embeddings(ShaSpecModel& model, const Dataset& data, const std::filesystem::path& path) {
  const auto text = embeddings_csv(model, data);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace shaspec
