#include "shaspec/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "shaspec/fault.hpp"

namespace shaspec::ops {

namespace {

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
}

void require_rank(const char* op, const Var& a, std::size_t rank) {
  if (a.value().rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(a.shape()));
}

double corruption(fault::Rule rule) { return fault::is_corrupted(rule) ? fault::kCorruptionFactor : 1.0; }

// Accumulates `factor * src` into the gradient of v when v needs one.
void accumulate(Tape& t, const Var& v, const Tensor& src, double factor = 1.0) {
  if (!t.needs_grad(v)) return;
  auto& g = t.grad_of(v);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * src[i];
}

struct Dims4 {
  std::size_t b, c, h, w;
  std::size_t plane() const { return h * w; }
};

Dims4 dims4(const char* op, const Var& x) {
  require_rank(op, x, 4);
  const auto& s = x.shape();
  return {s[0], s[1], s[2], s[3]};
}

}  // namespace

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  Tensor out(Shape{m, n});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g, const Tensor&) {
    const double f = corruption(fault::Rule::matmul);
    const auto& av = t.value_of(a.id());
    const auto& bv = t.value_of(b.id());
    if (t.needs_grad(a)) {
      auto& ga = t.grad_of(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += f * acc;
        }
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_of(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = f * av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    accumulate(t, a, g);
    accumulate(t, b, g, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    const auto& av = t.value_of(a.id());
    const auto& bv = t.value_of(b.id());
    if (t.needs_grad(a)) {
      auto& ga = t.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var div(Var a, Var b) {
  require_same_shape("div", a, b);
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return a.tape().record("div", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor& out) {
    const auto& bv = t.value_of(b.id());
    if (t.needs_grad(a)) {
      auto& ga = t.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * out[i] / bv[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape().record("scale", std::move(out), {a},
                         [a, factor](Tape& t, const Tensor& g, const Tensor&) { accumulate(t, a, g, factor); });
}

Var mul_const(Var a, const Tensor& c) {
  if (a.shape() != c.shape())
    throw DimensionError("mul_const: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(c.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return a.tape().record("mul_const", std::move(out), {a}, [a, c](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.needs_grad(a)) return;
    auto& ga = t.grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
  });
}

Var add_row_bias(Var a, Var bias) {
  require_rank("add_row_bias", a, 2);
  require_rank("add_row_bias", bias, 1);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (bias.shape()[0] != n)
    throw DimensionError("add_row_bias: bias " + shape_to_string(bias.shape()) + " for " +
                         shape_to_string(a.shape()));
  Tensor out = a.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return a.tape().record("add_row_bias", std::move(out), {a, bias}, [a, bias, m, n](Tape& t, const Tensor& g, const Tensor&) {
    accumulate(t, a, g);
    if (!t.needs_grad(bias)) return;
    auto& gb = t.grad_of(bias);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
  });
}

Var add_channel_bias(Var a, Var bias) {
  const auto d = dims4("add_channel_bias", a);
  require_rank("add_channel_bias", bias, 1);
  if (bias.shape()[0] != d.c)
    throw DimensionError("add_channel_bias: bias " + shape_to_string(bias.shape()) + " for " +
                         shape_to_string(a.shape()));
  Tensor out = a.value();
  const auto& bv = bias.value();
  const std::size_t plane = d.plane();
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      double* p = &out[(b * d.c + c) * plane];
      for (std::size_t i = 0; i < plane; ++i) p[i] += bv[c];
    }
  return a.tape().record("add_channel_bias", std::move(out), {a, bias}, [a, bias, d](Tape& t, const Tensor& g, const Tensor&) {
    accumulate(t, a, g);
    if (!t.needs_grad(bias)) return;
    auto& gb = t.grad_of(bias);
    const std::size_t plane = d.plane();
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t c = 0; c < d.c; ++c) {
        const double* p = &g[(b * d.c + c) * plane];
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        gb[c] += acc;
      }
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape().record("relu", std::move(out), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.needs_grad(a)) return;
    const auto& av = t.value_of(a.id());
    auto& ga = t.grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > 0.0) ga[i] += g[i];
  });
}

Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return a.tape().record("tanh", std::move(out), {a}, [a](Tape& t, const Tensor& g, const Tensor& y) {
    if (!t.needs_grad(a)) return;
    const double f = corruption(fault::Rule::tanh);
    auto& ga = t.grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += f * g[i] * (1.0 - y[i] * y[i]);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record("sum", Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.needs_grad(a)) return;
    auto& ga = t.grad_of(a);
    for (auto& v : ga.data()) v += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record("mean", Tensor::scalar(s / n), {a}, [a, n](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.needs_grad(a)) return;
    auto& ga = t.grad_of(a);
    for (auto& v : ga.data()) v += g[0] / n;
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record("reshape", std::move(out), {a}, [a](Tape& t, const Tensor& g, const Tensor&) { accumulate(t, a, g); });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts.front().shape().at(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.shape()[0] != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  Tensor out(Shape{m, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&v[i * widths[k]], widths[k], &out[i * total + offset]);
    offset += widths[k];
  }
  return parts.front().tape().record(
      "concat_cols", std::move(out), parts, [parts, widths, m, total](Tape& t, const Tensor& g, const Tensor&) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (t.needs_grad(parts[k])) {
            auto& gp = t.grad_of(parts[k]);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + offset + j];
          }
          offset += widths[k];
        }
      });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  const auto d0 = dims4("concat_channels", parts.front());
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto d = dims4("concat_channels", p);
    if (d.b != d0.b || d.h != d0.h || d.w != d0.w) throw DimensionError("concat_channels: batch or spatial dims differ");
    chans.push_back(d.c);
    total += d.c;
  }
  const std::size_t plane = d0.plane();
  Tensor out(Shape{d0.b, total, d0.h, d0.w});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t b = 0; b < d0.b; ++b)
      std::copy_n(&v[b * chans[k] * plane], chans[k] * plane, &out[(b * total + offset) * plane]);
    offset += chans[k];
  }
  return parts.front().tape().record(
      "concat_channels", std::move(out), parts, [parts, chans, total, plane, d0](Tape& t, const Tensor& g, const Tensor&) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (t.needs_grad(parts[k])) {
            auto& gp = t.grad_of(parts[k]);
            const std::size_t span = chans[k] * plane;
            for (std::size_t b = 0; b < d0.b; ++b) {
              const double* src = &g[(b * total + offset) * plane];
              double* dst = &gp[b * span];
              for (std::size_t i = 0; i < span; ++i) dst[i] += src[i];
            }
          }
          offset += chans[k];
        }
      });
}

namespace {

// Row-wise softmax of a (rows x n) block starting at `in`.
void softmax_row(const double* in, double* out, std::size_t n, std::size_t stride = 1) {
  double mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j * stride]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += (out[j * stride] = std::exp(in[j * stride] - mx));
  for (std::size_t j = 0; j < n; ++j) out[j * stride] /= s;
}

}  // namespace

Var softmax(Var z) {
  const auto& zv = z.value();
  const std::size_t rows = zv.rows(), n = zv.cols();
  Tensor out(zv.shape());
  for (std::size_t r = 0; r < rows; ++r) softmax_row(&zv[r * n], &out[r * n], n);
  return z.tape().record("softmax", std::move(out), {z}, [z, rows, n](Tape& t, const Tensor& g, const Tensor& y) {
    if (!t.needs_grad(z)) return;
    const double f = corruption(fault::Rule::softmax);
    auto& gz = t.grad_of(z);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[r * n + j] * g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gz[r * n + j] += f * y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

Var softmax_channels(Var z) {
  const auto d = dims4("softmax_channels", z);
  const auto& zv = z.value();
  const std::size_t plane = d.plane();
  Tensor out(zv.shape());
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = b * d.c * plane + p;
      softmax_row(&zv[base], &out[base], d.c, plane);
    }
  return z.tape().record("softmax_channels", std::move(out), {z}, [z, d](Tape& t, const Tensor& g, const Tensor& y) {
    if (!t.needs_grad(z)) return;
    const double f = corruption(fault::Rule::softmax);
    auto& gz = t.grad_of(z);
    const std::size_t plane = d.plane();
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t base = b * d.c * plane + p;
        double dot = 0.0;
        for (std::size_t c = 0; c < d.c; ++c) dot += y[base + c * plane] * g[base + c * plane];
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t i = base + c * plane;
          gz[i] += f * y[i] * (g[i] - dot);
        }
      }
  });
}

Var cross_entropy_soft(Var logits, const Tensor& target) {
  const auto& zv = logits.value();
  const std::size_t rows = zv.rows(), n = zv.cols();
  const bool broadcast = target.size() == n;
  if (!broadcast && target.size() != rows * n)
    throw DimensionError("cross_entropy_soft: target " + shape_to_string(target.shape()) + " for logits " +
                         shape_to_string(zv.shape()));
  const std::size_t trows = broadcast ? 1 : rows;
  for (std::size_t r = 0; r < trows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = target[r * n + j];
      if (!(v >= 0.0)) throw ValidationError("cross_entropy_soft: target entries must be non-negative");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError("cross_entropy_soft: target row does not sum to 1");
  }

  Tensor probs(Shape{rows, n});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = &zv[r * n];
    const double* tr = &target[broadcast ? 0 : r * n];
    softmax_row(z, &probs[r * n], n);
    double mx = z[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) total += tr[j] * (lse - z[j]);
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return logits.tape().record(
      "cross_entropy_soft", Tensor::scalar(total * inv_rows), {logits},
      [logits, target, probs, rows, n, broadcast, inv_rows](Tape& t, const Tensor& g, const Tensor&) {
        if (!t.needs_grad(logits)) return;
        auto& gz = t.grad_of(logits);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* tr = &target[broadcast ? 0 : r * n];
          double mass = 0.0;
          for (std::size_t j = 0; j < n; ++j) mass += tr[j];
          for (std::size_t j = 0; j < n; ++j) gz[r * n + j] += g[0] * inv_rows * (probs[r * n + j] * mass - tr[j]);
        }
      });
}

namespace {
constexpr double kKlFloor = 1e-12;
}

Var kl_div(Var p, Var q) {
  if (p.value().size() != q.value().size())
    throw DimensionError("kl_div: length mismatch " + shape_to_string(p.shape()) + " vs " +
                         shape_to_string(q.shape()));
  require_same_shape("kl_div", p, q);
  const auto& pv = p.value();
  const auto& qv = q.value();
  const std::size_t rows = pv.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] < 0.0 || qv[i] < 0.0) throw ValidationError("kl_div: probabilities must be non-negative");
    if (pv[i] > 0.0) total += pv[i] * std::log(pv[i] / std::max(qv[i], kKlFloor));
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return p.tape().record("kl_div", Tensor::scalar(total * inv_rows), {p, q},
                         [p, q, inv_rows](Tape& t, const Tensor& g, const Tensor&) {
                           const auto& pv = t.value_of(p.id());
                           const auto& qv = t.value_of(q.id());
                           const double s = g[0] * inv_rows;
                           if (t.needs_grad(p)) {
                             auto& gp = t.grad_of(p);
                             for (std::size_t i = 0; i < pv.size(); ++i)
                               if (pv[i] > 0.0) gp[i] += s * (std::log(pv[i] / std::max(qv[i], kKlFloor)) + 1.0);
                           }
                           if (t.needs_grad(q)) {
                             auto& gq = t.grad_of(q);
                             for (std::size_t i = 0; i < qv.size(); ++i)
                               if (qv[i] >= kKlFloor) gq[i] -= s * pv[i] / qv[i];
                           }
                         });
}

PNorm parse_pnorm(std::string_view name) {
  if (name == "l1" || name == "1") return PNorm::l1;
  if (name == "l2" || name == "2") return PNorm::l2;
  if (name == "mse") return PNorm::mse;
  throw ValidationError("unknown p-norm '" + std::string(name) + "'");
}

std::string_view pnorm_name(PNorm p) {
  switch (p) {
    case PNorm::l1: return "l1";
    case PNorm::l2: return "l2";
    case PNorm::mse: return "mse";
  }
  return "?";
}

Var pnorm_distance(Var a, Var b, PNorm p) {
  require_same_shape("pnorm_distance", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t rows = av.rows(), n = av.cols();
  std::vector<double> row_norm(rows, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = av[r * n + j] - bv[r * n + j];
      acc += p == PNorm::l1 ? std::abs(d) : d * d;
    }
    if (p == PNorm::l2) {
      row_norm[r] = std::sqrt(acc);
      total += row_norm[r];
    } else {
      total += acc / static_cast<double>(n);
    }
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return a.tape().record(
      "pnorm_distance", Tensor::scalar(total * inv_rows), {a, b},
      [a, b, p, rows, n, row_norm, inv_rows](Tape& t, const Tensor& g, const Tensor&) {
        const auto& av = t.value_of(a.id());
        const auto& bv = t.value_of(b.id());
        Tensor gd(Shape{rows * n});
        const double s = g[0] * inv_rows;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t i = r * n + j;
            const double d = av[i] - bv[i];
            switch (p) {
              case PNorm::l1: gd[i] = s * (d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) / static_cast<double>(n); break;
              case PNorm::l2: gd[i] = row_norm[r] > 0.0 ? s * d / row_norm[r] : 0.0; break;
              case PNorm::mse: gd[i] = s * 2.0 * d / static_cast<double>(n); break;
            }
          }
        accumulate(t, a, gd);
        accumulate(t, b, gd, -1.0);
      });
}

Var conv2d(Var x, Var kernels) {
  const bool single = x.value().rank() == 3;
  if (!single) require_rank("conv2d", x, 4);
  require_rank("conv2d", kernels, 4);
  const auto& xs = x.shape();
  const std::size_t bn = single ? 1 : xs[0];
  const std::size_t ci = xs[single ? 0 : 1], h = xs[single ? 1 : 2], w = xs[single ? 2 : 3];
  const auto& ks = kernels.shape();
  const std::size_t co = ks[0];
  if (ks[1] != ci) throw DimensionError("conv2d: kernel expects " + std::to_string(ks[1]) + " input channels, got " +
                                        std::to_string(ci));
  if (ks[2] != 3 || ks[3] != 3) throw DimensionError("conv2d: kernels must be 3x3");

  const auto& xv = x.value();
  const auto& kv = kernels.value();
  Shape out_shape = single ? Shape{co, h, w} : Shape{bn, co, h, w};
  Tensor out(out_shape);
  const std::size_t plane = h * w;
  // For a tap offset (dy, dx) the valid output rows/cols are those whose
  // shifted input coordinate stays inside the image.
  auto range = [](std::size_t tap, std::size_t extent) {
    const std::size_t lo = tap == 0 ? 1 : 0;
    const std::size_t hi = tap == 2 ? extent - 1 : extent;
    return std::pair{lo, hi};
  };
  for (std::size_t b = 0; b < bn; ++b)
    for (std::size_t o = 0; o < co; ++o) {
      double* op = &out[(b * co + o) * plane];
      for (std::size_t c = 0; c < ci; ++c) {
        const double* ip = &xv[(b * ci + c) * plane];
        for (std::size_t dy = 0; dy < 3; ++dy) {
          const auto [y0, y1] = range(dy, h);
          for (std::size_t dx = 0; dx < 3; ++dx) {
            const double wgt = kv[((o * ci + c) * 3 + dy) * 3 + dx];
            if (wgt == 0.0) continue;
            const auto [x0, x1] = range(dx, w);
            for (std::size_t yy = y0; yy < y1; ++yy) {
              double* orow = op + yy * w;
              const double* irow = ip + (yy + dy - 1) * w + dx;
              for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += wgt * irow[xx - 1];
            }
          }
        }
      }
    }
  return x.tape().record(
      "conv2d", std::move(out), {x, kernels},
      [x, kernels, bn, ci, co, h, w, range](Tape& t, const Tensor& g, const Tensor&) {
        const double f = corruption(fault::Rule::conv2d);
        const auto& xv = t.value_of(x.id());
        const auto& kv = t.value_of(kernels.id());
        const bool gx_needed = t.needs_grad(x);
        const bool gk_needed = t.needs_grad(kernels);
        Tensor* gx = gx_needed ? &t.grad_of(x) : nullptr;
        Tensor* gk = gk_needed ? &t.grad_of(kernels) : nullptr;
        const std::size_t plane = h * w;
        for (std::size_t b = 0; b < bn; ++b)
          for (std::size_t o = 0; o < co; ++o) {
            const double* gp = &g[(b * co + o) * plane];
            for (std::size_t c = 0; c < ci; ++c) {
              const double* ip = &xv[(b * ci + c) * plane];
              double* gip = gx ? &(*gx)[(b * ci + c) * plane] : nullptr;
              for (std::size_t dy = 0; dy < 3; ++dy) {
                const auto [y0, y1] = range(dy, h);
                for (std::size_t dx = 0; dx < 3; ++dx) {
                  const std::size_t kidx = ((o * ci + c) * 3 + dy) * 3 + dx;
                  const double wgt = f * kv[kidx];
                  const auto [x0, x1] = range(dx, w);
                  double acc = 0.0;
                  for (std::size_t yy = y0; yy < y1; ++yy) {
                    const double* grow = gp + yy * w;
                    const std::size_t shift = (yy + dy - 1) * w + dx;
                    const double* irow = ip + shift;
                    if (gip) {
                      double* girow = gip + shift;
                      for (std::size_t xx = x0; xx < x1; ++xx) girow[xx - 1] += wgt * grow[xx];
                    }
                    for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx - 1];
                  }
                  if (gk) (*gk)[kidx] += f * acc;
                }
              }
            }
          }
      });
}

Var channel_linear(Var x, Var weights) {
  const auto d = dims4("channel_linear", x);
  require_rank("channel_linear", weights, 2);
  const std::size_t co = weights.shape()[0];
  if (weights.shape()[1] != d.c)
    throw DimensionError("channel_linear: weights " + shape_to_string(weights.shape()) + " for " +
                         shape_to_string(x.shape()));
  const auto& xv = x.value();
  const auto& wv = weights.value();
  const std::size_t plane = d.plane();
  Tensor out(Shape{d.b, co, d.h, d.w});
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t o = 0; o < co; ++o) {
      double* op = &out[(b * co + o) * plane];
      for (std::size_t c = 0; c < d.c; ++c) {
        const double wgt = wv[o * d.c + c];
        const double* ip = &xv[(b * d.c + c) * plane];
        for (std::size_t p = 0; p < plane; ++p) op[p] += wgt * ip[p];
      }
    }
  return x.tape().record("channel_linear", std::move(out), {x, weights},
                         [x, weights, d, co](Tape& t, const Tensor& g, const Tensor&) {
                           const auto& xv = t.value_of(x.id());
                           const auto& wv = t.value_of(weights.id());
                           const std::size_t plane = d.plane();
                           Tensor* gx = t.needs_grad(x) ? &t.grad_of(x) : nullptr;
                           Tensor* gw = t.needs_grad(weights) ? &t.grad_of(weights) : nullptr;
                           for (std::size_t b = 0; b < d.b; ++b)
                             for (std::size_t o = 0; o < co; ++o) {
                               const double* gp = &g[(b * co + o) * plane];
                               for (std::size_t c = 0; c < d.c; ++c) {
                                 const std::size_t base = (b * d.c + c) * plane;
                                 if (gx) {
                                   const double wgt = wv[o * d.c + c];
                                   for (std::size_t p = 0; p < plane; ++p) (*gx)[base + p] += wgt * gp[p];
                                 }
                                 if (gw) {
                                   double acc = 0.0;
                                   for (std::size_t p = 0; p < plane; ++p) acc += gp[p] * xv[base + p];
                                   (*gw)[o * d.c + c] += acc;
                                 }
                               }
                             }
                         });
}

Var avg_pool2(Var x) {
  const auto d = dims4("avg_pool2", x);
  if (d.h % 2 || d.w % 2) throw DimensionError("avg_pool2: spatial dims must be even, got " + shape_to_string(x.shape()));
  const std::size_t oh = d.h / 2, ow = d.w / 2;
  const auto& xv = x.value();
  Tensor out(Shape{d.b, d.c, oh, ow});
  for (std::size_t m = 0; m < d.b * d.c; ++m)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* ip = &xv[m * d.plane() + 2 * y * d.w + 2 * xx];
        out[(m * oh + y) * ow + xx] = 0.25 * (ip[0] + ip[1] + ip[d.w] + ip[d.w + 1]);
      }
  return x.tape().record("avg_pool2", std::move(out), {x}, [x, d, oh, ow](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.needs_grad(x)) return;
    auto& gx = t.grad_of(x);
    for (std::size_t m = 0; m < d.b * d.c; ++m)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const double v = 0.25 * g[(m * oh + y) * ow + xx];
          double* ip = &gx[m * d.plane() + 2 * y * d.w + 2 * xx];
          ip[0] += v;
          ip[1] += v;
          ip[d.w] += v;
          ip[d.w + 1] += v;
        }
  });
}

Var upsample2(Var x) {
  const auto d = dims4("upsample2", x);
  const std::size_t oh = d.h * 2, ow = d.w * 2;
  const auto& xv = x.value();
  Tensor out(Shape{d.b, d.c, oh, ow});
  for (std::size_t m = 0; m < d.b * d.c; ++m)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        out[(m * oh + y) * ow + xx] = xv[m * d.plane() + (y / 2) * d.w + xx / 2];
  return x.tape().record("upsample2", std::move(out), {x}, [x, d, oh, ow](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.needs_grad(x)) return;
    auto& gx = t.grad_of(x);
    for (std::size_t m = 0; m < d.b * d.c; ++m)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) gx[m * d.plane() + (y / 2) * d.w + xx / 2] += g[(m * oh + y) * ow + xx];
  });
}

Var global_avg_pool(Var x) {
  const auto d = dims4("global_avg_pool", x);
  const auto& xv = x.value();
  const std::size_t plane = d.plane();
  Tensor out(Shape{d.b, d.c});
  for (std::size_t m = 0; m < d.b * d.c; ++m) {
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += xv[m * plane + p];
    out[m] = acc / static_cast<double>(plane);
  }
  return x.tape().record("global_avg_pool", std::move(out), {x}, [x, d](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.needs_grad(x)) return;
    auto& gx = t.grad_of(x);
    const std::size_t plane = d.plane();
    for (std::size_t m = 0; m < d.b * d.c; ++m) {
      const double v = g[m] / static_cast<double>(plane);
      for (std::size_t p = 0; p < plane; ++p) gx[m * plane + p] += v;
    }
  });
}

}  // namespace shaspec::ops
