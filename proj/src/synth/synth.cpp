#include "shaspec/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "shaspec/binary_io.hpp"

namespace shaspec {

namespace {

constexpr std::uint64_t kRenderSalt = 0x52454e44;
constexpr std::uint64_t kSampleSalt = 0x53414d50;
constexpr std::uint32_t kDatasetVersion = 1;

Rng sample_rng(const SynthSpec& spec, std::size_t index) {
  return Rng(derive_seed(spec.seed, index, kSampleSalt ^ mix64(spec.stream)));
}

Tensor gaussian(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = normal(rng, 0.0, stddev);
  return t;
}

// y = M x for M [rows x cols], x [cols].
void accumulate_matvec(const Tensor& m, const Tensor& x, Tensor& y) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += m[r * cols + c] * x[c];
    y[r] += acc;
  }
}

}  // namespace

void SynthSpec::validate() const {
  if (modality_count < 2) throw ValidationError("synthetic data needs at least two modalities");
  if (sample_count == 0) throw ValidationError("sample_count must be positive");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ValidationError("noise must be finite and non-negative");
  if (task == TaskKind::classification) {
    if (input_dim == 0 || shared_latent_dim == 0 || specific_latent_dim == 0)
      throw ValidationError("latent and input dimensions must be positive");
    if (class_count < 2) throw ValidationError("class_count must be at least 2");
    if (!(class_separation > 0.0) || !(specific_scale >= 0.0))
      throw ValidationError("class_separation must be positive and specific_scale non-negative");
  } else {
    if (image_size < 4 || image_size % 2) throw ValidationError("image_size must be even and at least 4");
    if (min_area == 0 || min_area > max_area || max_area >= image_size * image_size)
      throw ValidationError("blob area bounds must satisfy 0 < min_area <= max_area < image pixels");
    if (!(texture >= 0.0)) throw ValidationError("texture must be non-negative");
  }
}

RenderingMatrices rendering_matrices(const SynthSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0, kRenderSalt));
  RenderingMatrices m;
  const std::size_t k = spec.shared_latent_dim;
  for (std::size_t i = 0; i < spec.modality_count; ++i) {
    m.shared.push_back(gaussian(Shape{spec.input_dim, k}, rng, 1.0 / std::sqrt(double(k))));
    m.specific.push_back(
        gaussian(Shape{spec.input_dim, spec.specific_latent_dim}, rng, 1.0 / std::sqrt(double(spec.specific_latent_dim))));
  }
  // Class means: orthogonal directions (when they fit) at pairwise distance
  // class_separation, random directions otherwise.
  m.class_means = Tensor(Shape{spec.class_count, k});
  std::vector<std::vector<double>> basis;
  for (std::size_t c = 0; c < spec.class_count; ++c) {
    std::vector<double> v(k);
    for (auto& e : v) e = normal(rng);
    if (c < k)
      for (const auto& b : basis) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += v[j] * b[j];
        for (std::size_t j = 0; j < k; ++j) v[j] -= dot * b[j];
      }
    double norm = 0.0;
    for (double e : v) norm += e * e;
    norm = std::sqrt(norm);
    for (auto& e : v) e /= norm;
    basis.push_back(v);
    for (std::size_t j = 0; j < k; ++j) m.class_means[c * k + j] = v[j] * spec.class_separation / std::numbers::sqrt2;
  }
  return m;
}

LatentSample draw_classification(const SynthSpec& spec, const RenderingMatrices& m, std::size_t index) {
  Rng rng = sample_rng(spec, index);
  LatentSample s;
  s.label = static_cast<std::uint32_t>(index % spec.class_count);
  const std::size_t k = spec.shared_latent_dim;
  s.z = Tensor(Shape{k});
  for (std::size_t j = 0; j < k; ++j) s.z[j] = m.class_means[s.label * k + j] + normal(rng);
  for (std::size_t i = 0; i < spec.modality_count; ++i) {
    s.v.push_back(gaussian(Shape{spec.specific_latent_dim}, rng, spec.specific_scale));
    Tensor x = gaussian(Shape{spec.input_dim}, rng, 1.0);
    for (auto& e : x.data()) e *= spec.noise;
    accumulate_matvec(m.shared[i], s.z, x);
    accumulate_matvec(m.specific[i], s.v[i], x);
    s.x.push_back(std::move(x));
  }
  return s;
}

Dataset generate_classification(const SynthSpec& spec) {
  spec.validate();
  if (spec.task != TaskKind::classification) throw ValidationError("spec is not a classification spec");
  const auto m = rendering_matrices(spec);
  Dataset data{TaskKind::classification, spec.modality_count, {}};
  data.samples.reserve(spec.sample_count);
  for (std::size_t j = 0; j < spec.sample_count; ++j) {
    auto s = draw_classification(spec, m, j);
    ModalitySample out{{}, ModalityMask::full(spec.modality_count), s.label};
    for (auto& x : s.x) out.inputs.emplace_back(std::move(x));
    data.samples.push_back(std::move(out));
  }
  return data;
}

Dataset generate_segmentation(const SynthSpec& spec) {
  spec.validate();
  if (spec.task != TaskKind::segmentation) throw ValidationError("spec is not a segmentation spec");
  const std::size_t n = spec.modality_count, size = spec.image_size;
  struct Style {
    double background, foreground, frequency, texture;
  };
  std::vector<Style> styles;
  for (std::size_t i = 0; i < n; ++i) {
    const double bg = 0.15 + 0.7 * static_cast<double>(i) / static_cast<double>(n - 1);
    const double fg = bg < 0.5 ? bg + 0.5 : bg - 0.5;
    styles.push_back({bg, fg, 0.6 + 0.9 * static_cast<double>(i), spec.texture * (1.0 + 0.5 * static_cast<double>(i))});
  }

  Dataset data{TaskKind::segmentation, n, {}};
  data.samples.reserve(spec.sample_count);
  const double limit = static_cast<double>(size);
  for (std::size_t j = 0; j < spec.sample_count; ++j) {
    Rng rng = sample_rng(spec, j);
    Tensor label(Shape{size, size});
    for (;;) {
      const double cx = 2.0 + uniform01(rng) * (limit - 4.0), cy = 2.0 + uniform01(rng) * (limit - 4.0);
      const double ra = 1.5 + uniform01(rng) * (limit / 3.0), rb = 1.5 + uniform01(rng) * (limit / 3.0);
      const double th = uniform01(rng) * std::numbers::pi, c = std::cos(th), s = std::sin(th);
      std::size_t area = 0;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
          const double u = (c * dx + s * dy) / ra, v = (-s * dx + c * dy) / rb;
          const bool inside = u * u + v * v <= 1.0;
          label[y * size + x] = inside ? 1.0 : 0.0;
          area += inside;
        }
      if (area >= spec.min_area && area <= spec.max_area) break;
    }
    ModalitySample out{{}, ModalityMask::full(n), label};
    for (std::size_t i = 0; i < n; ++i) {
      const auto& st = styles[i];
      const double phase = uniform01(rng) * 2.0 * std::numbers::pi;
      Tensor img(Shape{1, size, size});
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double base = label[y * size + x] > 0.0 ? st.foreground : st.background;
          const double wave = 0.5 * std::sin(st.frequency * static_cast<double>(x + y) + phase);
          img[y * size + x] = base + st.texture * (wave + normal(rng));
        }
      out.inputs.emplace_back(std::move(img));
    }
    data.samples.push_back(std::move(out));
  }
  return data;
}

Dataset generate(const SynthSpec& spec) {
  return spec.task == TaskKind::classification ? generate_classification(spec) : generate_segmentation(spec);
}

// ---------------------------------------------------------------------------

AvailabilityMode parse_availability_mode(std::string_view name) {
  if (name == "full") return AvailabilityMode::full;
  if (name == "uniform_subset") return AvailabilityMode::uniform_subset;
  if (name == "per_modality_rate") return AvailabilityMode::per_modality_rate;
  if (name == "fixed_mask") return AvailabilityMode::fixed_mask;
  throw ValidationError("unknown availability mode '" + std::string(name) + "'");
}

std::string_view availability_mode_name(AvailabilityMode m) {
  switch (m) {
    case AvailabilityMode::full: return "full";
    case AvailabilityMode::uniform_subset: return "uniform_subset";
    case AvailabilityMode::per_modality_rate: return "per_modality_rate";
    case AvailabilityMode::fixed_mask: return "fixed_mask";
  }
  return "?";
}

void AvailabilityPolicy::validate(std::size_t n) const {
  if (mode == AvailabilityMode::per_modality_rate) {
    if (rates.size() != n) throw ValidationError("per_modality_rate needs one rate per modality");
    bool any = false;
    for (double r : rates) {
      if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("availability rate " + std::to_string(r) + " outside [0, 1]");
      any = any || r > 0.0;
    }
    if (!any) throw ValidationError("at least one availability rate must be positive");
  }
  if (mode == AvailabilityMode::fixed_mask) {
    if (!mask) throw ValidationError("fixed_mask policy without a mask");
    if (mask->size() != n) throw ValidationError("fixed mask has the wrong modality count");
  }
}

ModalityMask draw_mask(const AvailabilityPolicy& policy, std::size_t n, Rng& rng) {
  switch (policy.mode) {
    case AvailabilityMode::full: return ModalityMask::full(n);
    case AvailabilityMode::fixed_mask: return *policy.mask;
    case AvailabilityMode::uniform_subset: {
      std::uniform_int_distribution<std::uint64_t> pick(1, (std::uint64_t{1} << n) - 1);
      return ModalityMask::from_flags(pick(rng), n);
    }
    case AvailabilityMode::per_modality_rate:
      for (;;) {
        std::vector<bool> v(n);
        bool any = false;
        for (std::size_t i = 0; i < n; ++i) {
          v[i] = uniform01(rng) < policy.rates[i];
          any = any || v[i];
        }
        if (any) return ModalityMask(std::move(v));
      }
  }
  throw ContractError("unreachable availability mode");
}

std::vector<ModalityMask> realize_masks(const AvailabilityPolicy& policy, std::size_t n, std::size_t count,
                                        std::uint64_t seed) {
  policy.validate(n);
  std::vector<ModalityMask> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Rng rng(derive_seed(seed, k, 0x4d41534b));
    out.push_back(draw_mask(policy, n, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  data.validate();
  ByteWriter w;
  w.raw("SHDS", 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.modality_count));
  w.u64(data.samples.size());
  w.u8(static_cast<std::uint8_t>(data.task));
  const std::size_t mask_bytes = (data.modality_count + 7) / 8;
  for (const auto& s : data.samples) {
    const auto flags = s.mask.flags();
    for (std::size_t b = 0; b < mask_bytes; ++b) w.u8(static_cast<std::uint8_t>(flags >> (8 * b)));
    if (const auto* c = std::get_if<std::uint32_t>(&s.label)) w.u32(*c);
    else w.tensor(std::get<Tensor>(s.label));
    for (const auto& x : s.inputs)
      if (x) w.tensor(*x);
  }
  return w.bytes();
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  ByteWriter w;
  const auto bytes = encode_dataset(data);
  w.raw(bytes.data(), bytes.size());
  w.save(path);
}

Dataset read_dataset(const std::filesystem::path& path) {
  auto r = ByteReader::load(path);
  r.expect_magic("SHDS");
  if (const auto v = r.u32(); v != kDatasetVersion) r.fail("unsupported dataset version " + std::to_string(v));
  const auto n = r.u32();
  if (n < 1 || n > 64) r.fail("invalid modality count " + std::to_string(n));
  const auto count = r.u64();
  const auto task = r.u8();
  if (task > 1) r.fail("invalid task kind " + std::to_string(task));
  Dataset data{static_cast<TaskKind>(task), n, {}};
  const std::size_t mask_bytes = (n + 7) / 8;
  for (std::uint64_t j = 0; j < count; ++j) {
    const auto at = r.offset();
    std::uint64_t flags = 0;
    for (std::size_t b = 0; b < mask_bytes; ++b) flags |= std::uint64_t{r.u8()} << (8 * b);
    if (flags == 0 || (n < 64 && (flags >> n) != 0)) throw FormatError("invalid availability mask", at);
    auto mask = ModalityMask::from_flags(flags, n);
    Label label = data.task == TaskKind::classification ? Label{r.u32()} : Label{r.tensor()};
    std::vector<std::optional<Tensor>> inputs(n);
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i]) inputs[i] = r.tensor();
    data.samples.push_back({std::move(inputs), std::move(mask), std::move(label)});
  }
  if (!r.at_end()) r.fail("trailing bytes after the last sample");
  try {
    data.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("inconsistent dataset: ") + e.what(), r.offset());
  }
  return data;
}

}  // namespace shaspec
