#include "clp/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "clp/binio.hpp"
#include "clp/errors.hpp"

namespace clp::data {

namespace {

using Rgb = std::array<float, 3>;

// Per-class foreground hue.
constexpr std::array<Rgb, kShapeLibrarySize> kShapeHue{{
    {0.95f, 0.85f, 0.10f},
    {0.10f, 0.80f, 0.95f},
    {0.95f, 0.20f, 0.70f},
    {0.30f, 0.95f, 0.30f},
    {1.00f, 0.55f, 0.00f},
    {0.55f, 0.35f, 1.00f},
}};

enum class Pattern { Solid, HStripes, VStripes, Checker, Speckle };

struct Texture {
  Pattern pattern;
  Rgb a;
  Rgb b;
};

constexpr std::array<Texture, kTextureLibrarySize> kTextures{{
    {Pattern::Solid, {0.55f, 0.25f, 0.25f}, {}},
    {Pattern::HStripes, {0.20f, 0.30f, 0.60f}, {0.35f, 0.45f, 0.75f}},
    {Pattern::Checker, {0.25f, 0.50f, 0.25f}, {0.40f, 0.65f, 0.40f}},
    {Pattern::Speckle, {0.50f, 0.50f, 0.50f}, {}},
    {Pattern::Solid, {0.20f, 0.20f, 0.20f}, {}},
    {Pattern::VStripes, {0.60f, 0.55f, 0.30f}, {0.45f, 0.40f, 0.20f}},
    {Pattern::Checker, {0.30f, 0.30f, 0.45f}, {0.15f, 0.15f, 0.30f}},
    {Pattern::Speckle, {0.70f, 0.60f, 0.55f}, {}},
}};

constexpr float kSpeckleAmplitude = 0.05f;

bool shape_covers(std::size_t shape, long i, long j, long s) {
  const double c = (s - 1) / 2.0;
  const double di = i - c, dj = j - c;
  const double r2 = di * di + dj * dj;
  const double half = s / 2.0;
  switch (shape) {
    case 0: return true;                                   // filled square
    case 1: return r2 <= half * half;                      // disk
    case 2: return std::abs(di) <= s / 4.0 || std::abs(dj) <= s / 4.0;  // cross
    case 3: return j <= i;                                 // triangle
    case 4: return r2 <= half * half && r2 >= (s / 4.0) * (s / 4.0);  // ring
    case 5: return std::abs(i - j) <= s / 3;               // diagonal bar
    default: return false;
  }
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void paint_texture(std::vector<float>& px, std::size_t texture, std::size_t h, std::size_t w,
                   std::mt19937_64& rng) {
  const Texture& t = kTextures[texture];
  std::uniform_real_distribution<float> noise(-kSpeckleAmplitude, kSpeckleAmplitude);
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      Rgb c = t.a;
      switch (t.pattern) {
        case Pattern::Solid: break;
        case Pattern::HStripes: if ((i / 4) % 2) c = t.b; break;
        case Pattern::VStripes: if ((j / 4) % 2) c = t.b; break;
        case Pattern::Checker: if (((i / 4) + (j / 4)) % 2) c = t.b; break;
        case Pattern::Speckle: {
          const float d = noise(rng);
          for (auto& v : c) v = std::clamp(v + d, 0.0f, 1.0f);
          break;
        }
      }
      for (std::size_t ch = 0; ch < 3; ++ch) px[ch * plane + i * w + j] = c[ch];
    }
  }
}

void recount(std::vector<std::size_t>& counts, std::size_t classes, const std::vector<SampleRecord>& s) {
  counts.assign(classes, 0);
  for (const auto& r : s) {
    if (r.label < classes) ++counts[r.label];
  }
}

}  // namespace

DatasetContainer::DatasetContainer(std::size_t num_classes, std::size_t height, std::size_t width,
                                   std::vector<SampleRecord> samples, Provenance provenance)
    : num_classes_(num_classes),
      height_(height),
      width_(width),
      samples_(std::move(samples)),
      provenance_(std::move(provenance)) {
  recount(class_counts_, num_classes_, samples_);
}

void DatasetContainer::validate() const {
  const std::size_t g = pixels_per_image();
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const auto& s = samples_[i];
    const std::string where = "sample " + std::to_string(i) + ": ";
    if (s.pixels.size() != 3 * g || s.mask.size() != g) throw ContractError(where + "wrong image size");
    if (s.label >= num_classes_ || s.orig_label >= num_classes_) throw ContractError(where + "label out of range");
    for (auto m : s.mask) {
      if (m > 1) throw ContractError(where + "mask value not in {0,1}");
    }
    for (float p : s.pixels) {
      if (!(p >= 0.0f && p <= 1.0f)) throw ContractError(where + "pixel outside [0,1]");
    }
  }
}

std::vector<std::size_t> balanced_group_counts(std::size_t classes, std::size_t backgrounds,
                                               std::size_t per_cell) {
  return std::vector<std::size_t>(classes * backgrounds, per_cell);
}

std::array<float, 3> shape_hue(std::size_t k) {
  if (k >= kShapeLibrarySize) throw ContractError("no shape for class " + std::to_string(k));
  return kShapeHue[k];
}

DatasetContainer synth_spurshapes(const SpurShapesConfig& cfg) {
  const std::size_t C = cfg.classes, B = cfg.backgrounds, H = cfg.height, W = cfg.width;
  if (C < 2) throw ConfigError("data.classes must be >= 2");
  if (B < 2) throw ConfigError("data.backgrounds must be >= 2");
  if (C > kShapeLibrarySize) {
    throw ConfigError("data.classes exceeds the shape library (" + std::to_string(kShapeLibrarySize) + ")");
  }
  if (B > kTextureLibrarySize) {
    throw ConfigError("data.backgrounds exceeds the texture library (" + std::to_string(kTextureLibrarySize) + ")");
  }
  if (H < 16 || W < 16) throw ConfigError("data.height and data.width must be >= 16 for shapes to fit");
  if (!(cfg.spuriousness >= 0.0 && cfg.spuriousness <= 1.0)) {
    throw ConfigError("data.spuriousness must lie in [0,1]");
  }
  if (cfg.group_counts && cfg.group_counts->size() != C * B) {
    throw ConfigError("group_counts must hold classes*backgrounds entries");
  }

  const long side = static_cast<long>(std::min(H, W));
  const long smin = side * 5 / 16;
  const long smax = side / 2;

  std::mt19937_64 rng(cfg.seed);
  std::bernoulli_distribution linked(cfg.spuriousness);
  std::uniform_int_distribution<std::size_t> other_bg(0, B - 2);
  std::uniform_int_distribution<long> size_dist(smin, smax);

  std::vector<SampleRecord> samples;
  auto emit = [&](std::size_t k, std::size_t bg) {
    SampleRecord r;
    r.pixels.resize(3 * H * W);
    r.mask.assign(H * W, 0);
    paint_texture(r.pixels, bg, H, W, rng);
    const long s = size_dist(rng);
    const long top = std::uniform_int_distribution<long>(0, static_cast<long>(H) - s)(rng);
    const long left = std::uniform_int_distribution<long>(0, static_cast<long>(W) - s)(rng);
    const Rgb& hue = kShapeHue[k];
    for (long i = 0; i < s; ++i) {
      for (long j = 0; j < s; ++j) {
        const std::size_t p = static_cast<std::size_t>(top + i) * W + static_cast<std::size_t>(left + j);
        r.mask[p] = 1;
        if (!shape_covers(k, i, j, s)) continue;
        for (std::size_t ch = 0; ch < 3; ++ch) r.pixels[ch * H * W + p] = hue[ch];
      }
    }
    r.label = r.orig_label = static_cast<std::uint16_t>(k);
    r.group = static_cast<std::uint16_t>(k * B + bg);
    samples.push_back(std::move(r));
  };

  for (std::size_t k = 0; k < C; ++k) {
    if (cfg.group_counts) {
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < (*cfg.group_counts)[k * B + b]; ++i) emit(k, b);
      }
      continue;
    }
    const std::size_t home = k % B;
    for (std::size_t i = 0; i < cfg.n_per_class; ++i) {
      std::size_t bg = home;
      if (!linked(rng)) {
        const std::size_t o = other_bg(rng);
        bg = o < home ? o : o + 1;
      }
      emit(k, bg);
    }
  }

  Provenance prov;
  prov.seed = cfg.seed;
  std::ostringstream os;
  os << "spurshapes classes=" << C << " backgrounds=" << B << " height=" << H << " width=" << W;
  if (cfg.group_counts) {
    os << " group_counts=";
    for (std::size_t i = 0; i < cfg.group_counts->size(); ++i) os << (i ? "," : "") << (*cfg.group_counts)[i];
  } else {
    os << " n_per_class=" << cfg.n_per_class << " spuriousness=" << format_double(cfg.spuriousness);
  }
  prov.steps.push_back(os.str());
  return DatasetContainer(C, H, W, std::move(samples), std::move(prov));
}

// ---- long tail --------------------------------------------------------------

std::vector<std::size_t> longtail_schedule(std::size_t n, std::size_t classes, double ratio) {
  std::vector<std::size_t> keep(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    const double e = classes > 1 ? -static_cast<double>(k) / static_cast<double>(classes - 1) : 0.0;
    // Guard against exp/log rounding landing just under an integer.
    keep[k] = static_cast<std::size_t>(std::floor(static_cast<double>(n) * std::pow(ratio, e) + 1e-9));
  }
  return keep;
}

DatasetContainer apply_longtail(const DatasetContainer& ds, double ratio, std::uint64_t seed) {
  const std::size_t C = ds.num_classes();
  const auto& counts = ds.class_counts();
  if (C == 0 || ds.empty()) throw ContractError("apply_longtail: empty dataset");
  const std::size_t n = counts[0];
  for (auto c : counts) {
    if (c != n) throw ContractError("apply_longtail: dataset is not class-balanced");
  }
  if (!(ratio >= 1.0)) throw ConfigError("imbalance_ratio must be >= 1");
  if (ratio > static_cast<double>(n)) {
    throw InfeasibleError("imbalance ratio " + format_double(ratio) + " exceeds per-class count " +
                          std::to_string(n));
  }
  const auto keep = longtail_schedule(n, C, ratio);

  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds[i].label].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<char> kept(ds.size(), 0);
  for (std::size_t k = 0; k < C; ++k) {
    auto idx = by_class[k];
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < keep[k]; ++i) kept[idx[i]] = 1;
  }
  std::vector<SampleRecord> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (kept[i]) out.push_back(ds[i]);
  }
  Provenance prov = ds.provenance();
  prov.steps.push_back("longtail ratio=" + format_double(ratio) + " seed=" + std::to_string(seed));
  return DatasetContainer(C, ds.height(), ds.width(), std::move(out), std::move(prov));
}

// ---- label noise ------------------------------------------------------------

NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "none") return NoiseKind::None;
  if (s == "uniform") return NoiseKind::Uniform;
  if (s == "flip") return NoiseKind::Flip;
  throw ConfigError("noise_kind must be one of none|uniform|flip, got '" + s + "'");
}

std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::None: return "none";
    case NoiseKind::Uniform: return "uniform";
    case NoiseKind::Flip: return "flip";
  }
  return "?";
}

DatasetContainer inject_label_noise(const DatasetContainer& ds, NoiseKind kind, double ratio,
                                    std::uint64_t seed,
                                    const std::optional<std::vector<std::array<std::uint16_t, 2>>>& confusable) {
  const std::size_t C = ds.num_classes();
  if (kind == NoiseKind::None) throw ConfigError("inject_label_noise: kind must be uniform or flip");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("noise_ratio must lie in (0,1)");
  if (kind == NoiseKind::Flip && C < 3) throw ConfigError("flip noise needs at least 3 classes");

  std::vector<std::array<std::uint16_t, 2>> table;
  if (confusable) {
    table = *confusable;
    if (table.size() != C) throw ConfigError("confusability table must have one row per class");
    for (std::size_t k = 0; k < C; ++k) {
      for (auto t : table[k]) {
        if (t >= C || t == k) throw ConfigError("confusability table entry invalid for class " + std::to_string(k));
      }
    }
  } else {
    table.resize(C);
    for (std::size_t k = 0; k < C; ++k) {
      table[k] = {static_cast<std::uint16_t>((k + 1) % C), static_cast<std::uint16_t>((k + C - 1) % C)};
    }
  }

  const std::size_t N = ds.size();
  const auto n_noisy = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(N)));
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<SampleRecord> out = ds.samples();
  std::uniform_int_distribution<std::size_t> pick_other(0, C - 2);
  std::uniform_int_distribution<int> pick_pair(0, 1);
  for (std::size_t t = 0; t < n_noisy; ++t) {
    SampleRecord& s = out[order[t]];
    const std::size_t y = s.orig_label;
    std::size_t ny;
    if (kind == NoiseKind::Uniform) {
      const std::size_t o = pick_other(rng);
      ny = o < y ? o : o + 1;
    } else {
      ny = table[y][pick_pair(rng)];
    }
    s.label = static_cast<std::uint16_t>(ny);
    s.flags |= kLabelNoise;
  }
  Provenance prov = ds.provenance();
  prov.steps.push_back("label_noise kind=" + to_string(kind) + " ratio=" + format_double(ratio) +
                       " seed=" + std::to_string(seed));
  return DatasetContainer(C, ds.height(), ds.width(), std::move(out), std::move(prov));
}

// ---- metadata split ---------------------------------------------------------

MetaSplit draw_meta_subset(const DatasetContainer& ds, std::size_t per_class, std::uint64_t seed) {
  const std::size_t C = ds.num_classes();
  std::mt19937_64 rng(seed);
  std::vector<char> taken(ds.size(), 0);
  std::vector<std::size_t> chosen;
  for (std::size_t k = 0; k < C; ++k) {
    std::map<std::uint16_t, std::vector<std::size_t>> by_group;
    std::size_t available = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto& s = ds[i];
      if (s.label == k && s.orig_label == k && !s.noised() && !s.counterfactual() && !s.factual()) {
        by_group[s.group].push_back(i);
        ++available;
      }
    }
    if (available < per_class) {
      throw InfeasibleError("class " + std::to_string(k) + " has " + std::to_string(available) +
                            " clean samples, need " + std::to_string(per_class));
    }
    std::vector<std::vector<std::size_t>> pools;
    for (auto& [g, idx] : by_group) {
      std::shuffle(idx.begin(), idx.end(), rng);
      pools.push_back(std::move(idx));
    }
    std::vector<std::size_t> cursor(pools.size(), 0);
    std::size_t got = 0;
    while (got < per_class) {
      for (std::size_t p = 0; p < pools.size() && got < per_class; ++p) {
        if (cursor[p] < pools[p].size()) {
          chosen.push_back(pools[p][cursor[p]++]);
          ++got;
        }
      }
    }
  }
  for (auto i : chosen) taken[i] = 1;

  MetaSplit split;
  std::vector<SampleRecord> meta, rest;
  for (auto i : chosen) meta.push_back(ds[i]);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!taken[i]) rest.push_back(ds[i]);
  }
  Provenance mp = ds.provenance();
  mp.steps.push_back("meta_subset per_class=" + std::to_string(per_class) + " seed=" + std::to_string(seed));
  Provenance rp = ds.provenance();
  rp.steps.push_back("meta_remainder per_class=" + std::to_string(per_class) + " seed=" + std::to_string(seed));
  split.meta = DatasetContainer(C, ds.height(), ds.width(), std::move(meta), std::move(mp));
  split.rest = DatasetContainer(C, ds.height(), ds.width(), std::move(rest), std::move(rp));
  split.meta_indices = std::move(chosen);
  return split;
}

// ---- container codec --------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'C', 'L', 'P', 'D'};
constexpr std::uint16_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_container(const DatasetContainer& ds) {
  if (ds.num_classes() > 0xFFFF || ds.height() > 0xFFFF || ds.width() > 0xFFFF || ds.size() > 0xFFFFFFFFu) {
    throw ContractError("dataset dimensions exceed the container format");
  }
  ds.validate();
  binio::Writer w;
  w.raw(std::string_view(kMagic, 4));
  w.u16(kVersion);
  w.u16(static_cast<std::uint16_t>(ds.num_classes()));
  w.u16(static_cast<std::uint16_t>(ds.height()));
  w.u16(static_cast<std::uint16_t>(ds.width()));
  w.u32(static_cast<std::uint32_t>(ds.size()));
  for (const auto& s : ds.samples()) {
    w.u16(s.label);
    w.u16(s.orig_label);
    w.u16(s.group);
    w.u8(s.flags);
    w.u8(0);
    w.bytes(s.mask);
    for (float p : s.pixels) w.f32(p);
  }
  return w.buffer();
}

DatasetContainer decode_container(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  const std::string magic = r.str(4);
  if (magic != std::string_view(kMagic, 4)) throw FormatError("bad magic, expected CLPD", 0);
  const std::size_t vpos = r.offset();
  const std::uint16_t version = r.u16();
  if (version != kVersion) throw FormatError("unsupported container version " + std::to_string(version), vpos);
  const std::size_t C = r.u16(), H = r.u16(), W = r.u16();
  const std::size_t N = r.u32();
  const std::size_t G = H * W;
  std::vector<SampleRecord> samples;
  samples.reserve(std::min<std::size_t>(N, r.remaining() / (8 + 13 * G + 1) + 1));
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t at = r.offset();
    SampleRecord s;
    s.label = r.u16();
    s.orig_label = r.u16();
    s.group = r.u16();
    s.flags = r.u8();
    r.u8();
    if (s.label >= C || s.orig_label >= C) throw FormatError("label out of range", at);
    auto m = r.bytes(G);
    s.mask.assign(m.begin(), m.end());
    for (auto v : s.mask) {
      if (v > 1) throw FormatError("mask value not in {0,1}", at);
    }
    s.pixels.resize(3 * G);
    for (auto& p : s.pixels) {
      const std::size_t ppos = r.offset();
      p = r.f32();
      if (!(p >= 0.0f && p <= 1.0f)) throw FormatError("pixel outside [0,1]", ppos);
    }
    samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last sample", r.offset());
  return DatasetContainer(C, H, W, std::move(samples));
}

void write_container(const DatasetContainer& ds, const std::filesystem::path& path) {
  const auto bytes = encode_container(ds);
  binio::write_file_atomic(path, bytes);
}

DatasetContainer read_container(const std::filesystem::path& path) {
  return decode_container(binio::read_file(path));
}

}  // namespace clp::data
