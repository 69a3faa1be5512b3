#include "clp/models.hpp"

#include <cmath>
#include <random>

#include "clp/binio.hpp"
#include "clp/errors.hpp"

namespace clp::models {

namespace {

Tensor he_normal(std::size_t out, std::size_t in, std::mt19937_64& rng) {
  Tensor w(Shape{out, in});
  std::normal_distribution<double> d(0.0, std::sqrt(2.0 / static_cast<double>(in)));
  for (auto& v : w.data()) v = d(rng);
  return w;
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Var y = ad::matmul(x, w, simd::Layout::NT);
  return ad::add(y, ad::expand(b, y.shape()));
}

std::vector<Var> constants(const ParamSet& p) { return p.leaves(false); }

}  // namespace

// ---- ParamSet ---------------------------------------------------------------

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& t : values) n += t.numel();
  return n;
}

std::vector<Shape> ParamSet::shapes() const {
  std::vector<Shape> s;
  for (const auto& t : values) s.push_back(t.shape());
  return s;
}

std::vector<Var> ParamSet::leaves(bool requires_grad) const {
  std::vector<Var> out;
  out.reserve(values.size());
  for (const auto& t : values) out.push_back(Var::leaf(t, requires_grad));
  return out;
}

Tensor ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(count());
  for (const auto& t : values) flat.insert(flat.end(), t.data().begin(), t.data().end());
  const std::size_t n = flat.size();
  return Tensor(Shape{n}, std::move(flat));
}

void ParamSet::assign(const Tensor& flat) {
  if (flat.numel() != count()) {
    throw ShapeError("params_assign: expected " + std::to_string(count()) + " values, got " +
                     std::to_string(flat.numel()));
  }
  std::size_t off = 0;
  for (auto& t : values) {
    std::copy_n(flat.data().begin() + static_cast<long>(off), t.numel(), t.data().begin());
    off += t.numel();
  }
}

std::vector<Var> ParamSet::bind(const Var& flat) const {
  if (flat.numel() != count()) {
    throw ShapeError("params_assign: expected " + std::to_string(count()) + " values, got " +
                     std::to_string(flat.numel()));
  }
  std::vector<Var> out;
  std::size_t off = 0;
  for (const auto& t : values) {
    out.push_back(ad::slice(flat, off, t.shape()));
    off += t.numel();
  }
  return out;
}

// ---- Classifier -------------------------------------------------------------

Classifier::Classifier(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes,
                       std::uint64_t seed)
    : input_dim_(input_dim), hidden_(std::move(hidden)), classes_(classes) {
  if (input_dim_ == 0 || classes_ < 2) throw ConfigError("classifier needs input_dim >= 1 and classes >= 2");
  std::mt19937_64 rng(seed);
  std::size_t in = input_dim_;
  std::size_t layer = 0;
  auto add_layer = [&](std::size_t out) {
    if (out == 0) throw ConfigError("hidden width must be positive");
    params_.names.push_back("fc" + std::to_string(layer) + ".weight");
    params_.values.push_back(he_normal(out, in, rng));
    params_.names.push_back("fc" + std::to_string(layer) + ".bias");
    params_.values.push_back(Tensor(Shape{1, out}));
    in = out;
    ++layer;
  };
  for (auto h : hidden_) add_layer(h);
  add_layer(classes_);
}

ForwardOut Classifier::forward(std::span<const Var> p, const Var& x) const {
  if (p.size() != params_.values.size()) throw ShapeError("classifier: wrong number of parameter tensors");
  if (x.value().rank() != 2 || x.shape()[1] != input_dim_) {
    throw ShapeError("classifier: expected input batch x " + std::to_string(input_dim_) + ", got " +
                     shape_str(x.shape()));
  }
  Var h = x;
  const std::size_t layers = p.size() / 2;
  for (std::size_t l = 0; l + 1 < layers; ++l) h = ad::relu(linear(h, p[2 * l], p[2 * l + 1]));
  return {h, linear(h, p[2 * (layers - 1)], p[2 * (layers - 1) + 1])};
}

ForwardOut Classifier::forward(const Var& x) const {
  const auto p = constants(params_);
  return forward(p, x);
}

// ---- PerturbNet -------------------------------------------------------------

PerturbNet::PerturbNet(std::size_t classes, std::size_t hidden, std::uint64_t seed)
    : classes_(classes), hidden_(hidden) {
  if (classes_ < 2 || hidden_ == 0) throw ConfigError("perturbation net needs classes >= 2 and hidden >= 1");
  std::mt19937_64 rng(seed);
  params_.names = {"fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"};
  params_.values = {he_normal(hidden_, kInputs, rng), Tensor(Shape{1, hidden_}), Tensor(Shape{classes_, hidden_}),
                    Tensor(Shape{1, classes_})};
}

Var PerturbNet::forward(std::span<const Var> p, const Var& cv) const {
  if (p.size() != 4) throw ShapeError("perturbation net: wrong number of parameter tensors");
  if (cv.value().rank() != 2 || cv.shape()[1] != kInputs) {
    throw ShapeError("perturbation net: expected batch x 10 characteristics, got " + shape_str(cv.shape()));
  }
  return linear(ad::relu(linear(cv, p[0], p[1])), p[2], p[3]);
}

Var PerturbNet::forward(const Var& cv) const {
  const auto p = constants(params_);
  return forward(p, cv);
}

ForwardOut classify(const Classifier& clf, const Var& x) { return clf.forward(x); }
Var perturb(const PerturbNet& pnet, const Var& cv) { return pnet.forward(cv); }

// ---- checkpoints ------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'C', 'L', 'P', 'W'};
constexpr std::uint16_t kVersion = 1;
}  // namespace

void add_params(Checkpoint& ckpt, const std::string& prefix, const ParamSet& params) {
  for (std::size_t i = 0; i < params.values.size(); ++i) ckpt[prefix + params.names[i]] = params.values[i];
}

void load_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet& params) {
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    const std::string name = prefix + params.names[i];
    auto it = ckpt.find(name);
    if (it == ckpt.end()) throw ConfigError("checkpoint is missing parameter block '" + name + "'");
    if (it->second.shape() != params.values[i].shape()) {
      throw ConfigError("checkpoint parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                        " but the configured model expects " + shape_str(params.values[i].shape()));
    }
    params.values[i] = it->second;
  }
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.raw(std::string_view(kMagic, 4));
  w.u16(kVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.size()));
  for (const auto& [name, t] : ckpt) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u16(static_cast<std::uint16_t>(t.rank()));
    for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : t.data()) w.f64(v);
  }
  return w.buffer();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  if (r.str(4) != std::string_view(kMagic, 4)) throw FormatError("bad magic, expected CLPW", 0);
  const std::size_t vpos = r.offset();
  const auto version = r.u16();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), vpos);
  const std::size_t n = r.u32();
  Checkpoint out;
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t at = r.offset();
    const std::string name = r.str(r.u16());
    const std::size_t rank = r.u16();
    if (rank > 8) throw FormatError("implausible tensor rank in block '" + name + "'", at);
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    const std::size_t numel = shape_numel(shape);
    if (numel > r.remaining() / 8) throw FormatError("truncated tensor data in block '" + name + "'", r.offset());
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64();
    if (!out.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
      throw FormatError("duplicate block '" + name + "'", at);
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last block", r.offset());
  return out;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(binio::read_file(path)); }

}  // namespace clp::models
