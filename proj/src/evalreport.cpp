#include "clp/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "clp/binio.hpp"
#include "clp/errors.hpp"

namespace clp::eval {

using ad::Var;
using json = nlohmann::json;

namespace {

constexpr std::size_t kChunk = 256;

template <class Fn>
void for_chunks(const data::DatasetContainer& ds, Fn fn) {
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    idx.resize(std::min(kChunk, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    fn(start, train::make_batch(ds, idx));
  }
}

double row_ce(const double* z, std::size_t C, std::size_t y) {
  const double mx = *std::max_element(z, z + C);
  double s = 0.0;
  for (std::size_t j = 0; j < C; ++j) s += std::exp(z[j] - mx);
  return -(z[y] - mx - std::log(s));
}

}  // namespace

std::vector<std::size_t> predict(const models::Classifier& clf, const data::DatasetContainer& ds) {
  std::vector<std::size_t> pred(ds.size());
  ad::NoGradGuard guard;
  for_chunks(ds, [&](std::size_t start, const train::Batch& b) {
    const Tensor lg = clf.forward(Var::constant(b.x)).logits.value();
    const std::size_t C = lg.cols();
    for (std::size_t i = 0; i < b.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < C; ++j)
        if (lg.at(i, j) > lg.at(i, best)) best = j;
      pred[start + i] = best;
    }
  });
  return pred;
}

MetricsReport score(std::span<const std::size_t> predictions, const data::DatasetContainer& ds) {
  if (ds.empty()) throw ContractError("evaluate: dataset is empty");
  if (predictions.size() != ds.size()) throw ShapeError("evaluate: one prediction per sample required");
  const std::size_t C = ds.num_classes();
  std::vector<std::size_t> correct(C, 0), total(C, 0), predicted(C, 0);
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> groups;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t y = ds[i].orig_label, p = predictions[i];
    const bool ok = p == y;
    ++total[y];
    ++predicted[p];
    correct[y] += ok;
    hits += ok;
    auto& g = groups[ds[i].group];
    ++g.first;
    g.second += ok;
  }
  MetricsReport r;
  r.n_eval = ds.size();
  r.top1_acc = static_cast<double>(hits) / static_cast<double>(ds.size());
  r.top1_err = 1.0 - r.top1_acc;
  double prec = 0.0;
  for (std::size_t k = 0; k < C; ++k) {
    r.per_class_n.push_back(total[k]);
    r.per_class_acc.push_back(total[k] ? static_cast<double>(correct[k]) / static_cast<double>(total[k]) : 0.0);
    if (predicted[k]) prec += static_cast<double>(correct[k]) / static_cast<double>(predicted[k]);
  }
  r.macro_precision = prec / static_cast<double>(C);
  r.worst_group_acc = 1.0;
  for (const auto& [id, g] : groups) {
    const double acc = static_cast<double>(g.second) / static_cast<double>(g.first);
    r.groups.push_back({id, g.first, acc});
    r.worst_group_acc = std::min(r.worst_group_acc, acc);
  }
  return r;
}

MetricsReport evaluate(const models::Classifier& clf, const data::DatasetContainer& ds) {
  if (ds.empty()) throw ContractError("evaluate: dataset is empty");
  return score(predict(clf, ds), ds);
}

LossIncrease loss_increase_fractions(const Tensor& logits, const Tensor& delta, const data::DatasetContainer& ds) {
  if (logits.shape() != delta.shape() || logits.rows() != ds.size()) {
    throw ShapeError("loss_increase_fractions: logits, delta and dataset disagree");
  }
  const std::size_t C = logits.cols();
  std::vector<double> z(C);
  std::size_t up_clean = 0, up_noisy = 0;
  LossIncrease out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double* u = logits.data().data() + i * C;
    const double* d = delta.data().data() + i * C;
    for (std::size_t j = 0; j < C; ++j) z[j] = u[j] + d[j];
    const bool up = row_ce(z.data(), C, ds[i].label) > row_ce(u, C, ds[i].label);
    if (ds[i].noised()) {
      ++out.n_noisy;
      up_noisy += up;
    } else {
      ++out.n_clean;
      up_clean += up;
    }
  }
  if (out.n_clean) out.frac_clean = static_cast<double>(up_clean) / static_cast<double>(out.n_clean);
  if (out.n_noisy) out.frac_noisy = static_cast<double>(up_noisy) / static_cast<double>(out.n_noisy);
  return out;
}

LossIncrease loss_increase_fractions(const models::Classifier& clf, const models::PerturbNet& pnet,
                                     const chars::ClassStats& stats, const chars::FeatureNormalizer& norm,
                                     const data::DatasetContainer& ds) {
  if (ds.empty()) throw ContractError("loss_increase_fractions: dataset is empty");
  const std::size_t C = clf.classes();
  Tensor logits(Shape{ds.size(), C}), delta(Shape{ds.size(), C});
  ad::NoGradGuard guard;
  for_chunks(ds, [&](std::size_t start, const train::Batch& b) {
    const auto out = clf.forward(Var::constant(b.x));
    const auto bc =
        train::batch_characteristics(out.logits.value(), out.features.value(), b, clf.final_weight(), stats);
    std::vector<chars::CharVector> cv;
    for (const auto& c : bc.raw) cv.push_back(norm.transform(c));
    const Tensor d = pnet.forward(Var::constant(chars::stack(cv))).value();
    std::copy(out.logits.value().data().begin(), out.logits.value().data().end(),
              logits.data().begin() + static_cast<long>(start * C));
    std::copy(d.data().begin(), d.data().end(), delta.data().begin() + static_cast<long>(start * C));
  });
  return loss_increase_fractions(logits, delta, ds);
}

std::vector<double> saliency_map(const models::Classifier& clf, const data::SampleRecord& sample,
                                 const data::DatasetContainer& geometry) {
  const std::size_t G = geometry.pixels_per_image();
  if (sample.pixels.size() != 3 * G) throw ShapeError("saliency_map: sample does not match the dataset geometry");
  Tensor xt(Shape{1, 3 * G});
  for (std::size_t i = 0; i < 3 * G; ++i) xt[i] = sample.pixels[i];
  const Var x = Var::leaf(xt, true);
  const std::size_t y[1] = {sample.orig_label};
  const Var p = ad::sum(ad::row_gather(ad::softmax(clf.forward(x).logits), y));
  const Tensor g = ad::grad(p, x).value();
  std::vector<double> map(G, 0.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < G; ++k) map[k] += g[c * G + k] * g[c * G + k];
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double a = *lo, range = *hi - *lo;
  if (range > 0.0) {
    for (auto& v : map) v = (v - a) / range;
  } else {
    std::fill(map.begin(), map.end(), 0.0);
  }
  return map;
}

double saliency_ratio(std::span<const double> map, std::span<const std::uint8_t> mask) {
  double in = 0.0, out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t k = 0; k < map.size(); ++k) {
    if (mask[k]) {
      in += map[k];
      ++n_in;
    } else {
      out += map[k];
      ++n_out;
    }
  }
  const double mi = n_in ? in / static_cast<double>(n_in) : 0.0;
  const double mo = n_out ? out / static_cast<double>(n_out) : 0.0;
  if (mo == 0.0) return mi == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  return mi / mo;
}

std::vector<std::uint8_t> encode_pgm(std::span<const double> map, std::size_t height, std::size_t width) {
  if (map.size() != height * width) throw ShapeError("encode_pgm: map size does not match dimensions");
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double v : map) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

void write_pgm(const std::filesystem::path& path, std::span<const double> map, std::size_t height, std::size_t width) {
  binio::write_file_atomic(path, encode_pgm(map, height, width));
}

std::string metrics_json(const MetricsReport& r, int indent) {
  json j;
  j["top1_acc"] = r.top1_acc;
  j["top1_err"] = r.top1_err;
  j["per_class_acc"] = r.per_class_acc;
  j["per_class_n"] = r.per_class_n;
  j["macro_precision"] = r.macro_precision;
  j["worst_group_acc"] = r.worst_group_acc;
  j["groups"] = json::array();
  for (const auto& g : r.groups) j["groups"].push_back({{"id", g.id}, {"n", g.n}, {"acc", g.acc}});
  j["n_eval"] = r.n_eval;
  return j.dump(indent) + "\n";
}

MetricsReport parse_metrics_json(const std::string& text) {
  MetricsReport r;
  try {
    const json j = json::parse(text);
    r.top1_acc = j.at("top1_acc").get<double>();
    r.top1_err = j.at("top1_err").get<double>();
    r.per_class_acc = j.at("per_class_acc").get<std::vector<double>>();
    r.per_class_n = j.at("per_class_n").get<std::vector<std::size_t>>();
    r.macro_precision = j.at("macro_precision").get<double>();
    r.worst_group_acc = j.at("worst_group_acc").get<double>();
    for (const auto& g : j.at("groups")) {
      r.groups.push_back({g.at("id").get<std::size_t>(), g.at("n").get<std::size_t>(), g.at("acc").get<double>()});
    }
    r.n_eval = j.at("n_eval").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("metrics json: ") + e.what(), 0);
  }
  return r;
}

std::string history_csv(std::span<const train::IterationRecord> history) {
  std::ostringstream os;
  os.precision(17);
  os << "iter,train_loss,meta_loss\n";
  for (const auto& h : history) {
    os << h.iter << ',' << h.train_loss << ',';
    if (h.has_meta) os << h.meta_loss;
    os << '\n';
  }
  return os.str();
}

void report_emit(std::span<const ReportBundle> bundles, const std::filesystem::path& prefix) {
  for (const auto& b : bundles) {
    const std::string base = prefix.string() + b.name;
    binio::write_text_atomic(base + "_metrics.json", metrics_json(b.metrics));
    binio::write_text_atomic(base + "_history.csv", history_csv(b.history));
  }
}

}  // namespace clp::eval
