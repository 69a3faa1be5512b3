#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "clp/characteristics.hpp"
#include "clp/metatrain.hpp"
#include "clp/models.hpp"
#include "clp/synthdata.hpp"

namespace clp::eval {

struct GroupAccuracy {
  std::size_t id = 0;
  std::size_t n = 0;
  double acc = 0.0;
};

struct MetricsReport {
  double top1_acc = 0.0;
  double top1_err = 0.0;
  std::vector<double> per_class_acc;
  std::vector<std::size_t> per_class_n;
  double macro_precision = 0.0;
  double worst_group_acc = 0.0;
  std::vector<GroupAccuracy> groups;  // groups present in the data, by id
  std::size_t n_eval = 0;
};

// Argmax of unperturbed logits (lowest index wins ties) against orig_label.
std::vector<std::size_t> predict(const models::Classifier& clf, const data::DatasetContainer& ds);
MetricsReport evaluate(const models::Classifier& clf, const data::DatasetContainer& ds);
MetricsReport score(std::span<const std::size_t> predictions, const data::DatasetContainer& ds);

struct LossIncrease {
  double frac_clean = 0.0;
  std::optional<double> frac_noisy;  // absent when no sample carries the noise flag
  std::size_t n_clean = 0;
  std::size_t n_noisy = 0;
};

// Share of clean and noised samples whose CE against the training label
// strictly increases when delta is added to the logits.
LossIncrease loss_increase_fractions(const models::Classifier& clf, const models::PerturbNet& pnet,
                                     const chars::ClassStats& stats, const chars::FeatureNormalizer& norm,
                                     const data::DatasetContainer& ds);
// Same comparison with explicit logits and perturbations (n x C each).
LossIncrease loss_increase_fractions(const Tensor& logits, const Tensor& delta, const data::DatasetContainer& ds);

// Channel-summed squared input gradient of S(u)_label, min-max scaled to
// [0, 1]; all zeros when the gradient is constant. H x W row-major.
std::vector<double> saliency_map(const models::Classifier& clf, const data::SampleRecord& sample,
                                 const data::DatasetContainer& geometry);
// Mean map value inside the mask over mean outside it. Returns +inf when
// the outside mean is zero and the inside mean is not, 1 when both are zero.
double saliency_ratio(std::span<const double> map, std::span<const std::uint8_t> mask);

// Binary 8-bit portable graymap.
std::vector<std::uint8_t> encode_pgm(std::span<const double> map, std::size_t height, std::size_t width);
void write_pgm(const std::filesystem::path& path, std::span<const double> map, std::size_t height, std::size_t width);

std::string metrics_json(const MetricsReport& r, int indent = 2);
MetricsReport parse_metrics_json(const std::string& text);
std::string history_csv(std::span<const train::IterationRecord> history);

struct ReportBundle {
  std::string name;
  MetricsReport metrics;
  std::vector<train::IterationRecord> history;
};
// Writes <prefix><name>_metrics.json and <prefix><name>_history.csv per bundle.
void report_emit(std::span<const ReportBundle> bundles, const std::filesystem::path& prefix);

}  // namespace clp::eval
