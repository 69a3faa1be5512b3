#pragma once

// SpurShapes: class-determined shapes composited onto backgrounds whose
// texture correlates with the class at a tunable rate, plus the bias
// regimes applied on top (long tail, label noise, clean metadata split)
// and the CLPD binary container.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace clp::data {

enum SampleFlag : std::uint8_t {
  kCounterfactual = 1u << 0,
  kFactual = 1u << 1,
  kLabelNoise = 1u << 2,
};

struct SampleRecord {
  std::vector<float> pixels;        // 3 x H x W, channel-major, in [0, 1]
  std::vector<std::uint8_t> mask;   // H x W, 1 = causal foreground
  std::uint16_t label = 0;
  std::uint16_t orig_label = 0;
  std::uint16_t group = 0;
  std::uint8_t flags = 0;

  bool counterfactual() const noexcept { return flags & kCounterfactual; }
  bool factual() const noexcept { return flags & kFactual; }
  bool noised() const noexcept { return flags & kLabelNoise; }

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::vector<std::string> steps;
};

class DatasetContainer {
 public:
  DatasetContainer() = default;
  DatasetContainer(std::size_t num_classes, std::size_t height, std::size_t width,
                   std::vector<SampleRecord> samples = {}, Provenance provenance = {});

  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t pixels_per_image() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }

  const std::vector<SampleRecord>& samples() const noexcept { return samples_; }
  const SampleRecord& operator[](std::size_t i) const { return samples_[i]; }
  // N_y per class, by observed label.
  const std::vector<std::size_t>& class_counts() const noexcept { return class_counts_; }
  const Provenance& provenance() const noexcept { return provenance_; }
  Provenance& provenance() noexcept { return provenance_; }

  // Throws ContractError if any sample violates the record invariants.
  void validate() const;

 private:
  std::size_t num_classes_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<SampleRecord> samples_;
  std::vector<std::size_t> class_counts_;
  Provenance provenance_;
};

struct SpurShapesConfig {
  std::size_t classes = 4;
  std::size_t backgrounds = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t n_per_class = 500;
  // Probability that a sample sits on its class-linked background k mod B.
  double spuriousness = 0.95;
  // Optional explicit classes x backgrounds counts; overrides n_per_class
  // and spuriousness when set.
  std::optional<std::vector<std::size_t>> group_counts;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kShapeLibrarySize = 6;
inline constexpr std::size_t kTextureLibrarySize = 8;

DatasetContainer synth_spurshapes(const SpurShapesConfig& cfg);

// Group counts with every (class, background) cell holding per_cell samples.
std::vector<std::size_t> balanced_group_counts(std::size_t classes, std::size_t backgrounds,
                                               std::size_t per_cell);

// RGB fill used for the foreground shape of class k.
std::array<float, 3> shape_hue(std::size_t k);

// Keeps floor(n * ratio^(-k/(C-1))) samples of class k.
std::vector<std::size_t> longtail_schedule(std::size_t n, std::size_t classes, double ratio);
DatasetContainer apply_longtail(const DatasetContainer& ds, double ratio, std::uint64_t seed);

enum class NoiseKind { None, Uniform, Flip };

NoiseKind parse_noise_kind(const std::string& s);
std::string to_string(NoiseKind k);

// confusable[k] lists the two classes a flipped label of class k may land on.
// Defaults to ring neighbours (k+1, k-1 mod C).
DatasetContainer inject_label_noise(
    const DatasetContainer& ds, NoiseKind kind, double ratio, std::uint64_t seed,
    const std::optional<std::vector<std::array<std::uint16_t, 2>>>& confusable = std::nullopt);

struct MetaSplit {
  DatasetContainer meta;
  DatasetContainer rest;
  std::vector<std::size_t> meta_indices;  // positions in the source dataset
};

// per_class clean samples per class, spread round-robin across groups.
MetaSplit draw_meta_subset(const DatasetContainer& ds, std::size_t per_class, std::uint64_t seed);

void write_container(const DatasetContainer& ds, const std::filesystem::path& path);
DatasetContainer read_container(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_container(const DatasetContainer& ds);
DatasetContainer decode_container(std::span<const std::uint8_t> bytes);

}  // namespace clp::data
