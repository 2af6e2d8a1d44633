#pragma once

// Binary masks, grayscale images, segmentation metrics and dataset manifests.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "elnet/error.hpp"

namespace elnet::maskio {

namespace fs = std::filesystem;

// H x W grid of {0,1}; 1 is foreground.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t height, std::size_t width, std::uint8_t fill = 0);
  Mask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return bits_.size(); }
  bool empty() const { return bits_.empty(); }

  std::uint8_t at(std::size_t y, std::size_t x) const { return bits_[y * width_ + x]; }
  void set(std::size_t y, std::size_t x, bool on) { bits_[y * width_ + x] = on ? 1 : 0; }
  std::uint8_t operator[](std::size_t i) const { return bits_[i]; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  std::size_t count() const;
  Mask complement() const;
  Mask transposed() const;

  bool operator==(const Mask&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> bits_;
};

// Planar float image, values in [0,1]. values[(c*H + y)*W + x].
class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(std::size_t height, std::size_t width, std::size_t channels = 1, float fill = 0.f);
  GrayImage(std::size_t height, std::size_t width, std::size_t channels, std::vector<float> values);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return values_[(c * height_ + y) * width_ + x]; }
  void set(std::size_t c, std::size_t y, std::size_t x, float v);
  const std::vector<float>& values() const { return values_; }

  bool operator==(const GrayImage&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 1;
  std::vector<float> values_;
};

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::uint64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

// --- file IO -------------------------------------------------------------------
// PNG (8-bit gray, gray+alpha, RGB, RGBA) and binary PGM (P5, maxval 255).
// Format is chosen by extension on write and by signature on read.

Mask load_mask(const fs::path& path);
void save_mask(const Mask& mask, const fs::path& path);
GrayImage load_image(const fs::path& path);
void save_image(const GrayImage& image, const fs::path& path);

// Intensity >= 128 is foreground.
constexpr int kMaskThreshold = 128;

// --- metrics -------------------------------------------------------------------

ConfusionCounts confusion(const Mask& pred, const Mask& gt);
double accuracy(const ConfusionCounts& c);
// Both empty -> 1.0, exactly one empty -> 0.0.
double iou(const Mask& a, const Mask& b);
double dice(const Mask& a, const Mask& b);
// Two-class mean IoU; a class absent from both prediction and truth scores 1.0.
double miou(const ConfusionCounts& c);
double miou(const Mask& pred, const Mask& gt);

struct MetricReport {
  struct Entry {
    std::string name;
    double acc = 0;
    double miou = 0;
  };
  double acc = 0;   // pooled over all pixels
  double miou = 0;  // from pooled counts
  std::vector<Entry> per_image;
  nlohmann::ordered_json to_json() const;
};

MetricReport evaluate_pairs(const std::vector<std::pair<std::string, std::pair<Mask, Mask>>>& named_pred_gt);

// --- manifests -------------------------------------------------------------------

enum class Split { kTrain, kTest };
enum class Provenance { kManual, kCoarse, kAuto, kEnhanced, kFlagged };

std::string to_string(Split s);
std::string to_string(Provenance p);
Split parse_split(const std::string& s);
Provenance parse_provenance(const std::string& s);

struct ManifestRecord {
  std::string image_path;
  std::optional<std::string> label_path;
  Split split = Split::kTrain;
  Provenance provenance = Provenance::kCoarse;
  std::optional<double> quality;
  // Fields this library does not interpret, kept in their original order.
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  // Relative paths inside records resolve against this directory.
  fs::path base_dir;

  fs::path resolve(const std::string& p) const;
  const ManifestRecord* find(const std::string& image_path) const;
  void validate() const;
  bool operator==(const DatasetManifest& o) const { return records == o.records; }
};

ManifestRecord record_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json record_to_json(const ManifestRecord& r);

// JSON Lines, one record per line. Errors name the offending line.
DatasetManifest read_manifest(const fs::path& path);
void write_manifest(const DatasetManifest& m, const fs::path& path);
std::string manifest_to_string(const DatasetManifest& m);

}  // namespace elnet::maskio
