#pragma once

// Synthetic SAR-like benchmark with exact ground truth, a coarse-annotation
// corruptor, and the three-test-set label quality protocol.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "elnet/maskio.hpp"
#include "elnet/train.hpp"

namespace elnet::synth {

using maskio::DatasetManifest;
using maskio::GrayImage;
using maskio::Mask;

struct SceneSpec {
  std::size_t size = 64;
  std::size_t blobs_min = 1, blobs_max = 3;
  std::size_t ribbons_min = 0, ribbons_max = 2;
  // Blob base radius as a fraction of the scene size.
  double blob_radius_min = 0.08, blob_radius_max = 0.18;
  double ribbon_width_min = 2.0, ribbon_width_max = 4.0;  // full width in pixels
  // Standard deviation of the unit-mean gamma speckle; 0 disables it.
  double speckle = 0.3;
  double background = 0.65;
  // Target intensity is background * (1 - contrast).
  double contrast = 0.55;
  // Upper bound on the foreground fraction; shapes that would exceed it are skipped.
  double fg_budget = 0.35;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

struct CorruptionSpec {
  double poly_tolerance = 1.5;  // Douglas-Peucker tolerance in pixels; 0 disables
  double morph_rate = 0.7;      // probability of a dilation or erosion
  std::size_t morph_radius_min = 1, morph_radius_max = 2;
  double fp_rate = 0.3;         // probability of one false-positive blob
  double omission_rate = 0.15;  // per connected component
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

struct Scene {
  GrayImage image;
  Mask gt;
};

Scene gen_scene(const SceneSpec& spec);
Mask corrupt_label(const Mask& gt, const CorruptionSpec& spec);

// Helpers shared with tests.
std::vector<Mask> connected_components(const Mask& m);
Mask dilate(const Mask& m, std::size_t radius);
Mask erode(const Mask& m, std::size_t radius);
Mask polygonize(const Mask& m, double tolerance);

struct BenchmarkItem {
  std::string name;
  GrayImage image;
  Mask gt;
  Mask coarse;
  maskio::Split split = maskio::Split::kTrain;
};

// Per-item seeds derive from the spec seeds; the last round(n * test_fraction)
// items form the test split.
std::vector<BenchmarkItem> gen_benchmark(std::size_t n, const SceneSpec& scene, const CorruptionSpec& corruption,
                                         double test_fraction = 0.2);

// Writes images/, gt/, coarse/ and manifest.jsonl under out_dir. Records point
// at the coarse labels; the exact mask path is kept in the extra field gt_path.
DatasetManifest gen_dataset(std::size_t n, const SceneSpec& scene, const CorruptionSpec& corruption,
                            const std::filesystem::path& out_dir, double test_fraction = 0.2);

// --- reference network ------------------------------------------------------------------
// Three-layer convolutional net trained from scratch. Independent of the
// label generation network so that label quality is judged externally.

struct RefNetConfig {
  std::size_t hidden = 16;
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  std::uint64_t seed = 7;

  nlohmann::ordered_json to_json() const;
};

struct RefNet {
  model::ParamStore<float> params;
  std::size_t in_channels = 1;
};

RefNet train_refnet(const std::vector<train::Sample>& samples, const RefNetConfig& cfg);
std::vector<Mask> refnet_predict(RefNet& net, const std::vector<GrayImage>& images);

struct ProtocolRow {
  std::string test_set;
  double miou = 0, delta_miou = 0, acc = 0, delta_acc = 0;
};

struct ProtocolReport {
  std::vector<ProtocolRow> rows;  // Test-HQ, Test-Orig, Test-Enh
  nlohmann::ordered_json to_json() const;
  const ProtocolRow& row(const std::string& name) const;
};

// Trains the reference network on `train`, predicts the test images and scores
// those predictions against each test label set. Delta = metric(HQ) - metric(X).
ProtocolReport eval_protocol(const std::vector<train::Sample>& train, const std::vector<GrayImage>& test_images,
                             const std::vector<Mask>& test_hq, const std::vector<Mask>& test_orig,
                             const std::vector<Mask>& test_enh, const RefNetConfig& cfg);

// Manifest form: the three test manifests must list the same images.
ProtocolReport eval_protocol(const DatasetManifest& train, const DatasetManifest& test_hq,
                             const DatasetManifest& test_orig, const DatasetManifest& test_enh,
                             const RefNetConfig& cfg);

}  // namespace elnet::synth
