#pragma once

// Label quality evaluator: scores the agreement of three aligned predictions
// of the same image and decides whether the resulting label is kept.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "elnet/maskio.hpp"
#include "elnet/perturb.hpp"

namespace elnet::lqe {

using maskio::DatasetManifest;
using maskio::Mask;

struct PredictionEnsemble {
  std::array<Mask, 3> predictions;  // already aligned to the original frame
  std::array<std::string, 3> checkpoint_ids;
  std::array<perturb::PerturbSpec, 3> specs;

  void validate() const;
};

struct LqeConfig {
  std::array<double, 3> beta{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double tau_q = 0.85;
  double tau_r = 0.80;     // minimum 1 - r_mean
  double tau_iou = 0.70;
  double tau_dice = 0.80;

  void validate() const;
};

enum class Verdict { kRetain, kFlag };
std::string to_string(Verdict v);

struct QualityReport {
  double r_mean = 0;
  double iou_avg = 0;
  double dice_avg = 0;
  double q = 0;
  Verdict verdict = Verdict::kFlag;
  std::array<double, 3> pair_iou{};   // (0,1), (0,2), (1,2)
  std::array<double, 3> pair_dice{};
};

struct PairwiseConsistency {
  double iou_avg = 0;
  double dice_avg = 0;
  std::array<double, 3> pair_iou{};
  std::array<double, 3> pair_dice{};
};

// Mean over pixels of the per-pixel RMSE around the ensemble mean.
double pixel_rmse(const PredictionEnsemble& e);
PairwiseConsistency pairwise_consistency(const PredictionEnsemble& e);
double quality_score(double r_mean, double iou_avg, double dice_avg, const LqeConfig& cfg);
// Flags when 1-r_mean, iou_avg, dice_avg or q falls strictly below its threshold.
QualityReport evaluate(const PredictionEnsemble& e, const LqeConfig& cfg);

struct FilterResult {
  DatasetManifest retained;
  DatasetManifest flagged;
  std::vector<std::pair<std::string, QualityReport>> reports;  // manifest order
};

// Retained records take provenance `retained_as` (auto or enhanced) and quality Q.
FilterResult filter_dataset(const DatasetManifest& manifest, const std::map<std::string, PredictionEnsemble>& ensembles,
                            const LqeConfig& cfg, maskio::Provenance retained_as = maskio::Provenance::kAuto);

nlohmann::ordered_json report_to_json(const std::string& image_path, const QualityReport& r,
                                      const PredictionEnsemble* provenance = nullptr);

}  // namespace elnet::lqe
