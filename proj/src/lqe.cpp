#include "elnet/lqe.hpp"

#include <cmath>

namespace elnet::lqe {

void PredictionEnsemble::validate() const {
  for (const auto& p : predictions) {
    if (p.empty()) throw ShapeError("ensemble: empty prediction");
    if (p.height() != predictions[0].height() || p.width() != predictions[0].width())
      throw ShapeError("ensemble: predictions must share one shape");
  }
}

void LqeConfig::validate() const {
  double s = 0;
  for (double b : beta) {
    if (b < 0) throw ConfigError("lqe.beta: weights must be non-negative");
    s += b;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ConfigError("lqe.beta: weights must sum to 1");
  for (auto [name, t] : {std::pair{"lqe.tau_q", tau_q}, {"lqe.tau_r", tau_r}, {"lqe.tau_iou", tau_iou},
                         {"lqe.tau_dice", tau_dice}}) {
    if (t < 0 || t > 1) throw ConfigError(std::string(name) + ": threshold must lie in [0,1]");
  }
}

std::string to_string(Verdict v) { return v == Verdict::kRetain ? "retain" : "flag"; }

double pixel_rmse(const PredictionEnsemble& e) {
  e.validate();
  const std::size_t n = e.predictions[0].size();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p0 = e.predictions[0][i], p1 = e.predictions[1][i], p2 = e.predictions[2][i];
    const double mean = (p0 + p1 + p2) / 3.0;
    const double ms = ((p0 - mean) * (p0 - mean) + (p1 - mean) * (p1 - mean) + (p2 - mean) * (p2 - mean)) / 3.0;
    total += std::sqrt(ms);
  }
  return total / static_cast<double>(n);
}

PairwiseConsistency pairwise_consistency(const PredictionEnsemble& e) {
  e.validate();
  PairwiseConsistency pc;
  constexpr std::array<std::pair<int, int>, 3> kPairs{{{0, 1}, {0, 2}, {1, 2}}};
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& a = e.predictions[kPairs[k].first];
    const auto& b = e.predictions[kPairs[k].second];
    pc.pair_iou[k] = maskio::iou(a, b);
    pc.pair_dice[k] = maskio::dice(a, b);
  }
  pc.iou_avg = (pc.pair_iou[0] + pc.pair_iou[1] + pc.pair_iou[2]) / 3.0;
  pc.dice_avg = (pc.pair_dice[0] + pc.pair_dice[1] + pc.pair_dice[2]) / 3.0;
  return pc;
}

double quality_score(double r_mean, double iou_avg, double dice_avg, const LqeConfig& cfg) {
  cfg.validate();
  return cfg.beta[0] * (1.0 - r_mean) + cfg.beta[1] * iou_avg + cfg.beta[2] * dice_avg;
}

QualityReport evaluate(const PredictionEnsemble& e, const LqeConfig& cfg) {
  QualityReport r;
  r.r_mean = pixel_rmse(e);
  const auto pc = pairwise_consistency(e);
  r.iou_avg = pc.iou_avg;
  r.dice_avg = pc.dice_avg;
  r.pair_iou = pc.pair_iou;
  r.pair_dice = pc.pair_dice;
  r.q = quality_score(r.r_mean, r.iou_avg, r.dice_avg, cfg);
  const bool low = (1.0 - r.r_mean) < cfg.tau_r || r.iou_avg < cfg.tau_iou || r.dice_avg < cfg.tau_dice ||
                   r.q < cfg.tau_q;
  r.verdict = low ? Verdict::kFlag : Verdict::kRetain;
  return r;
}

FilterResult filter_dataset(const DatasetManifest& manifest, const std::map<std::string, PredictionEnsemble>& ensembles,
                            const LqeConfig& cfg, maskio::Provenance retained_as) {
  cfg.validate();
  FilterResult out;
  out.retained.base_dir = manifest.base_dir;
  out.flagged.base_dir = manifest.base_dir;
  for (const auto& rec : manifest.records) {
    auto it = ensembles.find(rec.image_path);
    if (it == ensembles.end()) throw Error("filter_dataset: no ensemble for " + rec.image_path);
  }
  for (const auto& rec : manifest.records) {
    const auto rep = evaluate(ensembles.at(rec.image_path), cfg);
    auto copy = rec;
    if (rep.verdict == Verdict::kRetain) {
      copy.provenance = retained_as;
      copy.quality = rep.q;
      out.retained.records.push_back(std::move(copy));
    } else {
      copy.provenance = maskio::Provenance::kFlagged;
      copy.quality = rep.q;
      out.flagged.records.push_back(std::move(copy));
    }
    out.reports.emplace_back(rec.image_path, rep);
  }
  return out;
}

nlohmann::ordered_json report_to_json(const std::string& image_path, const QualityReport& r,
                                      const PredictionEnsemble* provenance) {
  nlohmann::ordered_json j;
  j["image_path"] = image_path;
  j["r_mean"] = r.r_mean;
  j["iou_avg"] = r.iou_avg;
  j["dice_avg"] = r.dice_avg;
  j["q"] = r.q;
  j["verdict"] = to_string(r.verdict);
  j["pair_iou"] = r.pair_iou;
  j["pair_dice"] = r.pair_dice;
  if (provenance) {
    j["checkpoints"] = provenance->checkpoint_ids;
    auto specs = nlohmann::ordered_json::array();
    for (const auto& s : provenance->specs) specs.push_back(perturb::to_json(s));
    j["perturbations"] = specs;
  }
  return j;
}

}  // namespace elnet::lqe
