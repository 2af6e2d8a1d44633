#pragma once

// Five-stage iterative label generation: prepare pools, fine-tune, generate
// and filter with the quality evaluator, refine on retained labels, repeat.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "elnet/lqe.hpp"
#include "elnet/model.hpp"
#include "elnet/synth.hpp"
#include "elnet/train.hpp"

namespace elnet::pipeline {

namespace fs = std::filesystem;
using maskio::DatasetManifest;
using maskio::GrayImage;
using maskio::Mask;

enum class Mode { kEnhance, kAnnotate };
std::string to_string(Mode m);
Mode parse_mode(const std::string& s);

struct PipelineConfig {
  Mode mode = Mode::kEnhance;
  std::size_t loop_count = 3;
  lqe::LqeConfig lqe;
  train::TrainConfig train;
  train::LossConfig loss;
  model::ModelConfig model;
  // Snapshot selectors as offsets from the last epoch of a training run
  // (0 = last). One selector serves all three perturbations; three map to
  // them in order.
  std::vector<std::size_t> ensemble_checkpoints{2, 1, 0};
  // Stage 4 epoch budget; 0 means train.epochs / 4.
  std::size_t refine_epochs = 0;
  // Stage 4 restarts from the backbone instead of the current weights.
  bool cold_start = false;
  double noise_sigma = perturb::kDefaultNoiseSigma;
  // Backbone pretraining when no backbone checkpoint is supplied.
  std::size_t pretrain_epochs = 20;
  std::string backbone_checkpoint;
  std::uint64_t seed = 0;
  // Outputs are written here when non-empty.
  std::string out_dir;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  std::size_t effective_refine_epochs() const;
};

struct IterationStats {
  std::size_t iteration = 0;
  std::size_t evaluated = 0;
  std::size_t retained = 0;
  std::size_t flagged = 0;
  std::size_t cumulative_retained = 0;
  double mean_q = 0;           // over evaluated records
  double mean_q_retained = 0;  // over retained records, 0 when none
  std::size_t train_size = 0;  // samples used by the preceding fine-tune
  bool refined = false;        // stage 4 ran after this stage 3

  nlohmann::ordered_json to_json() const;
};

struct Snapshot {
  std::string id;
  model::ParamStore<float> params;
};

struct PipelineState {
  std::size_t iteration = 0;  // completed stage 3 executions
  DatasetManifest manifest;   // provenance and labels as of now
  std::vector<std::size_t> labeled_pool;
  std::vector<std::size_t> unlabeled_pool;
  std::vector<std::size_t> targets;  // records stage 3 evaluates
  std::map<std::string, Mask> labels;          // current label per image path
  std::map<std::string, Mask> generated;       // accepted generated labels
  std::set<std::string> ever_flagged_only;     // flagged and never accepted
  std::map<std::string, GrayImage> images;
  model::ParamStore<float> backbone;
  model::ParamStore<float> current;
  std::vector<Snapshot> checkpoints;
  std::vector<IterationStats> stats;
  nlohmann::ordered_json reports = nlohmann::ordered_json::array();
  std::size_t last_train_size = 0;
  std::size_t fit_runs = 0;
};

struct PipelineResult {
  DatasetManifest manifest;  // every record, rebased onto out_dir when written
  DatasetManifest flagged;
  std::vector<IterationStats> stats;
  nlohmann::ordered_json reports;
  std::map<std::string, Mask> labels;  // final label per image path
  model::ParamStore<float> final_params;
  std::vector<Snapshot> checkpoints;
};

// Stage functions mutate the state in order. `log` receives progress lines.
PipelineState stage1_prepare(const PipelineConfig& cfg, const DatasetManifest& manifest,
                             const train::Checkpoint& backbone, std::ostream* log = nullptr);
void stage2_finetune(const PipelineConfig& cfg, PipelineState& st, std::ostream* log = nullptr);
void stage3_generate_and_filter(const PipelineConfig& cfg, PipelineState& st, std::ostream* log = nullptr);
void stage4_refine(const PipelineConfig& cfg, PipelineState& st, std::ostream* log = nullptr);

// Stage 3 building block: the aligned predictions of the configured
// checkpoints on the three perturbed copies of each image.
std::vector<lqe::PredictionEnsemble> generate_ensembles(const std::vector<GrayImage>& images,
                                                        const std::vector<std::uint64_t>& seeds,
                                                        std::vector<Snapshot>& checkpoints,
                                                        const model::ModelConfig& mcfg, double noise_sigma);

// Pixelwise majority of the three aligned predictions.
Mask majority(const lqe::PredictionEnsemble& e);

// Backbone from cfg.backbone_checkpoint, or pretrained on the manifest's images.
train::Checkpoint obtain_backbone(const PipelineConfig& cfg, const DatasetManifest& manifest,
                                  std::ostream* log = nullptr);

PipelineResult run(const PipelineConfig& cfg, const DatasetManifest& manifest, std::ostream* log = nullptr);
PipelineResult run(const PipelineConfig& cfg, const DatasetManifest& manifest, const train::Checkpoint& backbone,
                   std::ostream* log = nullptr);

// Writes manifests, stats, reports, masks and checkpoints under cfg.out_dir.
void write_outputs(const PipelineConfig& cfg, const PipelineState& st, bool finished);

// --- label-quality protocol on pipeline output ----------------------------------

// Test-HQ from the gt_path extra field, Test-Orig from the input labels and
// Test-Enh from the pipeline labels (flagged test records keep their input
// label). The reference net trains on the input training labels.
synth::ProtocolReport enhancement_protocol(const DatasetManifest& input, const PipelineResult& result,
                                           const synth::RefNetConfig& rcfg);

struct AblationReport {
  synth::ProtocolReport with_eam;
  synth::ProtocolReport without_eam;
  std::size_t differing_pixels = 0;  // final checkpoints on the test images
  bool eam_closer_to_hq = false;
  nlohmann::ordered_json to_json() const;
};

AblationReport ablate_eam(const PipelineConfig& cfg, const DatasetManifest& manifest, const train::Checkpoint& backbone,
                          const synth::RefNetConfig& rcfg, std::ostream* log = nullptr);

}  // namespace elnet::pipeline
