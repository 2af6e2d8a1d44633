#pragma once

// Boundary-weighted losses with deep supervision, Adam with a frozen set,
// the fine-tuning loop, the denoising backbone pretrainer and checkpoints.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "elnet/maskio.hpp"
#include "elnet/model.hpp"

namespace elnet::train {

using maskio::GrayImage;
using maskio::Mask;
using model::ModelConfig;
using model::ParamStore;
using ndarr::Tensor;

struct LossConfig {
  double lambda = 0.5;
  std::array<double, 3> alpha{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double boundary_mu = 5.0;
  std::size_t boundary_window = 15;
  double prob_clip = 1e-7;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 12;
  double learning_rate = 1e-3;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  std::vector<std::size_t> checkpoint_epochs;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

// Per-pixel weights 1 + mu * |meanpool(g) - g| with an edge-padded
// window x window box filter.
template <class T>
Tensor<T> boundary_weight(const Mask& g, const LossConfig& cfg);

// Ground truth and weights for a batch, both [N,1,H,W].
template <class T>
struct Targets {
  Tensor<T> g;
  Tensor<T> w;
};

template <class T>
Targets<T> make_targets(const std::vector<Mask>& masks, const LossConfig& cfg);

// Per-sample losses averaged over the batch. prob_clip bounds sigmoid output.
template <class T>
Tensor<T> wbce_loss(const Tensor<T>& logits, const Tensor<T>& g, const Tensor<T>& w, double prob_clip);
template <class T>
Tensor<T> wiou_loss(const Tensor<T>& logits, const Tensor<T>& g, const Tensor<T>& w, double prob_clip);
template <class T>
Tensor<T> combined_loss(const Tensor<T>& logits, const Targets<T>& t, const LossConfig& cfg);
template <class T>
Tensor<T> total_loss(const std::array<Tensor<T>, 3>& heads, const Targets<T>& t, const LossConfig& cfg);

struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

struct AdamParams {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Coupled L2 decay (added to the gradient) with bias correction. Only
// optimizable tensors move; frozen tensors and buffers are never touched.
template <class T>
void adam_step(ParamStore<T>& store, AdamState& state, const AdamParams& p);

struct Sample {
  GrayImage image;
  Mask label;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double lr = 0;
};

struct FinetuneResult {
  ParamStore<float> store;
  std::map<std::size_t, ParamStore<float>> snapshots;
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;
  AdamState optimizer;
  std::string rng_state;  // shuffling generator after the last epoch
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Shuffled mini-batch training of the optimizable tensors of `init`.
// Backbone batch norm runs in eval mode so frozen buffers stay fixed.
FinetuneResult finetune(const std::vector<Sample>& samples, const ParamStore<float>& init, const TrainConfig& tcfg,
                        const LossConfig& lcfg, const ModelConfig& mcfg, const EpochCallback& on_epoch = {});

struct PretrainResult {
  ParamStore<float> backbone;  // backbone.* tensors only, all frozen
  std::vector<double> epoch_losses;
};

// Denoising pretraining of the backbone through a throwaway reconstruction head.
PretrainResult pretrain_backbone(const std::vector<GrayImage>& images, const TrainConfig& tcfg, const ModelConfig& mcfg,
                                 double noise_sigma = 0.1, const EpochCallback& on_epoch = {});

// --- checkpoints -------------------------------------------------------------------

struct Checkpoint {
  ModelConfig model;
  ParamStore<float> store;
  std::optional<AdamState> optimizer;
  std::size_t epoch = 0;
  std::string rng_state;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

inline constexpr char kCheckpointMagic[4] = {'E', 'L', 'N', '1'};
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

// Copies matching tensors from `src` into `dst`. Every copied tensor must
// exist in dst with an identical shape; mismatches name the tensor.
void load_into(ParamStore<float>& dst, const ParamStore<float>& src, bool backbone_only = false);

// Model parameters for fine-tuning: fresh trainable tensors plus the frozen
// backbone taken from a backbone checkpoint.
ParamStore<float> init_from_backbone(const ModelConfig& mcfg, const Checkpoint& backbone, std::uint64_t seed);

// Labeled samples of a manifest (records with a label_path and not flagged).
std::vector<Sample> load_samples(const maskio::DatasetManifest& m, std::optional<maskio::Split> split = maskio::Split::kTrain);

}  // namespace elnet::train
