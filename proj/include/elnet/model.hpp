#pragma once

// Label generation network: a frozen four-stage convolutional backbone with
// trainable bottleneck adapters in front of every stage, receptive field
// blocks projecting each stage to 64 channels, and a three-block U-Net style
// decoder with an edge attention gate after every upsampling and one logit
// head per block.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "elnet/maskio.hpp"
#include "elnet/ndarr.hpp"

namespace elnet::model {

using ndarr::BnMode;
using ndarr::Tensor;

struct ModelConfig {
  std::size_t in_channels = 1;
  std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
  std::size_t adapter_bottleneck = 8;
  static constexpr std::size_t rfb_out = 64;
  std::size_t rfb_branch_channels = 16;
  std::size_t decoder_channels = 64;
  bool adapter_residual = true;
  bool eam_enabled = true;
  // Conv bias in the attention and receptive-field convolutions.
  bool block_bias = false;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::ordered_json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Named tensors split into a frozen and a trainable partition. Buffers
// (batch-norm running statistics) belong to a partition but never receive
// gradients.
template <class T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> tensor;
    bool frozen = false;
    bool buffer = false;
  };

  void add(const std::string& name, Tensor<T> tensor, bool frozen, bool buffer = false);
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  Tensor<T>& get(const std::string& name);
  const Tensor<T>& get(const std::string& name) const;
  const Entry& entry(const std::string& name) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

  std::vector<std::string> names() const;
  std::vector<std::string> frozen_names() const;
  std::vector<std::string> trainable_names() const;
  // Trainable, non-buffer tensors: the optimizer's domain.
  std::vector<std::string> optimizable_names() const;

  // Gradients on for optimizable tensors, off for everything else.
  void prepare_for_training();
  void set_all_requires_grad(bool on);
  void zero_grads();

  ParamStore clone() const;
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.tensor.template cast<U>(), e.frozen, e.buffer);
    return out;
  }

  void set_frozen(const std::string& name, bool frozen);
  void erase(const std::string& name) { entries_.erase(name); }

 private:
  std::map<std::string, Entry> entries_;
};

struct ForwardMode {
  BnMode backbone = BnMode::kEval;
  BnMode head = BnMode::kEval;
  bool use_adapters = true;

  static ForwardMode inference() { return {}; }
  static ForwardMode finetune() { return {BnMode::kEval, BnMode::kTrain, true}; }
};

template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

// Names with this prefix form the frozen backbone.
inline constexpr const char* kBackbonePrefix = "backbone.";

template <class T>
Tensor<T> adapter_forward(const Tensor<T>& x, ParamStore<T>& store, const std::string& prefix, bool residual);

template <class T>
Tensor<T> rfb_forward(const Tensor<T>& x, ParamStore<T>& store, const std::string& prefix, bool bias);

// Returns (x * gate, gate) with gate = sigmoid(BN(conv3x3(x))).
template <class T>
std::pair<Tensor<T>, Tensor<T>> eam_forward(const Tensor<T>& x, ParamStore<T>& store, const std::string& prefix,
                                            BnMode mode, bool bias);

template <class T>
std::array<Tensor<T>, 4> encoder_forward(const Tensor<T>& img, ParamStore<T>& store, const ModelConfig& cfg,
                                         const ForwardMode& mode);

template <class T>
std::array<Tensor<T>, 4> rfbs_forward(const std::array<Tensor<T>, 4>& features, ParamStore<T>& store,
                                      const ModelConfig& cfg);

// r: four [N,64,.,.] maps, finest first. Returns S1..S3 at out_h x out_w;
// S3 comes from the finest decoder block.
template <class T>
std::array<Tensor<T>, 3> decoder_forward(const std::array<Tensor<T>, 4>& r, ParamStore<T>& store,
                                         const ModelConfig& cfg, const ForwardMode& mode, std::size_t out_h,
                                         std::size_t out_w);

template <class T>
std::array<Tensor<T>, 3> forward(const Tensor<T>& img, ParamStore<T>& store, const ModelConfig& cfg,
                                 const ForwardMode& mode);

// [N,C,H,W] from images of identical size and channel count.
template <class T>
Tensor<T> images_to_tensor(const std::vector<maskio::GrayImage>& images);

// Foreground where sigmoid(logit) > threshold.
maskio::Mask logits_to_mask(std::span<const float> logits, std::size_t height, std::size_t width,
                            double threshold = 0.5);

maskio::Mask predict(const maskio::GrayImage& img, ParamStore<float>& store, const ModelConfig& cfg,
                     double threshold = 0.5);
std::vector<maskio::Mask> predict_batch(const std::vector<maskio::GrayImage>& imgs, ParamStore<float>& store,
                                        const ModelConfig& cfg, double threshold = 0.5);

}  // namespace elnet::model
