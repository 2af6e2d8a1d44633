#pragma once

// Test-time perturbations and their exact spatial inverses.

#include <array>
#include <cstdint>
#include <variant>

#include "elnet/maskio.hpp"

namespace elnet::perturb {

using maskio::GrayImage;
using maskio::Mask;

struct GaussNoise {
  double sigma = 0.05;
};
struct HFlip {};
// Counter-clockwise rotation by k * 90 degrees.
struct Rot90 {
  int k = 1;
};

struct PerturbSpec {
  std::variant<GaussNoise, HFlip, Rot90> kind;
  std::uint64_t seed = 0;

  void validate() const;
  std::string kind_name() const;
  bool operator==(const PerturbSpec& o) const;
};

constexpr double kDefaultNoiseSigma = 0.05;

GrayImage apply_image(const GrayImage& img, const PerturbSpec& spec);
// Spatial part of the perturbation applied to a mask (noise is the identity).
Mask apply_mask(const Mask& m, const PerturbSpec& spec);
// Maps a prediction made on a perturbed input back to the original frame.
Mask align_prediction(const Mask& pred, const PerturbSpec& spec);
// Expected prediction shape for an input of the given size.
std::pair<std::size_t, std::size_t> transformed_shape(std::size_t height, std::size_t width, const PerturbSpec& spec);

// One noise, one flip and one rotation spec, derived from the seed.
std::array<PerturbSpec, 3> make_ensemble_specs(std::uint64_t seed, double sigma = kDefaultNoiseSigma);

nlohmann::ordered_json to_json(const PerturbSpec& spec);
PerturbSpec spec_from_json(const nlohmann::ordered_json& j);

// splitmix64 step; used wherever per-item seeds are derived.
std::uint64_t mix_seed(std::uint64_t x);

}  // namespace elnet::perturb
