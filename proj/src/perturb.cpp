#include "elnet/perturb.hpp"

#include <random>

namespace elnet::perturb {

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void PerturbSpec::validate() const {
  if (const auto* g = std::get_if<GaussNoise>(&kind)) {
    if (!(g->sigma > 0)) throw ConfigError("perturb: gauss_noise sigma must be > 0");
  } else if (const auto* r = std::get_if<Rot90>(&kind)) {
    if (r->k < 1 || r->k > 3) throw ConfigError("perturb: rot90 k must be in {1,2,3}");
  }
}

std::string PerturbSpec::kind_name() const {
  if (std::holds_alternative<GaussNoise>(kind)) return "gauss_noise";
  if (std::holds_alternative<HFlip>(kind)) return "hflip";
  return "rot90";
}

bool PerturbSpec::operator==(const PerturbSpec& o) const {
  if (seed != o.seed || kind.index() != o.kind.index()) return false;
  if (const auto* g = std::get_if<GaussNoise>(&kind)) return g->sigma == std::get<GaussNoise>(o.kind).sigma;
  if (const auto* r = std::get_if<Rot90>(&kind)) return r->k == std::get<Rot90>(o.kind).k;
  return true;
}

namespace {

// Spatial transform of one H x W plane. get(y, x) reads the source.
template <class V, class Get>
std::vector<V> transform_plane(std::size_t h, std::size_t w, const PerturbSpec& spec, Get get) {
  std::vector<V> out(h * w);
  if (std::holds_alternative<HFlip>(spec.kind)) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[y * w + x] = get(y, w - 1 - x);
    return out;
  }
  const int k = std::get<Rot90>(spec.kind).k;
  if (k == 2) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[y * w + x] = get(h - 1 - y, w - 1 - x);
    return out;
  }
  // Output is w x h.
  for (std::size_t y = 0; y < w; ++y)
    for (std::size_t x = 0; x < h; ++x) out[y * h + x] = (k == 1) ? get(x, w - 1 - y) : get(h - 1 - x, y);
  return out;
}

PerturbSpec inverse(const PerturbSpec& spec) {
  PerturbSpec inv = spec;
  if (const auto* r = std::get_if<Rot90>(&spec.kind)) inv.kind = Rot90{4 - r->k};
  return inv;
}

}  // namespace

std::pair<std::size_t, std::size_t> transformed_shape(std::size_t height, std::size_t width, const PerturbSpec& spec) {
  if (const auto* r = std::get_if<Rot90>(&spec.kind); r && r->k % 2 == 1) return {width, height};
  return {height, width};
}

GrayImage apply_image(const GrayImage& img, const PerturbSpec& spec) {
  spec.validate();
  const std::size_t h = img.height(), w = img.width(), ch = img.channels();
  if (const auto* g = std::get_if<GaussNoise>(&spec.kind)) {
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> noise(0.0, g->sigma);
    std::vector<float> values = img.values();
    for (auto& v : values) v = static_cast<float>(v + noise(rng));
    // GrayImage clamps to [0,1].
    return GrayImage(h, w, ch, std::move(values));
  }
  const auto [oh, ow] = transformed_shape(h, w, spec);
  std::vector<float> values;
  values.reserve(h * w * ch);
  for (std::size_t c = 0; c < ch; ++c) {
    auto plane = transform_plane<float>(h, w, spec, [&](std::size_t y, std::size_t x) { return img.at(c, y, x); });
    values.insert(values.end(), plane.begin(), plane.end());
  }
  return GrayImage(oh, ow, ch, std::move(values));
}

Mask apply_mask(const Mask& m, const PerturbSpec& spec) {
  spec.validate();
  if (std::holds_alternative<GaussNoise>(spec.kind)) return m;
  const auto [oh, ow] = transformed_shape(m.height(), m.width(), spec);
  return Mask(oh, ow,
              transform_plane<std::uint8_t>(m.height(), m.width(), spec,
                                            [&](std::size_t y, std::size_t x) { return m.at(y, x); }));
}

Mask align_prediction(const Mask& pred, const PerturbSpec& spec) {
  spec.validate();
  // A prediction on a k-rotated input has the rotated shape; its inverse
  // restores the original frame.
  return apply_mask(pred, inverse(spec));
}

std::array<PerturbSpec, 3> make_ensemble_specs(std::uint64_t seed, double sigma) {
  const std::uint64_t s0 = mix_seed(seed), s1 = mix_seed(seed + 1), s2 = mix_seed(seed + 2);
  std::array<PerturbSpec, 3> specs{PerturbSpec{GaussNoise{sigma}, s0}, PerturbSpec{HFlip{}, s1},
                                   PerturbSpec{Rot90{static_cast<int>(1 + s2 % 3)}, s2}};
  for (const auto& s : specs) s.validate();
  return specs;
}

nlohmann::ordered_json to_json(const PerturbSpec& spec) {
  nlohmann::ordered_json j;
  j["kind"] = spec.kind_name();
  if (const auto* g = std::get_if<GaussNoise>(&spec.kind)) j["sigma"] = g->sigma;
  if (const auto* r = std::get_if<Rot90>(&spec.kind)) j["k"] = r->k;
  j["seed"] = spec.seed;
  return j;
}

PerturbSpec spec_from_json(const nlohmann::ordered_json& j) {
  PerturbSpec s;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "gauss_noise") {
    s.kind = GaussNoise{j.at("sigma").get<double>()};
  } else if (kind == "hflip") {
    s.kind = HFlip{};
  } else if (kind == "rot90") {
    s.kind = Rot90{j.at("k").get<int>()};
  } else {
    throw FormatError("unknown perturbation kind '" + kind + "'");
  }
  s.seed = j.value("seed", std::uint64_t{0});
  s.validate();
  return s;
}

}  // namespace elnet::perturb
