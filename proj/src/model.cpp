#include "elnet/model.hpp"

#include <cmath>
#include <random>

namespace elnet::model {

using ndarr::Shape;

void ModelConfig::validate() const {
  if (in_channels != 1 && in_channels != 3) throw ConfigError("model.in_channels: must be 1 or 3");
  for (auto c : stage_channels)
    if (c == 0) throw ConfigError("model.stage_channels: entries must be positive");
  if (adapter_bottleneck == 0) throw ConfigError("model.adapter_bottleneck: must be positive");
  if (rfb_branch_channels == 0) throw ConfigError("model.rfb_branch_channels: must be positive");
  if (decoder_channels == 0) throw ConfigError("model.decoder_channels: must be positive");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["in_channels"] = in_channels;
  j["stage_channels"] = stage_channels;
  j["adapter_bottleneck"] = adapter_bottleneck;
  j["rfb_out"] = rfb_out;
  j["rfb_branch_channels"] = rfb_branch_channels;
  j["decoder_channels"] = decoder_channels;
  j["adapter_residual"] = adapter_residual;
  j["eam_enabled"] = eam_enabled;
  j["block_bias"] = block_bias;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.stage_channels = j.at("stage_channels").get<std::array<std::size_t, 4>>();
  c.adapter_bottleneck = j.at("adapter_bottleneck").get<std::size_t>();
  if (j.value("rfb_out", std::size_t{rfb_out}) != rfb_out) throw ConfigError("model.rfb_out: fixed at 64");
  c.rfb_branch_channels = j.at("rfb_branch_channels").get<std::size_t>();
  c.decoder_channels = j.at("decoder_channels").get<std::size_t>();
  c.adapter_residual = j.at("adapter_residual").get<bool>();
  c.eam_enabled = j.at("eam_enabled").get<bool>();
  c.block_bias = j.value("block_bias", false);
  c.validate();
  return c;
}

// --- ParamStore --------------------------------------------------------------------

template <class T>
void ParamStore<T>::add(const std::string& name, Tensor<T> tensor, bool frozen, bool buffer) {
  if (!tensor.defined()) throw Error("param store: undefined tensor for " + name);
  entries_[name] = Entry{std::move(tensor), frozen, buffer};
}

template <class T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("param store: no tensor named " + name);
  return it->second.tensor;
}

template <class T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  return entry(name).tensor;
}

template <class T>
const typename ParamStore<T>::Entry& ParamStore<T>::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("param store: no tensor named " + name);
  return it->second;
}

template <class T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  for (const auto& [n, e] : entries_) out.push_back(n);
  return out;
}

template <class T>
std::vector<std::string> ParamStore<T>::frozen_names() const {
  std::vector<std::string> out;
  for (const auto& [n, e] : entries_)
    if (e.frozen) out.push_back(n);
  return out;
}

template <class T>
std::vector<std::string> ParamStore<T>::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [n, e] : entries_)
    if (!e.frozen) out.push_back(n);
  return out;
}

template <class T>
std::vector<std::string> ParamStore<T>::optimizable_names() const {
  std::vector<std::string> out;
  for (const auto& [n, e] : entries_)
    if (!e.frozen && !e.buffer) out.push_back(n);
  return out;
}

template <class T>
void ParamStore<T>::prepare_for_training() {
  for (auto& [n, e] : entries_) {
    e.tensor.set_requires_grad(!e.frozen && !e.buffer);
    e.tensor.clear_grad();
  }
}

template <class T>
void ParamStore<T>::set_all_requires_grad(bool on) {
  for (auto& [n, e] : entries_) e.tensor.set_requires_grad(on && !e.buffer);
}

template <class T>
void ParamStore<T>::zero_grads() {
  for (auto& [n, e] : entries_) e.tensor.clear_grad();
}

template <class T>
ParamStore<T> ParamStore<T>::clone() const {
  ParamStore out;
  for (const auto& [n, e] : entries_) {
    auto t = e.tensor.detach();
    t.set_requires_grad(e.tensor.requires_grad());
    out.add(n, std::move(t), e.frozen, e.buffer);
  }
  return out;
}

template <class T>
void ParamStore<T>::set_frozen(const std::string& name, bool frozen) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("param store: no tensor named " + name);
  it->second.frozen = frozen;
}

// --- initialisation ---------------------------------------------------------------------

namespace {

template <class T>
class Initializer {
 public:
  Initializer(ParamStore<T>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  void normal(const std::string& name, const Shape& shape, double stddev, bool frozen) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(ndarr::numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    store_.add(name, Tensor<T>(shape, std::move(v)), frozen);
  }
  void conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool frozen) {
    normal(name, Shape{out, in, k, k}, std::sqrt(2.0 / static_cast<double>(in * k * k)), frozen);
  }
  void constant(const std::string& name, const Shape& shape, T value, bool frozen, bool buffer = false) {
    store_.add(name, Tensor<T>::full(shape, value), frozen, buffer);
  }
  void bn(const std::string& prefix, std::size_t c, bool frozen) {
    constant(prefix + ".gamma", {c}, T(1), frozen);
    constant(prefix + ".beta", {c}, T(0), frozen);
    constant(prefix + ".running_mean", {c}, T(0), frozen, true);
    constant(prefix + ".running_var", {c}, T(1), frozen, true);
  }

 private:
  ParamStore<T>& store_;
  std::mt19937_64 rng_;
};

std::string stage(std::size_t k) { return "s" + std::to_string(k + 1); }

}  // namespace

template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<T> store;
  Initializer<T> init(store, seed);
  std::size_t in = cfg.in_channels;
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t c = cfg.stage_channels[k];
    const std::string bb = std::string(kBackbonePrefix) + stage(k);
    init.conv(bb + ".conv1.w", c, in, 3, true);
    init.bn(bb + ".bn1", c, true);
    init.conv(bb + ".conv2.w", c, c, 3, true);
    init.bn(bb + ".bn2", c, true);
    const std::string ad = "adapter." + stage(k);
    init.normal(ad + ".down", {cfg.adapter_bottleneck, in}, std::sqrt(1.0 / static_cast<double>(in)), false);
    // Zero up-projection: the residual adapter starts as the identity.
    init.constant(ad + ".up", {in, cfg.adapter_bottleneck}, T(0), false);
    in = c;
  }
  for (std::size_t k = 0; k < 4; ++k) {
    const std::string rf = "rfb." + stage(k);
    for (int d : {1, 3, 5}) {
      init.conv(rf + ".branch" + std::to_string(d) + ".w", cfg.rfb_branch_channels, cfg.stage_channels[k], 3, false);
      if (cfg.block_bias) init.constant(rf + ".branch" + std::to_string(d) + ".b", {cfg.rfb_branch_channels}, T(0), false);
    }
    init.conv(rf + ".proj.w", ModelConfig::rfb_out, 3 * cfg.rfb_branch_channels, 1, false);
    if (cfg.block_bias) init.constant(rf + ".proj.b", {ModelConfig::rfb_out}, T(0), false);
  }
  std::size_t up = ModelConfig::rfb_out;
  for (std::size_t j = 0; j < 3; ++j) {
    const std::string db = "decoder.b" + std::to_string(j + 1);
    if (cfg.eam_enabled) {
      init.conv(db + ".eam.conv.w", up, up, 3, false);
      if (cfg.block_bias) init.constant(db + ".eam.conv.b", {up}, T(0), false);
      init.bn(db + ".eam.bn", up, false);
    }
    init.conv(db + ".conv1.w", cfg.decoder_channels, up + ModelConfig::rfb_out, 3, false);
    init.bn(db + ".bn1", cfg.decoder_channels, false);
    init.conv(db + ".conv2.w", cfg.decoder_channels, cfg.decoder_channels, 3, false);
    init.bn(db + ".bn2", cfg.decoder_channels, false);
    const std::string hd = "head.s" + std::to_string(j + 1);
    init.normal(hd + ".w", {1, cfg.decoder_channels, 1, 1}, std::sqrt(1.0 / (3.0 * double(cfg.decoder_channels))), false);
    init.constant(hd + ".b", {1}, T(0), false);
    up = cfg.decoder_channels;
  }
  return store;
}

// --- blocks -------------------------------------------------------------------------------

namespace {

template <class T>
Tensor<T> conv_bn_relu(const Tensor<T>& x, ParamStore<T>& store, const std::string& conv, const std::string& bn,
                       BnMode mode) {
  auto y = ndarr::conv2d<T>(x, store.get(conv + ".w"), std::nullopt, 1);
  y = ndarr::batchnorm2d<T>(y, store.get(bn + ".gamma"), store.get(bn + ".beta"), store.get(bn + ".running_mean"),
                            store.get(bn + ".running_var"), mode);
  return ndarr::relu(y);
}

template <class T>
std::optional<Tensor<T>> maybe_bias(ParamStore<T>& store, const std::string& name, bool bias) {
  if (!bias) return std::nullopt;
  return store.get(name);
}

}  // namespace

template <class T>
Tensor<T> adapter_forward(const Tensor<T>& x, ParamStore<T>& store, const std::string& prefix, bool residual) {
  const auto& down = store.get(prefix + ".down");
  const auto& up = store.get(prefix + ".up");
  if (x.rank() != 4 || down.dim(1) != x.dim(1) || up.dim(0) != x.dim(1) || up.dim(1) != down.dim(0))
    throw ShapeError("adapter " + prefix + ": channel mismatch with input " + ndarr::to_string(x.shape()));
  // Per-position linear maps are 1x1 convolutions.
  auto wd = ndarr::reshape(down, Shape{down.dim(0), down.dim(1), 1, 1});
  auto wu = ndarr::reshape(up, Shape{up.dim(0), up.dim(1), 1, 1});
  auto a = ndarr::gelu(ndarr::conv2d<T>(x, wd, std::nullopt, 0));
  a = ndarr::gelu(ndarr::conv2d<T>(a, wu, std::nullopt, 0));
  return residual ? ndarr::add(x, a) : a;
}

template <class T>
Tensor<T> rfb_forward(const Tensor<T>& x, ParamStore<T>& store, const std::string& prefix, bool bias) {
  if (x.rank() != 4 || store.get(prefix + ".branch1.w").dim(1) != x.dim(1))
    throw ShapeError("rfb " + prefix + ": channel mismatch with input " + ndarr::to_string(x.shape()));
  Tensor<T> cat;
  for (std::size_t d : {1, 3, 5}) {
    const std::string br = prefix + ".branch" + std::to_string(d);
    auto y = ndarr::conv2d<T>(x, store.get(br + ".w"), maybe_bias(store, br + ".b", bias), d, d);
    cat = cat.defined() ? ndarr::concat_channels(cat, y) : y;
  }
  auto out = ndarr::conv2d<T>(cat, store.get(prefix + ".proj.w"), maybe_bias(store, prefix + ".proj.b", bias), 0);
  return ndarr::relu(out);
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> eam_forward(const Tensor<T>& x, ParamStore<T>& store, const std::string& prefix,
                                            BnMode mode, bool bias) {
  const auto& w = store.get(prefix + ".conv.w");
  if (x.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(0) != x.dim(1))
    throw ShapeError("eam " + prefix + ": channel mismatch with input " + ndarr::to_string(x.shape()));
  auto y = ndarr::conv2d<T>(x, w, maybe_bias(store, prefix + ".conv.b", bias), 1);
  const std::string bn = prefix + ".bn";
  y = ndarr::batchnorm2d<T>(y, store.get(bn + ".gamma"), store.get(bn + ".beta"), store.get(bn + ".running_mean"),
                            store.get(bn + ".running_var"), mode);
  auto gate = ndarr::sigmoid(y);
  return {ndarr::mul(x, gate), gate};
}

template <class T>
std::array<Tensor<T>, 4> encoder_forward(const Tensor<T>& img, ParamStore<T>& store, const ModelConfig& cfg,
                                         const ForwardMode& mode) {
  if (img.rank() != 4 || img.dim(1) != cfg.in_channels)
    throw ShapeError("encoder: expected [N," + std::to_string(cfg.in_channels) + ",H,W], got " +
                     ndarr::to_string(img.shape()));
  if (img.dim(2) % 16 != 0 || img.dim(3) % 16 != 0)
    throw ShapeError("encoder: input height and width must be divisible by 16, got " + ndarr::to_string(img.shape()));
  std::array<Tensor<T>, 4> feats;
  Tensor<T> x = img;
  for (std::size_t k = 0; k < 4; ++k) {
    if (mode.use_adapters) x = adapter_forward(x, store, "adapter." + stage(k), cfg.adapter_residual);
    const std::string bb = std::string(kBackbonePrefix) + stage(k);
    x = conv_bn_relu(x, store, bb + ".conv1", bb + ".bn1", mode.backbone);
    x = conv_bn_relu(x, store, bb + ".conv2", bb + ".bn2", mode.backbone);
    x = ndarr::avgpool2x2(x);
    feats[k] = x;
  }
  return feats;
}

template <class T>
std::array<Tensor<T>, 4> rfbs_forward(const std::array<Tensor<T>, 4>& features, ParamStore<T>& store,
                                      const ModelConfig& cfg) {
  std::array<Tensor<T>, 4> r;
  for (std::size_t k = 0; k < 4; ++k) r[k] = rfb_forward(features[k], store, "rfb." + stage(k), cfg.block_bias);
  return r;
}

template <class T>
std::array<Tensor<T>, 3> decoder_forward(const std::array<Tensor<T>, 4>& r, ParamStore<T>& store,
                                         const ModelConfig& cfg, const ForwardMode& mode, std::size_t out_h,
                                         std::size_t out_w) {
  std::array<Tensor<T>, 3> heads;
  Tensor<T> x = r[3];
  for (std::size_t j = 0; j < 3; ++j) {
    const std::string db = "decoder.b" + std::to_string(j + 1);
    x = ndarr::upsample2x_nearest(x);
    if (cfg.eam_enabled) x = eam_forward(x, store, db + ".eam", mode.head, cfg.block_bias).first;
    const auto& skip = r[2 - j];
    if (skip.dim(2) != x.dim(2) || skip.dim(3) != x.dim(3))
      throw ShapeError("decoder: skip " + ndarr::to_string(skip.shape()) + " does not match upsampled " +
                       ndarr::to_string(x.shape()));
    x = ndarr::concat_channels(x, skip);
    x = conv_bn_relu(x, store, db + ".conv1", db + ".bn1", mode.head);
    x = conv_bn_relu(x, store, db + ".conv2", db + ".bn2", mode.head);
    const std::string hd = "head.s" + std::to_string(j + 1);
    auto logit = ndarr::conv2d<T>(x, store.get(hd + ".w"), store.get(hd + ".b"), 0);
    if (out_h % logit.dim(2) != 0 || out_h / logit.dim(2) != out_w / logit.dim(3))
      throw ShapeError("decoder: head resolution does not divide the output size");
    heads[j] = ndarr::upsample_bilinear(logit, out_h / logit.dim(2));
  }
  return heads;
}

template <class T>
std::array<Tensor<T>, 3> forward(const Tensor<T>& img, ParamStore<T>& store, const ModelConfig& cfg,
                                 const ForwardMode& mode) {
  auto feats = encoder_forward(img, store, cfg, mode);
  auto r = rfbs_forward(feats, store, cfg);
  return decoder_forward(r, store, cfg, mode, img.dim(2), img.dim(3));
}

template <class T>
Tensor<T> images_to_tensor(const std::vector<maskio::GrayImage>& images) {
  if (images.empty()) throw Error("images_to_tensor: empty batch");
  const auto& f = images.front();
  std::vector<T> data;
  data.reserve(images.size() * f.values().size());
  for (const auto& im : images) {
    if (im.height() != f.height() || im.width() != f.width() || im.channels() != f.channels())
      throw ShapeError("images_to_tensor: images in a batch must share size and channels");
    for (float v : im.values()) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>(Shape{images.size(), f.channels(), f.height(), f.width()}, std::move(data));
}

maskio::Mask logits_to_mask(std::span<const float> logits, std::size_t height, std::size_t width, double threshold) {
  if (logits.size() != height * width) throw ShapeError("logits_to_mask: size mismatch");
  std::vector<std::uint8_t> bits(logits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
    bits[i] = p > threshold ? 1 : 0;
  }
  return maskio::Mask(height, width, std::move(bits));
}

std::vector<maskio::Mask> predict_batch(const std::vector<maskio::GrayImage>& imgs, ParamStore<float>& store,
                                        const ModelConfig& cfg, double threshold) {
  ndarr::NoGradGuard ng;
  auto x = images_to_tensor<float>(imgs);
  auto heads = forward(x, store, cfg, ForwardMode::inference());
  const std::size_t h = x.dim(2), w = x.dim(3), plane = h * w;
  std::vector<maskio::Mask> out;
  auto d = heads[2].data();
  for (std::size_t n = 0; n < imgs.size(); ++n) out.push_back(logits_to_mask(d.subspan(n * plane, plane), h, w, threshold));
  return out;
}

maskio::Mask predict(const maskio::GrayImage& img, ParamStore<float>& store, const ModelConfig& cfg, double threshold) {
  return predict_batch({img}, store, cfg, threshold).front();
}

#define ELNET_MODEL_INSTANTIATE(T)                                                                                 \
  template class ParamStore<T>;                                                                                    \
  template ParamStore<T> init_params<T>(const ModelConfig&, std::uint64_t);                                        \
  template Tensor<T> adapter_forward<T>(const Tensor<T>&, ParamStore<T>&, const std::string&, bool);               \
  template Tensor<T> rfb_forward<T>(const Tensor<T>&, ParamStore<T>&, const std::string&, bool);                   \
  template std::pair<Tensor<T>, Tensor<T>> eam_forward<T>(const Tensor<T>&, ParamStore<T>&, const std::string&,    \
                                                          BnMode, bool);                                           \
  template std::array<Tensor<T>, 4> encoder_forward<T>(const Tensor<T>&, ParamStore<T>&, const ModelConfig&,       \
                                                       const ForwardMode&);                                        \
  template std::array<Tensor<T>, 4> rfbs_forward<T>(const std::array<Tensor<T>, 4>&, ParamStore<T>&,               \
                                                    const ModelConfig&);                                           \
  template std::array<Tensor<T>, 3> decoder_forward<T>(const std::array<Tensor<T>, 4>&, ParamStore<T>&,            \
                                                       const ModelConfig&, const ForwardMode&, std::size_t,        \
                                                       std::size_t);                                               \
  template std::array<Tensor<T>, 3> forward<T>(const Tensor<T>&, ParamStore<T>&, const ModelConfig&,               \
                                               const ForwardMode&);                                                \
  template Tensor<T> images_to_tensor<T>(const std::vector<maskio::GrayImage>&);

ELNET_MODEL_INSTANTIATE(float)
ELNET_MODEL_INSTANTIATE(double)

#undef ELNET_MODEL_INSTANTIATE

}  // namespace elnet::model
