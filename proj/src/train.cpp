#include "elnet/train.hpp"

#include "elnet/perturb.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace elnet::train {

using ndarr::Shape;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void LossConfig::validate() const {
  if (lambda < 0 || lambda > 1) throw ConfigError("loss.lambda: must lie in [0,1]");
  double s = 0;
  for (double a : alpha) {
    if (a < 0) throw ConfigError("loss.alpha: weights must be non-negative");
    s += a;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ConfigError("loss.alpha: weights must sum to 1");
  if (boundary_mu < 0) throw ConfigError("loss.boundary_mu: must be non-negative");
  if (boundary_window == 0 || boundary_window % 2 == 0) throw ConfigError("loss.boundary_window: must be odd");
  if (!(prob_clip > 0 && prob_clip < 0.5)) throw ConfigError("loss.prob_clip: must lie in (0, 0.5)");
}

nlohmann::ordered_json LossConfig::to_json() const {
  return {{"lambda", lambda},
          {"alpha", alpha},
          {"boundary_mu", boundary_mu},
          {"boundary_window", boundary_window},
          {"prob_clip", prob_clip}};
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs: must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size: must be positive");
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate: must be positive");
  if (weight_decay < 0) throw ConfigError("train.weight_decay: must be non-negative");
  for (auto e : checkpoint_epochs)
    if (e < 1 || e > epochs) throw ConfigError("train.checkpoint_epochs: entries must lie in [1, epochs]");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"seed", seed},
          {"checkpoint_epochs", checkpoint_epochs}};
}

// --- losses ---------------------------------------------------------------------------

template <class T>
Tensor<T> boundary_weight(const Mask& g, const LossConfig& cfg) {
  if (cfg.boundary_window % 2 == 0) throw ConfigError("boundary_weight: window must be odd");
  const std::size_t h = g.height(), w = g.width();
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(cfg.boundary_window / 2);
  // Integral image over the edge-padded mask.
  const std::size_t ph = h + 2 * r, pw = w + 2 * r;
  std::vector<double> integral((ph + 1) * (pw + 1), 0.0);
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  for (std::size_t y = 0; y < ph; ++y) {
    double row = 0;
    for (std::size_t x = 0; x < pw; ++x) {
      row += g.at(clampi(static_cast<std::ptrdiff_t>(y) - r, h), clampi(static_cast<std::ptrdiff_t>(x) - r, w));
      integral[(y + 1) * (pw + 1) + x + 1] = integral[y * (pw + 1) + x + 1] + row;
    }
  }
  const double area = static_cast<double>(cfg.boundary_window * cfg.boundary_window);
  const std::size_t k = cfg.boundary_window;
  std::vector<T> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Window in padded coordinates: [y, y+k) x [x, x+k).
      const double s = integral[(y + k) * (pw + 1) + x + k] - integral[y * (pw + 1) + x + k] -
                       integral[(y + k) * (pw + 1) + x] + integral[y * (pw + 1) + x];
      out[y * w + x] = static_cast<T>(1.0 + cfg.boundary_mu * std::abs(s / area - g.at(y, x)));
    }
  }
  return Tensor<T>(Shape{1, 1, h, w}, std::move(out));
}

template <class T>
Targets<T> make_targets(const std::vector<Mask>& masks, const LossConfig& cfg) {
  if (masks.empty()) throw Error("make_targets: empty batch");
  const std::size_t h = masks[0].height(), w = masks[0].width();
  std::vector<T> g, wt;
  g.reserve(masks.size() * h * w);
  wt.reserve(masks.size() * h * w);
  for (const auto& m : masks) {
    if (m.height() != h || m.width() != w) throw ShapeError("make_targets: masks in a batch must share one shape");
    for (auto b : m.bits()) g.push_back(static_cast<T>(b));
    auto bw = boundary_weight<T>(m, cfg);
    wt.insert(wt.end(), bw.data().begin(), bw.data().end());
  }
  const Shape s{masks.size(), 1, h, w};
  return {Tensor<T>(s, std::move(g)), Tensor<T>(s, std::move(wt))};
}

namespace {

template <class T>
void check_loss_inputs(const char* op, const Tensor<T>& logits, const Tensor<T>& g, const Tensor<T>& w) {
  if (logits.shape() != g.shape() || logits.shape() != w.shape())
    throw ShapeError(std::string(op) + ": logits " + ndarr::to_string(logits.shape()) + ", target " +
                     ndarr::to_string(g.shape()) + " and weights " + ndarr::to_string(w.shape()) + " must match");
}

template <class T>
Tensor<T> clipped_prob(const Tensor<T>& logits, double clip) {
  return ndarr::clamp(ndarr::sigmoid(logits), static_cast<T>(clip), static_cast<T>(1.0 - clip));
}

}  // namespace

template <class T>
Tensor<T> wbce_loss(const Tensor<T>& logits, const Tensor<T>& g, const Tensor<T>& w, double prob_clip) {
  check_loss_inputs("wbce_loss", logits, g, w);
  auto p = clipped_prob(logits, prob_clip);
  auto one_minus = [](const Tensor<T>& x) { return ndarr::add_scalar(ndarr::scale(x, T(-1)), T(1)); };
  auto ll = ndarr::add(ndarr::mul(g, ndarr::log(p)), ndarr::mul(one_minus(g), ndarr::log(one_minus(p))));
  auto num = ndarr::sum_per_sample(ndarr::mul(w, ll));
  auto den = ndarr::sum_per_sample(w);
  return ndarr::scale(ndarr::mean(ndarr::div(num, den)), T(-1));
}

template <class T>
Tensor<T> wiou_loss(const Tensor<T>& logits, const Tensor<T>& g, const Tensor<T>& w, double prob_clip) {
  check_loss_inputs("wiou_loss", logits, g, w);
  auto p = clipped_prob(logits, prob_clip);
  auto pg = ndarr::mul(p, g);
  auto inter = ndarr::sum_per_sample(ndarr::mul(w, pg));
  auto uni = ndarr::sum_per_sample(ndarr::mul(w, ndarr::sub(ndarr::add(p, g), pg)));
  return ndarr::add_scalar(ndarr::scale(ndarr::mean(ndarr::div(inter, uni)), T(-1)), T(1));
}

template <class T>
Tensor<T> combined_loss(const Tensor<T>& logits, const Targets<T>& t, const LossConfig& cfg) {
  cfg.validate();
  auto a = wiou_loss(logits, t.g, t.w, cfg.prob_clip);
  auto b = wbce_loss(logits, t.g, t.w, cfg.prob_clip);
  return ndarr::add(ndarr::scale(a, static_cast<T>(cfg.lambda)), ndarr::scale(b, static_cast<T>(1.0 - cfg.lambda)));
}

template <class T>
Tensor<T> total_loss(const std::array<Tensor<T>, 3>& heads, const Targets<T>& t, const LossConfig& cfg) {
  cfg.validate();
  Tensor<T> acc;
  for (std::size_t i = 0; i < 3; ++i) {
    auto term = ndarr::scale(combined_loss(heads[i], t, cfg), static_cast<T>(cfg.alpha[i]));
    acc = acc.defined() ? ndarr::add(acc, term) : term;
  }
  return acc;
}

// --- Adam ---------------------------------------------------------------------------------

template <class T>
void adam_step(ParamStore<T>& store, AdamState& state, const AdamParams& p) {
  const auto names = store.optimizable_names();
  for (const auto& n : names) {
    if (!store.get(n).has_grad()) throw Error("adam_step: missing gradient for trainable tensor " + n);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(state.step));
  for (const auto& n : names) {
    auto& t = store.get(n);
    auto& m = state.m[n];
    auto& v = state.v[n];
    if (m.size() != t.numel()) {
      m.assign(t.numel(), 0.0);
      v.assign(t.numel(), 0.0);
    }
    std::vector<double> grad(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i] + p.weight_decay * static_cast<double>(data[i]);
      m[i] = p.beta1 * m[i] + (1 - p.beta1) * g;
      v[i] = p.beta2 * v[i] + (1 - p.beta2) * g * g;
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      data[i] = static_cast<T>(static_cast<double>(data[i]) - p.lr * mh / (std::sqrt(vh) + p.eps));
    }
  }
}

// --- fine-tuning -----------------------------------------------------------------------------

namespace {

void check_samples(const std::vector<Sample>& samples, std::size_t in_channels) {
  if (samples.empty()) throw Error("training: empty training set");
  const auto& f = samples.front().image;
  if (f.height() % 16 != 0 || f.width() % 16 != 0)
    throw ShapeError("training: image size " + std::to_string(f.height()) + "x" + std::to_string(f.width()) +
                     " is not divisible by 16");
  for (const auto& s : samples) {
    if (s.image.height() != f.height() || s.image.width() != f.width())
      throw ShapeError("training: all images must share one size");
    if (s.image.channels() != in_channels) throw ShapeError("training: image channels do not match model.in_channels");
    if (s.label.height() != s.image.height() || s.label.width() != s.image.width())
      throw ShapeError("training: label shape does not match its image");
  }
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  // Fisher-Yates with explicit draws so the order is library independent.
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch)
    out.emplace_back(perm.begin() + s, perm.begin() + std::min(n, s + batch));
  return out;
}

}  // namespace

FinetuneResult finetune(const std::vector<Sample>& samples, const ParamStore<float>& init, const TrainConfig& tcfg,
                        const LossConfig& lcfg, const ModelConfig& mcfg, const EpochCallback& on_epoch) {
  tcfg.validate();
  lcfg.validate();
  mcfg.validate();
  check_samples(samples, mcfg.in_channels);

  FinetuneResult res;
  res.store = init.clone();
  res.store.prepare_for_training();
  const std::set<std::size_t> snaps(tcfg.checkpoint_epochs.begin(), tcfg.checkpoint_epochs.end());
  std::mt19937_64 rng(tcfg.seed);
  const AdamParams ap{tcfg.learning_rate, tcfg.weight_decay};

  // Targets are fixed per sample; build them once.
  std::vector<Targets<float>> per_sample;
  per_sample.reserve(samples.size());
  for (const auto& s : samples) per_sample.push_back(make_targets<float>({s.label}, lcfg));

  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    double loss_sum = 0;
    for (const auto& batch : make_batches(samples.size(), tcfg.batch_size, rng)) {
      std::vector<GrayImage> imgs;
      std::vector<float> g, w;
      for (auto i : batch) {
        imgs.push_back(samples[i].image);
        g.insert(g.end(), per_sample[i].g.data().begin(), per_sample[i].g.data().end());
        w.insert(w.end(), per_sample[i].w.data().begin(), per_sample[i].w.data().end());
      }
      const auto& lab = samples[batch[0]].label;
      const Shape ts{batch.size(), 1, lab.height(), lab.width()};
      Targets<float> t{Tensor<float>(ts, std::move(g)), Tensor<float>(ts, std::move(w))};
      auto x = model::images_to_tensor<float>(imgs);
      auto heads = model::forward(x, res.store, mcfg, model::ForwardMode::finetune());
      auto loss = total_loss(heads, t, lcfg);
      const double lv = loss.item();
      ndarr::backward(loss);
      adam_step(res.store, res.optimizer, ap);
      res.store.zero_grads();
      res.step_losses.push_back(lv);
      loss_sum += lv * static_cast<double>(batch.size());
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(samples.size()), tcfg.learning_rate};
    res.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (snaps.count(epoch)) res.snapshots.emplace(epoch, res.store.clone());
  }
  std::ostringstream rs;
  rs << rng;
  res.rng_state = rs.str();
  return res;
}

// --- pretraining ------------------------------------------------------------------------------

PretrainResult pretrain_backbone(const std::vector<GrayImage>& images, const TrainConfig& tcfg, const ModelConfig& mcfg,
                                 double noise_sigma, const EpochCallback& on_epoch) {
  tcfg.validate();
  mcfg.validate();
  if (images.empty()) throw Error("pretrain: empty corpus");
  std::vector<Sample> as_samples;
  for (const auto& im : images) as_samples.push_back({im, Mask(im.height(), im.width())});
  check_samples(as_samples, mcfg.in_channels);

  auto store = model::init_params<float>(mcfg, tcfg.seed);
  for (const auto& n : store.names()) {
    const bool backbone = n.rfind(model::kBackbonePrefix, 0) == 0;
    if (backbone) {
      store.set_frozen(n, false);
    } else {
      store.erase(n);
    }
  }
  // Throwaway reconstruction head: one 1x1 projection per stage.
  std::mt19937_64 head_rng(perturb::mix_seed(tcfg.seed ^ 0x7265636f6eULL));
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t c = mcfg.stage_channels[k];
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(c)));
    std::vector<float> w(mcfg.in_channels * c);
    for (auto& v : w) v = static_cast<float>(dist(head_rng));
    store.add("recon.s" + std::to_string(k + 1) + ".w", Tensor<float>(Shape{mcfg.in_channels, c, 1, 1}, std::move(w)),
              false);
  }
  store.add("recon.b", Tensor<float>::full(Shape{mcfg.in_channels}, 0.5f), false);
  store.prepare_for_training();

  std::mt19937_64 rng(tcfg.seed);
  std::normal_distribution<double> noise(0.0, noise_sigma);
  AdamState opt;
  const AdamParams ap{tcfg.learning_rate, tcfg.weight_decay};
  const model::ForwardMode mode{ndarr::BnMode::kTrain, ndarr::BnMode::kTrain, false};
  PretrainResult res;
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    double loss_sum = 0;
    for (const auto& batch : make_batches(images.size(), tcfg.batch_size, rng)) {
      std::vector<GrayImage> clean, noisy;
      for (auto i : batch) {
        clean.push_back(images[i]);
        std::vector<float> v = images[i].values();
        for (auto& x : v) x = static_cast<float>(x + noise(rng));
        noisy.emplace_back(images[i].height(), images[i].width(), images[i].channels(), std::move(v));
      }
      auto x = model::images_to_tensor<float>(noisy);
      auto target = model::images_to_tensor<float>(clean);
      auto feats = model::encoder_forward(x, store, mcfg, mode);
      Tensor<float> recon;
      for (std::size_t k = 0; k < 4; ++k) {
        auto y = ndarr::conv2d<float>(feats[k], store.get("recon.s" + std::to_string(k + 1) + ".w"),
                                      k == 0 ? std::optional<Tensor<float>>(store.get("recon.b")) : std::nullopt, 0);
        y = ndarr::upsample_nearest(y, std::size_t{2} << k);
        recon = recon.defined() ? ndarr::add(recon, y) : y;
      }
      auto d = ndarr::sub(recon, target);
      auto loss = ndarr::mean(ndarr::mul(d, d));
      loss_sum += loss.item() * static_cast<double>(batch.size());
      ndarr::backward(loss);
      adam_step(store, opt, ap);
      store.zero_grads();
    }
    const double mean_loss = loss_sum / static_cast<double>(images.size());
    res.epoch_losses.push_back(mean_loss);
    if (on_epoch) on_epoch({epoch, mean_loss, tcfg.learning_rate});
  }
  for (const auto& n : store.names()) {
    if (n.rfind(model::kBackbonePrefix, 0) != 0) continue;
    const auto& e = store.entry(n);
    res.backbone.add(n, e.tensor.detach(), true, e.buffer);
  }
  return res;
}

// --- checkpoints ------------------------------------------------------------------------------

namespace {

enum : std::uint8_t { kF32 = 0, kF64 = 1 };
const std::string kAdamM = "__adam.m/";
const std::string kAdamV = "__adam.v/";

template <class V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw FormatError("checkpoint: truncated file");
  }
  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

void put_tensor(std::string& out, const std::string& name, std::uint8_t dtype, const Shape& shape, const void* data,
                std::size_t bytes) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, dtype);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(out, d);
  out.append(static_cast<const char*>(data), bytes);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["version"] = kCheckpointVersion;
  header["model"] = ckpt.model.to_json();
  header["epoch"] = ckpt.epoch;
  header["frozen"] = ckpt.store.frozen_names();
  std::vector<std::string> buffers;
  for (const auto& [n, e] : ckpt.store.entries())
    if (e.buffer) buffers.push_back(n);
  header["buffers"] = buffers;
  header["rng_state"] = ckpt.rng_state;
  header["optimizer"] = ckpt.optimizer ? nlohmann::ordered_json{{"step", ckpt.optimizer->step}} : nlohmann::ordered_json();
  header["meta"] = ckpt.meta;
  std::size_t count = ckpt.store.entries().size();
  if (ckpt.optimizer) count += ckpt.optimizer->m.size() + ckpt.optimizer->v.size();
  header["tensor_count"] = count;
  const std::string hs = header.dump();

  std::string out(kCheckpointMagic, 4);
  put<std::uint64_t>(out, hs.size());
  out += hs;
  for (const auto& [n, e] : ckpt.store.entries()) {
    auto d = e.tensor.data();
    put_tensor(out, n, kF32, e.tensor.shape(), d.data(), d.size() * sizeof(float));
  }
  if (ckpt.optimizer) {
    for (const auto* table : {&ckpt.optimizer->m, &ckpt.optimizer->v}) {
      const std::string& prefix = table == &ckpt.optimizer->m ? kAdamM : kAdamV;
      for (const auto& [n, vals] : *table)
        put_tensor(out, prefix + n, kF64, Shape{vals.size()}, vals.data(), vals.size() * sizeof(double));
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic (expected ELN1, version " + std::to_string(kCheckpointVersion) + ")");
  Reader rd{bytes, 4};
  const auto hlen = rd.get<std::uint64_t>();
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(rd.str(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (header.value("version", -1) != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + header.value("version", nlohmann::ordered_json()).dump());

  Checkpoint ck;
  try {
    ck.model = ModelConfig::from_json(header.at("model"));
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.rng_state = header.value("rng_state", std::string());
    ck.meta = header.value("meta", nlohmann::ordered_json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header field: ") + e.what());
  }
  const auto frozen = header.at("frozen").get<std::set<std::string>>();
  const auto buffers = header.at("buffers").get<std::set<std::string>>();
  if (!header["optimizer"].is_null()) {
    ck.optimizer = AdamState{};
    ck.optimizer->step = header["optimizer"].at("step").get<std::uint64_t>();
  }
  const auto count = header.at("tensor_count").get<std::size_t>();
  for (std::size_t i = 0; i < count; ++i) {
    const auto nlen = rd.get<std::uint32_t>();
    const std::string name = rd.str(nlen);
    const auto dtype = rd.get<std::uint8_t>();
    const auto rank = rd.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = rd.get<std::uint64_t>();
    const std::size_t n = ndarr::numel(shape);
    if (dtype == kF32) {
      std::vector<float> v(n);
      rd.need(n * sizeof(float));
      std::memcpy(v.data(), bytes.data() + rd.pos, n * sizeof(float));
      rd.pos += n * sizeof(float);
      ck.store.add(name, Tensor<float>(shape, std::move(v)), frozen.count(name) > 0, buffers.count(name) > 0);
    } else if (dtype == kF64) {
      std::vector<double> v(n);
      rd.need(n * sizeof(double));
      std::memcpy(v.data(), bytes.data() + rd.pos, n * sizeof(double));
      rd.pos += n * sizeof(double);
      if (!ck.optimizer) throw FormatError("checkpoint: optimizer tensor without optimizer header");
      if (name.rfind(kAdamM, 0) == 0) {
        ck.optimizer->m[name.substr(kAdamM.size())] = std::move(v);
      } else if (name.rfind(kAdamV, 0) == 0) {
        ck.optimizer->v[name.substr(kAdamV.size())] = std::move(v);
      } else {
        throw FormatError("checkpoint: unexpected f64 tensor " + name);
      }
    } else {
      throw FormatError("checkpoint: unknown dtype code " + std::to_string(dtype) + " for " + name);
    }
  }
  if (rd.pos != bytes.size()) throw FormatError("checkpoint: trailing bytes after last tensor");
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

void load_into(ParamStore<float>& dst, const ParamStore<float>& src, bool backbone_only) {
  for (const auto& [n, e] : src.entries()) {
    if (backbone_only && n.rfind(model::kBackbonePrefix, 0) != 0) continue;
    if (!dst.contains(n)) throw ShapeError("checkpoint tensor " + n + " does not exist in the model");
    auto& t = dst.get(n);
    if (t.shape() != e.tensor.shape())
      throw ShapeError("shape mismatch for tensor " + n + ": checkpoint " + ndarr::to_string(e.tensor.shape()) +
                       " vs model " + ndarr::to_string(t.shape()));
    const bool rg = t.requires_grad();
    auto copy = e.tensor.detach();
    copy.set_requires_grad(rg);
    const auto& de = dst.entry(n);
    dst.add(n, std::move(copy), de.frozen, de.buffer);
  }
}

ParamStore<float> init_from_backbone(const ModelConfig& mcfg, const Checkpoint& backbone, std::uint64_t seed) {
  auto store = model::init_params<float>(mcfg, seed);
  if (backbone.model.in_channels != mcfg.in_channels || backbone.model.stage_channels != mcfg.stage_channels) {
    // Let load_into name the first offending tensor.
    load_into(store, backbone.store, true);
    throw ShapeError("backbone checkpoint was built for a different backbone configuration");
  }
  std::size_t loaded = 0;
  for (const auto& n : backbone.store.names()) loaded += n.rfind(model::kBackbonePrefix, 0) == 0;
  if (loaded == 0) throw FormatError("checkpoint contains no backbone tensors");
  load_into(store, backbone.store, true);
  return store;
}

std::vector<Sample> load_samples(const maskio::DatasetManifest& m, std::optional<maskio::Split> split) {
  std::vector<Sample> out;
  for (const auto& r : m.records) {
    if (!r.label_path || r.provenance == maskio::Provenance::kFlagged) continue;
    if (split && r.split != *split) continue;
    out.push_back({maskio::load_image(m.resolve(r.image_path)), maskio::load_mask(m.resolve(*r.label_path))});
  }
  return out;
}

#define ELNET_TRAIN_INSTANTIATE(T)                                                                     \
  template Tensor<T> boundary_weight<T>(const Mask&, const LossConfig&);                               \
  template Targets<T> make_targets<T>(const std::vector<Mask>&, const LossConfig&);                    \
  template Tensor<T> wbce_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);       \
  template Tensor<T> wiou_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);       \
  template Tensor<T> combined_loss<T>(const Tensor<T>&, const Targets<T>&, const LossConfig&);         \
  template Tensor<T> total_loss<T>(const std::array<Tensor<T>, 3>&, const Targets<T>&, const LossConfig&); \
  template void adam_step<T>(ParamStore<T>&, AdamState&, const AdamParams&);

ELNET_TRAIN_INSTANTIATE(float)
ELNET_TRAIN_INSTANTIATE(double)

#undef ELNET_TRAIN_INSTANTIATE

}  // namespace elnet::train
