#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "support.hpp"

#include <cmath>

#include "elnet/error.hpp"
#include "elnet/synth.hpp"
#include "elnet/train.hpp"

using namespace elnet;
using namespace elnet::train;
using ndarr::Shape;
using ndarr::Tensor64;
using ndarr::Tensor;
using testing::TempDir;

namespace {

Tensor64 rand64(const Shape& s, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0, sd);
  std::vector<double> v(ndarr::numel(s));
  for (auto& x : v) x = d(rng);
  return Tensor64(s, std::move(v));
}

double sigmoid(double x) { return 1 / (1 + std::exp(-x)); }

// Per-sample weighted BCE and weighted IoU, averaged over the batch, written
// as plain loops over [N,1,H,W] buffers.
double wbce_ref(const Tensor64& z, const Tensor64& g, const Tensor64& w, double eps) {
  const std::size_t n = z.dim(0), per = z.numel() / n;
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    double num = 0, den = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const double p = std::clamp(sigmoid(z.at(i)), eps, 1 - eps);
      num += w.at(i) * (g.at(i) * std::log(p) + (1 - g.at(i)) * std::log(1 - p));
      den += w.at(i);
    }
    total += -num / den;
  }
  return total / n;
}

double wiou_ref(const Tensor64& z, const Tensor64& g, const Tensor64& w, double eps) {
  const std::size_t n = z.dim(0), per = z.numel() / n;
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    double inter = 0, uni = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const double p = std::clamp(sigmoid(z.at(i)), eps, 1 - eps);
      inter += w.at(i) * p * g.at(i);
      uni += w.at(i) * (p + g.at(i) - p * g.at(i));
    }
    total += 1 - inter / uni;
  }
  return total / n;
}

std::vector<Sample> tiny_set(std::size_t n, std::uint64_t seed) {
  synth::SceneSpec sc;
  sc.size = 32;
  sc.seed = seed;
  synth::CorruptionSpec cc;
  cc.seed = seed;
  std::vector<Sample> out;
  for (auto& it : synth::gen_benchmark(n, sc, cc, 0.0)) out.push_back({it.image, it.gt});
  return out;
}

model::ModelConfig small() {
  model::ModelConfig c;
  c.stage_channels = {8, 16, 16, 16};
  c.adapter_bottleneck = 4;
  c.rfb_branch_channels = 8;
  c.decoder_channels = 8;
  return c;
}

}  // namespace

TEST_CASE("boundary weight") {
  LossConfig cfg;
  for (int v : {0, 1}) {
    auto w = boundary_weight<double>(maskio::Mask(20, 20, v), cfg);
    for (double x : w.data()) CHECK(x == 1.0);
  }
  maskio::Mask dot(31, 31);
  dot.set(15, 15, true);
  auto w = boundary_weight<double>(dot, cfg);
  CHECK(w.at(15 * 31 + 15) == doctest::Approx(1 + 5 * (1 - 1.0 / 225)));
  CHECK(w.at(15 * 31 + 16) == doctest::Approx(1 + 5.0 / 225));
  CHECK(w.at(0) == 1.0);
  std::mt19937_64 rng(1);
  const auto rw = boundary_weight<double>(testing::random_mask(17, 9, rng), cfg);
  for (double x : rw.data()) CHECK(x >= 1.0);
  cfg.boundary_window = 4;
  CHECK_THROWS_AS(boundary_weight<double>(dot, cfg), ConfigError);
}

TEST_CASE("loss values") {
  std::mt19937_64 rng(2);
  LossConfig cfg;
  std::vector<maskio::Mask> ms{testing::random_mask(8, 8, rng), testing::random_mask(8, 8, rng, 0.2)};
  auto t = make_targets<double>(ms, cfg);
  const double eps = cfg.prob_clip;

  SUBCASE("perfect prediction") {
    std::vector<double> z(t.g.numel());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = t.g.at(i) > 0.5 ? 40.0 : -40.0;
    Tensor64 logits(t.g.shape(), z);
    CHECK(wiou_loss(logits, t.g, t.w, eps).item() == doctest::Approx(0.0).epsilon(1e-6).scale(1));
    CHECK(wbce_loss(logits, t.g, t.w, eps).item() == doctest::Approx(-std::log(1 - eps)).epsilon(1e-6));
  }
  SUBCASE("everything missed") {
    auto ones = Tensor64::full({1, 1, 6, 6}, 1.0), w = Tensor64::full({1, 1, 6, 6}, 1.0);
    auto low = Tensor64::full({1, 1, 6, 6}, -40.0);
    CHECK(wiou_loss(low, ones, w, eps).item() == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("p = 0.5 gives ln 2") {
    auto zero = Tensor64::zeros(t.g.shape());
    CHECK(wbce_loss(zero, t.g, t.w, eps).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("random logits against the loop reference") {
    for (int k = 0; k < 10; ++k) {
      auto z = rand64(t.g.shape(), rng, 2.0);
      CHECK(wbce_loss(z, t.g, t.w, eps).item() == doctest::Approx(wbce_ref(z, t.g, t.w, eps)).epsilon(1e-12));
      CHECK(wiou_loss(z, t.g, t.w, eps).item() == doctest::Approx(wiou_ref(z, t.g, t.w, eps)).epsilon(1e-12));
    }
  }
  SUBCASE("combined and total compose") {
    auto z = rand64(t.g.shape(), rng, 2.0);
    const double a = wiou_loss(z, t.g, t.w, eps).item(), b = wbce_loss(z, t.g, t.w, eps).item();
    LossConfig l = cfg;
    l.lambda = 1;
    CHECK(combined_loss(z, t, l).item() == doctest::Approx(a));
    l.lambda = 0;
    CHECK(combined_loss(z, t, l).item() == doctest::Approx(b));
    l.lambda = 0.5;
    CHECK(combined_loss(z, t, l).item() == doctest::Approx(0.5 * (a + b)));

    CHECK(total_loss<double>({z, z, z}, t, cfg).item() == doctest::Approx(combined_loss(z, t, cfg).item()));
    auto z2 = rand64(t.g.shape(), rng, 2.0), z3 = rand64(t.g.shape(), rng, 2.0);
    LossConfig first = cfg;
    first.alpha = {1, 0, 0};
    CHECK(total_loss<double>({z, z2, z3}, t, first).item() == doctest::Approx(combined_loss(z, t, cfg).item()));
    LossConfig mix = cfg;
    mix.alpha = {0.2, 0.3, 0.5};
    const double want = 0.2 * combined_loss(z, t, cfg).item() + 0.3 * combined_loss(z2, t, cfg).item() +
                        0.5 * combined_loss(z3, t, cfg).item();
    CHECK(total_loss<double>({z, z2, z3}, t, mix).item() == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("loss config validation") {
  LossConfig c;
  c.alpha = {0.5, 0.6, 0.1};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lambda = 1.2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TrainConfig t;
  CHECK(t.batch_size == 12);
  CHECK(t.learning_rate == 1e-3);
  CHECK(t.weight_decay == 5e-4);
  CHECK(t.epochs == 200);
  t.checkpoint_epochs = {0};
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("adam") {
  model::ParamStore<float> s;
  s.add("w", Tensor<float>::full({1}, 1.f, true), false);
  s.add("frozen", Tensor<float>::full({2}, 3.f, true), true);
  s.prepare_for_training();
  s.get("frozen").set_requires_grad(true);
  ndarr::backward(ndarr::add(ndarr::sum(s.get("w")), ndarr::sum(s.get("frozen"))));
  AdamState st;
  AdamParams p;
  p.lr = 0.001;
  adam_step(s, st, p);
  // First step: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps).
  CHECK(s.get("w").at(0) == doctest::Approx(1.0 - 0.001 / (1 + 1e-8)).epsilon(1e-7));
  CHECK(s.get("frozen").at(0) == 3.f);
  CHECK(s.get("frozen").at(1) == 3.f);

  model::ParamStore<float> z;
  z.add("w", Tensor<float>::full({3}, 0.25f, true), false);
  z.prepare_for_training();
  z.get("w").zero_grad();
  AdamState zs;
  adam_step(z, zs, AdamParams{});
  for (float v : z.get("w").data()) CHECK(v == 0.25f);

  model::ParamStore<float> missing;
  missing.add("w", Tensor<float>::full({1}, 1.f), false);
  missing.prepare_for_training();
  CHECK_THROWS_AS(adam_step(missing, zs, AdamParams{}), Error);
}

TEST_CASE("fine-tuning keeps the backbone, is deterministic, and snapshots") {
  auto data = tiny_set(6, 3);
  auto mcfg = small();
  TrainConfig pt;
  pt.epochs = 2;
  pt.batch_size = 3;
  pt.seed = 5;
  std::vector<maskio::GrayImage> imgs;
  for (const auto& s : data) imgs.push_back(s.image);
  auto pre = pretrain_backbone(imgs, pt, mcfg);
  CHECK(pre.epoch_losses.size() == 2);
  for (const auto& n : pre.backbone.names()) {
    CHECK(n.rfind(model::kBackbonePrefix, 0) == 0);
    CHECK(pre.backbone.entry(n).frozen);
  }
  Checkpoint bb;
  bb.model = mcfg;
  bb.store = pre.backbone.clone();

  auto init = init_from_backbone(mcfg, bb, 9);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seed = 11;
  tc.checkpoint_epochs = {1, 2, 3};
  std::vector<std::size_t> seen;
  auto a = finetune(data, init, tc, LossConfig{}, mcfg, [&](const EpochLog& e) { seen.push_back(e.epoch); });
  auto b = finetune(data, init, tc, LossConfig{}, mcfg);
  CHECK(seen == std::vector<std::size_t>{1, 2, 3});
  CHECK(a.snapshots.size() == 3);
  CHECK(a.step_losses == b.step_losses);
  CHECK(a.step_losses.size() == 6);
  for (const auto& n : pre.backbone.names()) {
    const auto x = pre.backbone.get(n).data(), y = a.store.get(n).data();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }
  Checkpoint ca{mcfg, a.store.clone(), a.optimizer, 3, a.rng_state, {}};
  Checkpoint cb{mcfg, b.store.clone(), b.optimizer, 3, b.rng_state, {}};
  CHECK(serialize_checkpoint(ca) == serialize_checkpoint(cb));
  // Something trainable moved.
  bool moved = false;
  for (const auto& n : init.optimizable_names()) {
    const auto x = init.get(n).data(), y = a.store.get(n).data();
    moved = moved || !std::equal(x.begin(), x.end(), y.begin());
  }
  CHECK(moved);
}

TEST_CASE("checkpoints") {
  TempDir dir("ckpt");
  auto mcfg = small();
  Checkpoint ck;
  ck.model = mcfg;
  ck.store = model::init_params<float>(mcfg, 3);
  ck.epoch = 7;
  ck.meta["note"] = "x";
  save_checkpoint(ck, dir / "a.eln");
  auto back = load_checkpoint(dir / "a.eln");
  CHECK(back.epoch == 7);
  CHECK(back.model == mcfg);
  CHECK(back.meta["note"] == "x");
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(ck));

  maskio::GrayImage img(32, 32, 1, 0.3f);
  auto img_t = model::images_to_tensor<float>({img});
  auto f0 = model::forward(img_t, ck.store, mcfg, model::ForwardMode::inference());
  auto f1 = model::forward(img_t, back.store, mcfg, model::ForwardMode::inference());
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::equal(f0[k].data().begin(), f0[k].data().end(), f1[k].data().begin()));

  auto bytes = serialize_checkpoint(ck);
  auto bad = bytes;
  bad[0] = 'X';
  try {
    deserialize_checkpoint(bad);
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);

  auto other = mcfg;
  other.stage_channels = {8, 16, 32, 16};
  auto dst = model::init_params<float>(other, 1);
  try {
    load_into(dst, ck.store);
    FAIL("expected an error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("shape mismatch for tensor ") != std::string::npos);
  }
  CHECK_THROWS_AS(init_from_backbone(other, ck, 1), ShapeError);
}

TEST_CASE("training input errors") {
  auto mcfg = small();
  auto init = model::init_params<float>(mcfg, 1);
  CHECK_THROWS_AS(finetune({}, init, TrainConfig{}, LossConfig{}, mcfg), Error);
  std::vector<Sample> odd{{maskio::GrayImage(30, 30), maskio::Mask(30, 30)}};
  CHECK_THROWS_AS(finetune(odd, init, TrainConfig{}, LossConfig{}, mcfg), ShapeError);
}
