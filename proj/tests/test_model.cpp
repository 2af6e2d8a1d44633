#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "support.hpp"

#include <cmath>

#include "elnet/error.hpp"
#include "elnet/model.hpp"

using namespace elnet;
using namespace elnet::model;
using ndarr::BnMode;
using ndarr::Tensor64;
using ndarr::Tensor32;
using ndarr::Shape;

namespace {

Tensor64 rand64(const Shape& s, std::mt19937_64& rng, bool grad = false) {
  std::normal_distribution<double> d(0, 1);
  std::vector<double> v(ndarr::numel(s));
  for (auto& x : v) x = d(rng);
  return Tensor64(s, std::move(v), grad);
}

ModelConfig small() {
  ModelConfig c;
  c.stage_channels = {8, 16, 16, 16};
  c.adapter_bottleneck = 4;
  c.rfb_branch_channels = 8;
  c.decoder_channels = 8;
  return c;
}

bool same(const Tensor64& a, const Tensor64& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

ndarr::GradCheckOptions opts(double tol) {
  ndarr::GradCheckOptions o;
  o.step = 1e-4;
  o.retries = 3;
  o.tol = tol;
  o.max_entries_per_tensor = 12;
  return o;
}

Tensor64 project(const Tensor64& y, const Tensor64& r) { return ndarr::sum(ndarr::mul(y, r)); }

}  // namespace

TEST_CASE("parameter store partitions") {
  auto s = init_params<float>(ModelConfig{}, 1);
  for (const auto& n : s.frozen_names()) CHECK(n.rfind(kBackbonePrefix, 0) == 0);
  for (const auto& n : s.optimizable_names()) {
    CHECK(n.rfind(kBackbonePrefix, 0) != 0);
    CHECK_FALSE(s.entry(n).buffer);
  }
  CHECK(s.contains("decoder.b1.eam.conv.w"));
  CHECK(s.contains("adapter.s1.down"));
  CHECK(s.entry("decoder.b1.bn1.running_mean").buffer);
  CHECK_THROWS_AS(s.get("nope"), Error);
  // Same seed, same weights.
  auto t = init_params<float>(ModelConfig{}, 1);
  for (const auto& n : s.names())
    CHECK(std::equal(s.get(n).data().begin(), s.get(n).data().end(), t.get(n).data().begin()));
}

TEST_CASE("adapter") {
  std::mt19937_64 rng(1);
  auto store = init_params<double>(small(), 2);
  auto x = rand64({2, 8, 6, 6}, rng);
  CHECK(same(adapter_forward(x, store, "adapter.s2", true), x));
  const auto off = adapter_forward(x, store, "adapter.s2", false);
  for (double v : off.data()) CHECK(v == 0.0);

  auto up = rand64(store.get("adapter.s2.up").shape(), rng);
  store.get("adapter.s2.up") = up;
  auto down = store.get("adapter.s2.down").detach();
  down.set_requires_grad(true);
  store.get("adapter.s2.down") = down;
  auto r = rand64({2, 8, 6, 6}, rng);
  auto rep = ndarr::grad_check([&] { return project(adapter_forward(x, store, "adapter.s2", true), r); }, {down},
                               opts(1e-5));
  CHECK(rep.pass);
  CHECK_THROWS_AS(adapter_forward(rand64({1, 5, 4, 4}, rng), store, "adapter.s2", true), ShapeError);
}

TEST_CASE("rfb") {
  std::mt19937_64 rng(3);
  auto store = init_params<double>(small(), 4);
  auto zero = Tensor64::zeros({1, 16, 5, 5});
  auto y = rfb_forward(zero, store, "rfb.s2", false);
  CHECK(y.dim(1) == ModelConfig::rfb_out);
  for (double v : y.data()) CHECK(v == 0.0);
  CHECK(rfb_forward(Tensor64::zeros({1, 8, 5, 5}), store, "rfb.s1", false).dim(1) == 64);

  auto x = rand64({2, 16, 8, 8}, rng, true);
  auto r = rand64({2, 64, 8, 8}, rng);
  std::vector<Tensor64> leaves{x};
  for (const auto& n : store.names())
    if (n.rfind("rfb.s2.", 0) == 0) {
      auto t = store.get(n).detach();
      t.set_requires_grad(true);
      store.get(n) = t;
      leaves.push_back(t);
    }
  CHECK(leaves.size() == 5);
  auto rep = ndarr::grad_check([&] { return project(rfb_forward(x, store, "rfb.s2", false), r); }, leaves, opts(1e-4));
  CHECK(rep.pass);
}

TEST_CASE("eam") {
  std::mt19937_64 rng(5);
  auto store = init_params<double>(small(), 6);
  const std::string p = "decoder.b1.eam";
  auto x = rand64({2, 64, 4, 4}, rng);

  SUBCASE("zero conv and identity statistics gate at one half") {
    for (auto& v : store.get(p + ".conv.w").mutable_data()) v = 0;
    auto [out, gate] = eam_forward(x, store, p, BnMode::kEval, false);
    for (double g : gate.data()) CHECK(g == 0.5);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == 0.5 * x.at(i));
  }
  SUBCASE("zero input") {
    auto [out, gate] = eam_forward(Tensor64::zeros({1, 64, 4, 4}), store, p, BnMode::kEval, false);
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("gate range") {
    auto [out, gate] = eam_forward(x, store, p, BnMode::kTrain, false);
    for (std::size_t i = 0; i < out.numel(); ++i) {
      CHECK(gate.at(i) > 0.0);
      CHECK(gate.at(i) < 1.0);
      CHECK(std::abs(out.at(i)) <= std::abs(x.at(i)));
    }
  }
  SUBCASE("gradients") {
    auto xl = rand64({2, 64, 4, 4}, rng, true);
    std::vector<Tensor64> leaves{xl};
    for (const auto* n : {".conv.w", ".bn.gamma", ".bn.beta"}) {
      auto t = store.get(p + n).detach();
      t.set_requires_grad(true);
      store.get(p + n) = t;
      leaves.push_back(t);
    }
    auto r = rand64({2, 64, 4, 4}, rng);
    auto o = opts(1e-5);
    auto rep = ndarr::grad_check([&] { return project(eam_forward(xl, store, p, BnMode::kTrain, false).first, r); },
                                 leaves, o);
    CHECK(rep.pass);
  }
}

TEST_CASE("encoder") {
  std::mt19937_64 rng(7);
  ModelConfig cfg;
  auto store = init_params<double>(cfg, 8);
  auto img = rand64({1, 1, 64, 64}, rng);
  auto f = encoder_forward(img, store, cfg, ForwardMode::inference());
  const std::size_t sizes[] = {32, 16, 8, 4};
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(f[k].dim(1) == cfg.stage_channels[k]);
    CHECK(f[k].dim(2) == sizes[k]);
    CHECK(f[k].dim(3) == sizes[k]);
  }
  // Zero-initialised residual adapters are the identity.
  ForwardMode plain = ForwardMode::inference();
  plain.use_adapters = false;
  auto g = encoder_forward(img, store, cfg, plain);
  for (std::size_t k = 0; k < 4; ++k) CHECK(same(f[k], g[k]));
  auto again = encoder_forward(img, store, cfg, ForwardMode::inference());
  for (std::size_t k = 0; k < 4; ++k) CHECK(same(f[k], again[k]));
  CHECK_THROWS_AS(encoder_forward(rand64({1, 1, 20, 20}, rng), store, cfg, ForwardMode::inference()), ShapeError);
}

TEST_CASE("decoder outputs and eam toggle") {
  std::mt19937_64 rng(9);
  auto cfg = small();
  auto store = init_params<double>(cfg, 10);
  auto img = rand64({2, 1, 32, 32}, rng);
  auto heads = forward(img, store, cfg, ForwardMode::inference());
  for (const auto& h : heads) CHECK(h.shape() == Shape{2, 1, 32, 32});

  auto off = cfg;
  off.eam_enabled = false;
  auto plain = forward(img, store, off, ForwardMode::inference());
  CHECK_FALSE(same(plain[2], heads[2]));
  // The disabled path ignores the attention weights entirely.
  for (auto& v : store.get("decoder.b1.eam.conv.w").mutable_data()) v = 3.0;
  CHECK(same(forward(img, store, off, ForwardMode::inference())[2], plain[2]));
  CHECK_FALSE(same(forward(img, store, cfg, ForwardMode::inference())[2], heads[2]));
}

TEST_CASE("decoder gradients on a 16x16 instance") {
  std::mt19937_64 rng(11);
  auto cfg = small();
  auto store = init_params<double>(cfg, 12);
  std::array<Tensor64, 4> r;
  const std::size_t s[] = {8, 4, 2, 1};
  for (std::size_t k = 0; k < 4; ++k) r[k] = rand64({2, 64, s[k], s[k]}, rng, true);
  std::vector<Tensor64> leaves(r.begin(), r.end());
  for (const auto& n : store.optimizable_names())
    if (n.rfind("decoder.", 0) == 0 || n.rfind("head.", 0) == 0) {
      auto t = store.get(n).detach();
      t.set_requires_grad(true);
      store.get(n) = t;
      leaves.push_back(t);
    }
  std::array<Tensor64, 3> rr{rand64({2, 1, 16, 16}, rng), rand64({2, 1, 16, 16}, rng), rand64({2, 1, 16, 16}, rng)};
  auto f = [&] {
    auto h = decoder_forward(r, store, cfg, ForwardMode::finetune(), 16, 16);
    return ndarr::add(ndarr::add(project(h[0], rr[0]), project(h[1], rr[1])), project(h[2], rr[2]));
  };
  auto o = opts(1e-4);
  o.max_entries_per_tensor = 4;
  auto rep = ndarr::grad_check(f, leaves, o);
  CHECK(rep.pass);
}

TEST_CASE("logits to mask") {
  std::vector<float> lo(6, -10.f), hi(6, 10.f), zero(6, 0.f);
  CHECK(logits_to_mask(lo, 2, 3).count() == 0);
  CHECK(logits_to_mask(hi, 2, 3).count() == 6);
  // sigmoid(0) = 0.5 is not above the threshold.
  CHECK(logits_to_mask(zero, 2, 3).count() == 0);
}

TEST_CASE("predict returns the input size") {
  auto cfg = small();
  auto store = init_params<float>(cfg, 13);
  maskio::GrayImage img(32, 32, 1, 0.4f);
  auto m = predict(img, store, cfg);
  CHECK(m.height() == 32);
  CHECK(m.width() == 32);
  auto batch = predict_batch({img, img}, store, cfg);
  CHECK(batch[0] == m);
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.adapter_bottleneck = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(ModelConfig::from_json(ModelConfig{}.to_json()) == ModelConfig{});
}
