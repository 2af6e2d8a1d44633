#include "elnet/gradcheck_suite.hpp"

#include "elnet/model.hpp"
#include "elnet/train.hpp"

#include <chrono>
#include <random>

namespace elnet::gradsuite {

using ndarr::BnMode;
using ndarr::GradCheckOptions;
using ndarr::Shape;
using ndarr::Tensor64;
using Store = model::ParamStore<double>;

namespace {

Tensor64 random_tensor(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(ndarr::numel(s));
  for (auto& x : v) x = d(rng);
  return Tensor64(s, std::move(v));
}

Tensor64 leaf(Tensor64 t) {
  t.set_requires_grad(true);
  return t;
}

// Random projection to a scalar so every output element carries a distinct weight.
Tensor64 project(const Tensor64& y, const Tensor64& r) { return ndarr::sum(ndarr::mul(y, r)); }

std::vector<maskio::Mask> random_masks(std::size_t n, std::size_t size, std::mt19937_64& rng) {
  std::vector<maskio::Mask> out;
  for (std::size_t i = 0; i < n; ++i) {
    // Random rectangle so the boundary weights are not constant.
    const std::size_t y0 = rng() % (size / 2), x0 = rng() % (size / 2);
    const std::size_t y1 = y0 + 2 + rng() % (size / 2), x1 = x0 + 2 + rng() % (size / 2);
    maskio::Mask m(size, size);
    for (std::size_t y = y0; y < std::min(y1, size); ++y)
      for (std::size_t x = x0; x < std::min(x1, size); ++x) m.set(y, x, true);
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<Tensor64> leaves_with_prefix(Store& s, const std::vector<std::string>& prefixes) {
  std::vector<Tensor64> out;
  for (const auto& [name, e] : s.entries()) {
    if (e.buffer) continue;
    for (const auto& p : prefixes)
      if (name.rfind(p, 0) == 0) {
        auto& t = s.get(name);
        t.set_requires_grad(true);
        out.push_back(t);
        break;
      }
  }
  return out;
}

// Adapter up-projections start at zero; give them values so the branch is exercised.
void randomize_adapters(Store& s, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 0.3);
  for (const auto& n : s.names())
    if (n.rfind("adapter.", 0) == 0 && n.size() > 3 && n.substr(n.size() - 3) == ".up")
      for (auto& v : s.get(n).mutable_data()) v = d(rng);
}

template <class F>
CaseResult timed(const std::string& name, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  CaseResult r{name, f(), 0};
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace

std::vector<CaseResult> run_suite(const SuiteOptions& o) {
  std::mt19937_64 rng(o.seed);
  GradCheckOptions go;
  go.step = o.step;
  go.retries = o.retries;
  go.retry_above = o.retry_above;
  go.tol = o.tol;
  go.floor = o.floor;
  go.max_entries_per_tensor = o.entries_per_tensor;
  go.seed = o.seed;
  const std::size_t n = o.batch, hw = o.size;
  model::ModelConfig mcfg;
  mcfg.stage_channels = {8, 16, 16, 16};
  mcfg.adapter_bottleneck = 4;
  mcfg.rfb_branch_channels = 8;
  mcfg.decoder_channels = 8;
  std::vector<CaseResult> out;

  out.push_back(timed("eam", [&] {
    auto store = model::init_params<double>(mcfg, o.seed);
    auto x = leaf(random_tensor({n, 64, hw, hw}, rng));
    auto r = random_tensor({n, 64, hw, hw}, rng);
    auto leaves = leaves_with_prefix(store, {"decoder.b1.eam."});
    leaves.push_back(x);
    return ndarr::grad_check(
        [&] { return project(model::eam_forward(x, store, "decoder.b1.eam", BnMode::kTrain, false).first, r); }, leaves,
        go);
  }));

  out.push_back(timed("adapter", [&] {
    auto store = model::init_params<double>(mcfg, o.seed);
    randomize_adapters(store, rng);
    const std::size_t c = mcfg.stage_channels[0];
    auto x = leaf(random_tensor({n, c, hw, hw}, rng));
    auto r = random_tensor({n, c, hw, hw}, rng);
    auto leaves = leaves_with_prefix(store, {"adapter.s2."});
    leaves.push_back(x);
    return ndarr::grad_check([&] { return project(model::adapter_forward(x, store, "adapter.s2", true), r); }, leaves,
                             go);
  }));

  out.push_back(timed("rfb", [&] {
    auto store = model::init_params<double>(mcfg, o.seed);
    const std::size_t c = mcfg.stage_channels[1];
    auto x = leaf(random_tensor({n, c, hw, hw}, rng));
    auto r = random_tensor({n, model::ModelConfig::rfb_out, hw, hw}, rng);
    auto leaves = leaves_with_prefix(store, {"rfb.s2."});
    leaves.push_back(x);
    return ndarr::grad_check([&] { return project(model::rfb_forward(x, store, "rfb.s2", false), r); }, leaves, go);
  }));

  out.push_back(timed("decoder", [&] {
    auto store = model::init_params<double>(mcfg, o.seed);
    std::array<Tensor64, 4> feats;
    std::vector<Tensor64> leaves = leaves_with_prefix(store, {"decoder.", "head."});
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t s = std::max<std::size_t>(1, hw >> k);
      feats[k] = leaf(random_tensor({n, model::ModelConfig::rfb_out, s, s}, rng));
      leaves.push_back(feats[k]);
    }
    std::array<Tensor64, 3> rs;
    for (auto& r : rs) r = random_tensor({n, 1, hw, hw}, rng);
    return ndarr::grad_check(
        [&] {
          auto heads = model::decoder_forward(feats, store, mcfg, model::ForwardMode::finetune(), hw, hw);
          return ndarr::add(ndarr::add(project(heads[0], rs[0]), project(heads[1], rs[1])), project(heads[2], rs[2]));
        },
        leaves, go);
  }));

  const train::LossConfig lcfg;
  const auto masks = random_masks(n, hw, rng);
  const auto targets = train::make_targets<double>(masks, lcfg);
  auto loss_case = [&](const std::string& name, auto&& fn) {
    out.push_back(timed(name, [&] {
      auto logits = leaf(random_tensor({n, 1, hw, hw}, rng, 2.0));
      return ndarr::grad_check([&] { return fn(logits); }, {logits}, go);
    }));
  };
  loss_case("wbce", [&](const Tensor64& s) { return train::wbce_loss(s, targets.g, targets.w, lcfg.prob_clip); });
  loss_case("wiou", [&](const Tensor64& s) { return train::wiou_loss(s, targets.g, targets.w, lcfg.prob_clip); });
  loss_case("combined", [&](const Tensor64& s) { return train::combined_loss(s, targets, lcfg); });

  out.push_back(timed("total", [&] {
    std::array<Tensor64, 3> heads;
    std::vector<Tensor64> leaves;
    for (auto& h : heads) {
      h = leaf(random_tensor({n, 1, hw, hw}, rng, 2.0));
      leaves.push_back(h);
    }
    train::LossConfig uneven = lcfg;
    uneven.alpha = {0.2, 0.3, 0.5};
    return ndarr::grad_check([&] { return train::total_loss(heads, targets, uneven); }, leaves, go);
  }));

  if (o.include_model) {
    out.push_back(timed("model", [&] {
      auto store = model::init_params<double>(mcfg, o.seed);
      randomize_adapters(store, rng);
      auto leaves = leaves_with_prefix(store, {""});
      auto img = random_tensor({n, 1, hw, hw}, rng, 0.5);
      auto mo = go;
      mo.max_entries_per_tensor = o.model_entries_per_tensor;
      return ndarr::grad_check(
          [&] { return train::total_loss(model::forward(img, store, mcfg, model::ForwardMode::finetune()), targets, lcfg); },
          leaves, mo);
    }));
  }
  return out;
}

}  // namespace elnet::gradsuite
