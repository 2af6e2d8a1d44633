#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "support.hpp"

#include <cmath>
#include <functional>

#include "elnet/error.hpp"
#include "elnet/ndarr.hpp"

using namespace elnet;
using namespace elnet::ndarr;

namespace {

Tensor64 rand64(const Shape& s, std::mt19937_64& rng, double lo = -1, double hi = 1, bool grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = d(rng);
  return Tensor64(s, std::move(v), grad);
}

// Values bounded away from zero, for ops with a kink there.
Tensor64 rand_away(const Shape& s, std::mt19937_64& rng, double gap) {
  std::uniform_real_distribution<double> d(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = sign(rng) ? d(rng) : -d(rng);
  return Tensor64(s, std::move(v), true);
}

Tensor64 project(const Tensor64& y, const Tensor64& r) { return sum(mul(y, r)); }

GradCheckOptions strict() {
  GradCheckOptions o;
  o.step = 1e-5;
  o.tol = 1e-5;
  o.retries = 2;
  o.floor = 1e-4;  // FD roundoff is ~1e-10 absolute here
  return o;
}

}  // namespace

TEST_CASE("conv2d forward") {
  auto zeros = Tensor64::zeros({1, 2, 4, 4});
  std::mt19937_64 rng(1);
  auto w = rand64({3, 2, 3, 3}, rng, -1, 1, false);
  auto y = conv2d<double>(zeros, w, std::nullopt, 1);
  for (double v : y.data()) CHECK(v == 0.0);

  auto ones = Tensor64::full({1, 1, 3, 3}, 1.0);
  auto k = Tensor64::full({1, 1, 3, 3}, 1.0);
  auto s = conv2d<double>(ones, k, std::nullopt, 1);
  REQUIRE(s.shape() == Shape{1, 1, 3, 3});
  CHECK(s.at(4) == 9.0);
  CHECK(s.at(0) == 4.0);
  CHECK(s.at(8) == 4.0);
  CHECK(s.at(1) == 6.0);

  auto x = rand64({2, 1, 5, 5}, rng, -1, 1, false);
  auto id = conv2d<double>(x, Tensor64::full({1, 1, 1, 1}, 1.0), std::nullopt, 0);
  CHECK(std::equal(id.data().begin(), id.data().end(), x.data().begin()));

  // Dilation 2 with padding 2 keeps the size; taps sit two pixels apart.
  auto d = conv2d<double>(ones, k, std::nullopt, 2, 2);
  REQUIRE(d.shape() == Shape{1, 1, 3, 3});
  CHECK(d.at(0) == 4.0);  // taps at (0,0),(0,2),(2,0),(2,2) inside
  CHECK(d.at(4) == 1.0);  // only the centre tap lands inside
}

TEST_CASE("conv2d rejects bad shapes") {
  auto x = Tensor64::zeros({1, 2, 4, 4});
  CHECK_THROWS_AS(conv2d<double>(x, Tensor64::zeros({1, 3, 3, 3}), std::nullopt, 1), ShapeError);
  CHECK_THROWS_AS(conv2d<double>(x, Tensor64::zeros({1, 2, 2, 2}), std::nullopt, 1), ShapeError);
}

TEST_CASE("batchnorm2d") {
  std::mt19937_64 rng(2);
  auto x = rand64({3, 2, 4, 4}, rng, -2, 3, false);
  auto gamma = Tensor64::full({2}, 1.0), beta = Tensor64::zeros({2});
  auto rm = Tensor64::zeros({2}), rv = Tensor64::full({2}, 1.0);

  SUBCASE("eval identity statistics") {
    auto y = batchnorm2d<double>(x, gamma, beta, rm, rv, BnMode::kEval, 1e-12);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)).epsilon(1e-10));
  }
  SUBCASE("eval constant input equal to the running mean gives beta") {
    auto c = Tensor64::full({2, 2, 3, 3}, 1.7);
    auto m = Tensor64::full({2}, 1.7);
    auto b = Tensor64(Shape{2}, std::vector<double>{0.25, -3.0});
    auto y = batchnorm2d<double>(c, gamma, b, m, rv, BnMode::kEval);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == (i < 9 || (i >= 18 && i < 27) ? 0.25 : -3.0));
  }
  SUBCASE("train mode normalises each channel") {
    auto y = batchnorm2d<double>(x, gamma, beta, rm, rv, BnMode::kTrain, 1e-12);
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0, s2 = 0;
      std::size_t n = 0;
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < 16; ++i) {
          const double v = y.at((b * 2 + c) * 16 + i);
          s += v, s2 += v * v, ++n;
        }
      CHECK(s / n == doctest::Approx(0.0).epsilon(1e-12).scale(1));
      CHECK(s2 / n == doctest::Approx(1.0).epsilon(1e-12));
    }
    // Running buffers move 10% toward the batch statistics.
    CHECK(rm.at(0) != 0.0);
  }
}

TEST_CASE("elementwise values") {
  CHECK(sigmoid(Tensor64::scalar(0.0)).item() == 0.5);
  CHECK(gelu(Tensor64::scalar(0.0)).item() == 0.0);
  auto u = upsample2x_nearest(Tensor64(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
  REQUIRE(u.shape() == Shape{1, 1, 4, 4});
  const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(std::equal(want.begin(), want.end(), u.data().begin()));
  auto p = avgpool2x2(u);
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{1, 2, 3, 4});

  // Half-pixel centres: sources -0.25, 0.25, 0.75, 1.25, clamped to [0, 1].
  auto b = upsample_bilinear(Tensor64(Shape{1, 1, 1, 2}, {1, 3}), 2);
  REQUIRE(b.shape() == Shape{1, 1, 2, 4});
  const std::vector<double> row{1, 1.5, 2.5, 3};
  CHECK(std::equal(row.begin(), row.end(), b.data().begin()));
  CHECK(std::equal(row.begin(), row.end(), b.data().begin() + 4));
  auto c = upsample_bilinear(Tensor64::full(Shape{2, 3, 3, 5}, 0.7), 4);
  CHECK(std::all_of(c.data().begin(), c.data().end(), [](double v) { return std::abs(v - 0.7) < 1e-15; }));
  CHECK(upsample_bilinear(Tensor64(Shape{1, 1, 1, 2}, {1, 3}), 1).data()[1] == 3.0);
}

TEST_CASE("backward on simple losses") {
  std::mt19937_64 rng(3);
  auto x = rand64({2, 3}, rng);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
  x.clear_grad();
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.at(i)));
}

TEST_CASE("backward accumulates and refuses a consumed graph") {
  auto x = Tensor64::full({3}, 2.0, true);
  auto y = sum(scale(x, 3.0));
  backward(y);
  CHECK_THROWS_AS(backward(y), Error);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 4.0);
  CHECK_THROWS_AS(backward(x), ShapeError);
}

TEST_CASE("non-leaf gradients are discarded") {
  auto x = Tensor64::full({4}, 1.5, true);
  auto h = mul(x, x);
  backward(sum(h));
  CHECK_FALSE(h.has_grad());
  CHECK(x.has_grad());
}

TEST_CASE("no-grad mode records nothing") {
  auto x = Tensor64::full({2}, 1.0, true);
  NoGradGuard ng;
  auto y = sum(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check on a polynomial") {
  std::mt19937_64 rng(4);
  auto x = rand64({5}, rng, -1, 1, false);
  auto rep = grad_check([](const Tensor64& t) { return sum(mul(t, t)); }, x, 1e-5, 1e-6);
  CHECK(rep.pass);
  CHECK(rep.checked == 5);
}

TEST_CASE("grad_check catches a wrong backward rule") {
  // square with derivative x instead of 2x
  auto bad_square = [](const Tensor64& t) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.at(i) * t.at(i);
    const std::vector<double> xs(t.data().begin(), t.data().end());
    return make_op<double>("bad_square", t.shape(), std::move(out), {t},
                           [xs](std::span<const double> g, std::span<std::vector<double>*> gin) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * xs[i];
                           });
  };
  std::mt19937_64 rng(5);
  auto x = rand64({4}, rng, 0.5, 1.0, false);
  auto rep = grad_check([&](const Tensor64& t) { return sum(bad_square(t)); }, x, 1e-5, 1e-5);
  CHECK_FALSE(rep.pass);
  CHECK(rep.max_rel_err == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("composite conv, batchnorm, sigmoid graph matches finite differences") {
  std::mt19937_64 rng(6);
  auto x = rand64({2, 2, 5, 5}, rng);
  auto w = rand64({3, 2, 3, 3}, rng);
  auto gamma = rand64({3}, rng, 0.5, 1.5), beta = rand64({3}, rng);
  auto rm = Tensor64::zeros({3}), rv = Tensor64::full({3}, 1.0);
  auto r = rand64({2, 3, 5, 5}, rng, -1, 1, false);
  auto rep = grad_check(
      [&] { return project(sigmoid(batchnorm2d<double>(conv2d<double>(x, w, std::nullopt, 1), gamma, beta, rm, rv, BnMode::kTrain)), r); },
      {x, w, gamma, beta}, strict());
  CHECK(rep.pass);
}

// Every differentiable op against central differences on 20 seeds.
TEST_CASE("op gradients over seeds") {
  using Leaves = std::vector<Tensor64>;
  struct OpCase {
    const char* name;
    std::function<std::pair<std::function<Tensor64()>, Leaves>(std::mt19937_64&)> make;
  };
  const Shape s4{2, 3, 4, 4};
  auto unary = [&](const char* name, auto op, auto gen) {
    return OpCase{name, [=](std::mt19937_64& rng) {
                    auto x = gen(rng);
                    Shape out_shape;
                    {
                      NoGradGuard ng;
                      out_shape = op(x).shape();
                    }
                    auto r = rand64(out_shape, rng, -1, 1, false);
                    return std::pair{std::function<Tensor64()>([=] { return project(op(x), r); }), Leaves{x}};
                  }};
  };
  auto binary = [&](const char* name, auto op, double lo_b) {
    return OpCase{name, [=](std::mt19937_64& rng) {
                    auto a = rand64(s4, rng), b = rand64(s4, rng, lo_b, 2.0);
                    Shape out_shape;
                    {
                      NoGradGuard ng;
                      out_shape = op(a, b).shape();
                    }
                    auto r = rand64(out_shape, rng, -1, 1, false);
                    return std::pair{std::function<Tensor64()>([=] { return project(op(a, b), r); }), Leaves{a, b}};
                  }};
  };
  auto gen = [&](double lo, double hi) { return [=](std::mt19937_64& rng) { return rand64(s4, rng, lo, hi); }; };

  std::vector<OpCase> cases{
      OpCase{"conv2d",
             [&](std::mt19937_64& rng) {
               auto x = rand64({2, 2, 6, 6}, rng), w = rand64({3, 2, 3, 3}, rng), b = rand64({3}, rng);
               auto r = rand64({2, 3, 6, 6}, rng, -1, 1, false);
               return std::pair{std::function<Tensor64()>(
                                    [=] { return project(conv2d<double>(x, w, std::optional(b), 2, 2), r); }),
                                Leaves{x, w, b}};
             }},
      OpCase{"batchnorm2d.eval",
             [&](std::mt19937_64& rng) {
               auto x = rand64(s4, rng), g = rand64({3}, rng), b = rand64({3}, rng);
               auto rm = rand64({3}, rng, -1, 1, false), rv = rand64({3}, rng, 0.5, 2, false);
               auto r = rand64(s4, rng, -1, 1, false);
               return std::pair{std::function<Tensor64()>([=]() mutable {
                                  return project(batchnorm2d<double>(x, g, b, rm, rv, BnMode::kEval), r);
                                }),
                                Leaves{x, g, b}};
             }},
      OpCase{"linear",
             [&](std::mt19937_64& rng) {
               auto x = rand64({4, 5}, rng), w = rand64({3, 5}, rng), b = rand64({3}, rng);
               auto r = rand64({4, 3}, rng, -1, 1, false);
               return std::pair{std::function<Tensor64()>([=] { return project(linear<double>(x, w, std::optional(b)), r); }),
                                Leaves{x, w, b}};
             }},
      unary("sigmoid", [](const Tensor64& x) { return sigmoid(x); }, gen(-4, 4)),
      unary("gelu", [](const Tensor64& x) { return gelu(x); }, gen(-3, 3)),
      unary("relu", [](const Tensor64& x) { return relu(x); },
            [&](std::mt19937_64& rng) { return rand_away(s4, rng, 0.05); }),
      unary("log", [](const Tensor64& x) { return ndarr::log(x); }, gen(0.3, 3)),
      unary("clamp", [](const Tensor64& x) { return clamp(x, -0.5, 0.5); },
            [&](std::mt19937_64& rng) {
              auto t = rand_away(s4, rng, 0.0);
              for (auto& v : t.mutable_data())
                if (std::abs(std::abs(v) - 0.5) < 0.05) v *= 0.8;
              return t;
            }),
      unary("scale", [](const Tensor64& x) { return scale(x, -1.7); }, gen(-1, 1)),
      unary("add_scalar", [](const Tensor64& x) { return add_scalar(x, 0.3); }, gen(-1, 1)),
      unary("sum", [](const Tensor64& x) { return sum(mul(x, x)); }, gen(-1, 1)),
      unary("mean", [](const Tensor64& x) { return mean(mul(x, x)); }, gen(-1, 1)),
      unary("sum_per_sample", [](const Tensor64& x) { return sum_per_sample(mul(x, x)); }, gen(-1, 1)),
      unary("upsample2x_nearest", [](const Tensor64& x) { return upsample2x_nearest(x); }, gen(-1, 1)),
      unary("upsample_nearest", [](const Tensor64& x) { return upsample_nearest(x, 4); }, gen(-1, 1)),
      unary("upsample_bilinear", [](const Tensor64& x) { return upsample_bilinear(x, 4); }, gen(-1, 1)),
      unary("avgpool2x2", [](const Tensor64& x) { return avgpool2x2(x); }, gen(-1, 1)),
      unary("reshape", [](const Tensor64& x) { return reshape(x, Shape{6, 16}); }, gen(-1, 1)),
      binary("add", [](const Tensor64& a, const Tensor64& b) { return add(a, b); }, -1),
      binary("sub", [](const Tensor64& a, const Tensor64& b) { return sub(a, b); }, -1),
      binary("mul", [](const Tensor64& a, const Tensor64& b) { return mul(a, b); }, -1),
      binary("div", [](const Tensor64& a, const Tensor64& b) { return div(a, b); }, 0.5),
      binary("concat_channels", [](const Tensor64& a, const Tensor64& b) { return concat_channels(a, b); }, -1),
      OpCase{"batchnorm2d.train",
             [&](std::mt19937_64& rng) {
               auto x = rand64(s4, rng), g = rand64({3}, rng), b = rand64({3}, rng);
               auto rm = Tensor64::zeros({3}), rv = Tensor64::full({3}, 1.0);
               auto r = rand64(s4, rng, -1, 1, false);
               return std::pair{std::function<Tensor64()>([=]() mutable {
                                  return project(batchnorm2d<double>(x, g, b, rm, rv, BnMode::kTrain), r);
                                }),
                                Leaves{x, g, b}};
             }},
  };
  for (const auto& c : cases) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 17);
      auto [f, leaves] = c.make(rng);
      auto opts = strict();
      opts.seed = seed;
      auto rep = grad_check(f, leaves, opts);
      INFO(std::string(c.name), " seed ", seed, " err ", rep.max_rel_err, " at ", rep.worst);
      CHECK(rep.pass);
    }
  }
}

TEST_CASE("float tensors train, double tensors check") {
  Tensor32 a(Shape{2}, {1.f, 2.f}, true);
  backward(sum(mul(a, a)));
  CHECK(a.grad()[1] == 4.f);
  auto d = a.cast<double>();
  CHECK(d.at(1) == 2.0);
}
