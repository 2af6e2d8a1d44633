#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "support.hpp"

#include <fstream>

#include "elnet/config.hpp"
#include "elnet/error.hpp"

using namespace elnet;
using namespace elnet::config;
using testing::TempDir;

namespace {

std::filesystem::path write(const TempDir& d, const std::string& name, const std::string& text) {
  auto p = d.path() / name;
  std::ofstream(p) << text;
  return p;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("published defaults") {
  TempDir d("cfg1");
  auto c = load_config(write(d, "empty.toml", ""));
  CHECK(c.pipeline.train.batch_size == 12);
  CHECK(c.pipeline.train.learning_rate == doctest::Approx(1e-3));
  CHECK(c.pipeline.train.weight_decay == doctest::Approx(5e-4));
  CHECK(c.pipeline.train.epochs == 200);
  CHECK(c.pipeline.loss.lambda == doctest::Approx(0.5));
  CHECK(c.pipeline.mode == pipeline::Mode::kEnhance);
  CHECK(c.to_json() == load_config(std::nullopt).to_json());
}

TEST_CASE("file then overrides") {
  TempDir d("cfg2");
  auto p = write(d, "run.toml",
                 "# run\n[loss]\nlambda = 0.7  # mix\nalpha = [0.2,\n  0.3, 0.5]\n[pipeline]\nmode = \"annotate\"\n"
                 "ensemble_checkpoints = [4, 2, 0]\n[train]\nepochs = 20\n");
  auto c = load_config(p);
  CHECK(c.pipeline.loss.lambda == doctest::Approx(0.7));
  CHECK(c.pipeline.loss.alpha[2] == doctest::Approx(0.5));
  CHECK(c.pipeline.mode == pipeline::Mode::kAnnotate);
  CHECK(c.pipeline.ensemble_checkpoints == std::vector<std::size_t>{4, 2, 0});
  CHECK(load_config(p, {"loss.lambda=0.3"}).pipeline.loss.lambda == doctest::Approx(0.3));
  CHECK(load_config(p, {"train.epochs=30", "pipeline.mode=enhance"}).pipeline.train.epochs == 30);

  auto j = write(d, "run.json", R"({"train": {"batch_size": 4}, "lqe": {"tau_q": 0.6}})");
  auto cj = load_config(j);
  CHECK(cj.pipeline.train.batch_size == 4);
  CHECK(cj.pipeline.lqe.tau_q == doctest::Approx(0.6));
}

TEST_CASE("errors") {
  TempDir d("cfg3");
  CHECK_THROWS_AS(load_config(std::nullopt, {"loss.alpha=[0.5, 0.6, 0.1]"}), ConfigError);
  CHECK_THROWS_AS(load_config(std::nullopt, {"lqe.beta=[0.5, 0.5]"}), ConfigError);
  CHECK(error_of([] { load_config(std::nullopt, {"train.epoch=3"}); }).find("train.epoch") != std::string::npos);
  CHECK(error_of([] { load_config(std::nullopt, {"train.epochs=\"many\""}); }).find("train.epochs") !=
        std::string::npos);
  CHECK_THROWS_AS(load_config(std::nullopt, {"pipeline.mode=label"}), ConfigError);
  CHECK_THROWS_AS(load_config(std::nullopt, {"epochs=3"}), ConfigError);
  CHECK_THROWS_AS(load_config(std::nullopt, {"pipeline.ensemble_checkpoints=[300, 1, 0]"}), ConfigError);

  auto bad = write(d, "bad.toml", "[train]\nepochs = 3\nlr = = 2\n");
  CHECK(error_of([&] { load_config(bad); }).find("bad.toml:3") != std::string::npos);
  auto dup = write(d, "dup.toml", "[train]\nepochs = 3\n\nepochs = 4\n");
  CHECK(error_of([&] { load_config(dup); }).find("dup.toml:4") != std::string::npos);
  auto hdr = write(d, "hdr.toml", "[train\n");
  CHECK(error_of([&] { load_config(hdr); }).find(":1") != std::string::npos);
  CHECK_THROWS_AS(load_config(d.path() / "missing.toml"), ConfigError);
}

TEST_CASE("value literals") {
  CHECK(parse_value("3") == 3);
  CHECK(parse_value("-2.5e-1").get<double>() == doctest::Approx(-0.25));
  CHECK(parse_value("true") == true);
  CHECK(parse_value("'a # b'") == "a # b");
  CHECK(parse_value("[1, 2, 3]").size() == 3);
  CHECK_THROWS_AS(parse_value("[1, 2"), ConfigError);
  auto t = parse_toml("a.b = 1\n[s]\nk = \"v\" # c\n");
  CHECK(t["a"]["b"] == 1);
  CHECK(t["s"]["k"] == "v");
}
