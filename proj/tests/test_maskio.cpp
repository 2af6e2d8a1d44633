#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "support.hpp"

#include <fstream>

#include "elnet/error.hpp"
#include "elnet/maskio.hpp"
#include "oracles.hpp"

using namespace elnet;
using namespace elnet::maskio;
using testing::mask_from;
using testing::TempDir;

TEST_CASE("mask png round trip and threshold") {
  TempDir dir("maskio");
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    auto m = testing::random_mask(7 + i, 11, rng);
    save_mask(m, dir / "m.png");
    CHECK(load_mask(dir / "m.png") == m);
  }
  save_image(GrayImage(3, 4, 1, 1.f), dir / "white.png");
  CHECK(load_mask(dir / "white.png").count() == 12);

  // 127 is background, 128 foreground.
  GrayImage g(1, 2, 1, std::vector<float>{127.f / 255.f, 128.f / 255.f});
  save_image(g, dir / "edge.png");
  auto e = load_mask(dir / "edge.png");
  CHECK(e.at(0, 0) == 0);
  CHECK(e.at(0, 1) == 1);

  save_image(g, dir / "edge.pgm");
  CHECK(load_mask(dir / "edge.pgm") == e);
}

TEST_CASE("image loading errors") {
  TempDir dir("maskio_err");
  CHECK_THROWS_AS(load_mask(dir / "missing.png"), FormatError);
  std::ofstream(dir / "junk.png") << "not an image";
  CHECK_THROWS_AS(load_image(dir / "junk.png"), FormatError);
}

TEST_CASE("confusion counts") {
  auto gt = mask_from(2, 2, {{0, 0}, {0, 1}});
  auto pred = mask_from(2, 2, {{0, 0}, {1, 0}});
  auto c = confusion(pred, gt);
  CHECK(c == ConfusionCounts{1, 1, 1, 1});
  CHECK(accuracy(c) == 0.5);

  auto same = confusion(gt, gt);
  CHECK(same.fp == 0);
  CHECK(same.fn == 0);
  auto comp = confusion(gt.complement(), gt);
  CHECK(comp.tp == 0);
  CHECK(comp.tn == 0);
  CHECK(accuracy(confusion(gt, gt)) == 1.0);
  CHECK(accuracy(comp) == 0.0);
  CHECK_THROWS_AS(confusion(Mask(2, 3), Mask(3, 2)), ShapeError);
}

TEST_CASE("iou and dice") {
  auto a = mask_from(3, 3, {{0, 0}, {1, 1}});
  CHECK(iou(a, a) == 1.0);
  CHECK(dice(a, a) == 1.0);
  auto b = mask_from(3, 3, {{2, 2}, {2, 1}});
  CHECK(iou(a, b) == 0.0);
  CHECK(dice(a, b) == 0.0);
  auto c = mask_from(3, 3, {{0, 0}, {2, 2}});
  CHECK(iou(a, c) == doctest::Approx(1.0 / 3));
  CHECK(dice(a, c) == 0.5);
}

TEST_CASE("miou") {
  auto gt = mask_from(2, 2, {{0, 0}, {0, 1}});
  CHECK(miou(gt, gt) == 1.0);
  auto pred = mask_from(2, 2, {{0, 0}});
  CHECK(miou(pred, gt) == doctest::Approx(7.0 / 12));
  CHECK(miou(gt.complement(), gt) == 0.0);
}

TEST_CASE("metrics agree with enumeration on random pairs") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> side(1, 16);
  std::uniform_real_distribution<double> dens(0.0, 1.0);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t h = side(rng), w = side(rng);
    auto p = testing::random_mask(h, w, rng, dens(rng));
    auto g = testing::random_mask(h, w, rng, dens(rng));
    REQUIRE(iou(p, g) == oracle::iou(p, g));
    REQUIRE(dice(p, g) == oracle::dice(p, g));
    REQUIRE(accuracy(confusion(p, g)) == oracle::accuracy(p, g));
    REQUIRE(miou(p, g) == oracle::miou(p, g));
  }
}

TEST_CASE("evaluate_pairs pools counts") {
  auto a = mask_from(2, 2, {{0, 0}});
  auto b = mask_from(2, 2, {{0, 0}, {1, 1}});
  auto rep = evaluate_pairs({{"x", {a, a}}, {"y", {a, b}}});
  REQUIRE(rep.per_image.size() == 2);
  CHECK(rep.per_image[0].miou == 1.0);
  CHECK(rep.acc == doctest::Approx(7.0 / 8));
  ConfusionCounts pooled = confusion(a, a);
  pooled += confusion(a, b);
  CHECK(rep.miou == miou(pooled));
  CHECK(rep.to_json().contains("per_image"));
}

TEST_CASE("manifest round trip") {
  TempDir dir("manifest");
  DatasetManifest m;
  ManifestRecord r1;
  r1.image_path = "images/a.png";
  r1.label_path = "labels/a.png";
  r1.provenance = Provenance::kManual;
  r1.quality = 0.91;
  r1.extra["gt_path"] = "gt/a.png";
  ManifestRecord r2;
  r2.image_path = "images/b.png";
  r2.split = Split::kTest;
  r2.provenance = Provenance::kAuto;
  m.records = {r1, r2};
  write_manifest(m, dir / "m.jsonl");
  auto back = read_manifest(dir / "m.jsonl");
  CHECK(back == m);
  CHECK(*back.records[0].quality == doctest::Approx(0.91).epsilon(1e-6));
  CHECK(back.records[0].extra["gt_path"] == "gt/a.png");
  CHECK_FALSE(back.records[1].label_path.has_value());
  CHECK(back.resolve("images/a.png") == dir.path() / "images/a.png");
  CHECK(back.find("images/b.png") == &back.records[1]);
}

TEST_CASE("manifest errors name the line") {
  TempDir dir("manifest_err");
  {
    std::ofstream f(dir / "bad.jsonl");
    f << R"({"image_path":"a.png"})" << '\n' << R"({"label_path":"b.png"})" << '\n';
  }
  try {
    read_manifest(dir / "bad.jsonl");
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    CHECK(std::string(e.what()).find("image_path") != std::string::npos);
  }
  {
    std::ofstream f(dir / "dup.jsonl");
    f << R"({"image_path":"a.png"})" << '\n' << R"({"image_path":"a.png"})" << '\n';
  }
  CHECK_THROWS_AS(read_manifest(dir / "dup.jsonl"), FormatError);
  {
    std::ofstream f(dir / "q.jsonl");
    f << R"({"image_path":"a.png","quality":1.5})" << '\n';
  }
  CHECK_THROWS_AS(read_manifest(dir / "q.jsonl"), FormatError);
  CHECK_THROWS_AS(parse_provenance("guessed"), FormatError);
}
