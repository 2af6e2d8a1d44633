#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "support.hpp"

#include <fstream>
#include <set>

#include "elnet/error.hpp"
#include "elnet/synth.hpp"

using namespace elnet;
using namespace elnet::synth;
using testing::TempDir;

namespace {

CorruptionSpec identity_spec() {
  CorruptionSpec c;
  c.poly_tolerance = 0;
  c.morph_rate = 0;
  c.fp_rate = 0;
  c.omission_rate = 0;
  return c;
}

}  // namespace

TEST_CASE("noise-free scenes are piecewise constant with darker targets") {
  SceneSpec s;
  s.speckle = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    s.seed = seed;
    auto sc = gen_scene(s);
    std::set<float> fg, bg;
    for (std::size_t y = 0; y < s.size; ++y)
      for (std::size_t x = 0; x < s.size; ++x) (sc.gt.at(y, x) ? fg : bg).insert(sc.image.at(0, y, x));
    REQUIRE(fg.size() == 1);
    REQUIRE(bg.size() == 1);
    CHECK(*fg.begin() < *bg.begin());
  }
}

TEST_CASE("scenes are seeded and respect the foreground budget") {
  SceneSpec s;
  s.seed = 4;
  auto a = gen_scene(s), b = gen_scene(s);
  CHECK(a.image == b.image);
  CHECK(a.gt == b.gt);
  s.seed = 5;
  CHECK_FALSE(gen_scene(s).gt == a.gt);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    s.seed = seed;
    auto sc = gen_scene(s);
    const double frac = double(sc.gt.count()) / double(sc.gt.size());
    CHECK(frac > 0.0);
    CHECK(frac <= s.fg_budget + 0.05);
  }
}

TEST_CASE("morphology and components") {
  maskio::Mask dot(9, 9);
  dot.set(4, 4, true);
  auto d = dilate(dot, 1);
  CHECK(d.count() == 5);  // radius-1 disk is the plus shape
  CHECK(erode(d, 1) == dot);
  CHECK(dilate(dot, 2).count() == 13);

  maskio::Mask two(6, 6);
  two.set(0, 0, true);
  two.set(1, 1, true);  // diagonal neighbour: same component
  two.set(4, 4, true);
  auto cc = connected_components(two);
  REQUIRE(cc.size() == 2);
  CHECK(cc[0].count() + cc[1].count() == 3);
}

TEST_CASE("polygonize") {
  maskio::Mask rect(12, 12);
  for (std::size_t y = 2; y < 9; ++y)
    for (std::size_t x = 3; x < 10; ++x) rect.set(y, x, true);
  CHECK(polygonize(rect, 0.0) == rect);
  CHECK(polygonize(rect, 1.5) == rect);
  SceneSpec s;
  s.seed = 3;
  auto gt = gen_scene(s).gt;
  auto p = polygonize(gt, 2.0);
  CHECK(maskio::iou(p, gt) > 0.7);
}

TEST_CASE("corruption") {
  SceneSpec s;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    s.seed = seed;
    auto gt = gen_scene(s).gt;
    auto id = identity_spec();
    id.seed = seed;
    CHECK(corrupt_label(gt, id) == gt);

    auto omit = identity_spec();
    omit.omission_rate = 1.0;
    CHECK(corrupt_label(gt, omit).count() == 0);

    CorruptionSpec def;
    def.seed = seed;
    CHECK(maskio::miou(corrupt_label(gt, def), gt) < 1.0);
    CHECK(corrupt_label(gt, def) == corrupt_label(gt, def));
  }
  CorruptionSpec bad;
  bad.morph_rate = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("benchmark and dataset") {
  SceneSpec s;
  s.seed = 42;
  CorruptionSpec c;
  c.seed = 42;
  auto a = gen_benchmark(50, s, c), b = gen_benchmark(50, s, c);
  REQUIRE(a.size() == 50);
  std::size_t differ = 0, test = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].coarse == b[i].coarse);
    differ += !(a[i].coarse == a[i].gt);
    test += a[i].split == maskio::Split::kTest;
  }
  CHECK(differ > 0);
  CHECK(test == 10);
  CHECK(a.back().split == maskio::Split::kTest);

  TempDir dir("synth");
  auto m = gen_dataset(50, s, c, dir.path());
  REQUIRE(m.records.size() == 50);
  for (const auto& r : m.records) {
    CHECK(std::filesystem::exists(m.resolve(r.image_path)));
    CHECK(std::filesystem::exists(m.resolve(*r.label_path)));
    CHECK(std::filesystem::exists(m.resolve(r.extra["gt_path"].get<std::string>())));
    CHECK(r.provenance == maskio::Provenance::kCoarse);
  }
  CHECK(maskio::read_manifest(dir / "manifest.jsonl") == m);
  TempDir dir2("synth2");
  gen_dataset(50, s, c, dir2.path());
  std::ifstream f1(dir / "manifest.jsonl"), f2(dir2 / "manifest.jsonl");
  std::string t1((std::istreambuf_iterator<char>(f1)), {}), t2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(t1 == t2);
  CHECK(maskio::load_mask(m.resolve(*m.records[7].label_path)) == a[7].coarse);
}

TEST_CASE("label-quality protocol") {
  SceneSpec s;
  s.seed = 42;
  CorruptionSpec c;
  c.seed = 42;
  auto items = gen_benchmark(50, s, c);
  std::vector<train::Sample> tr;
  std::vector<maskio::GrayImage> imgs;
  std::vector<maskio::Mask> hq, orig;
  for (const auto& it : items) {
    if (it.split == maskio::Split::kTrain) {
      tr.push_back({it.image, it.coarse});
    } else {
      imgs.push_back(it.image);
      hq.push_back(it.gt);
      orig.push_back(it.coarse);
    }
  }
  RefNetConfig rc;
  rc.epochs = 10;
  auto rep = eval_protocol(tr, imgs, hq, orig, hq, rc);
  REQUIRE(rep.rows.size() == 3);
  CHECK(rep.row("Test-HQ").delta_miou == 0.0);
  CHECK(rep.row("Test-Enh").delta_miou == 0.0);
  CHECK(rep.row("Test-Enh").delta_acc == 0.0);
  CHECK(std::abs(rep.row("Test-Orig").delta_miou) > 0.0);
  auto j = rep.to_json();
  for (const auto& row : j) {
    for (const char* k : {"miou", "delta_miou", "acc", "delta_acc"}) CHECK(row.contains(k));
  }
  auto again = eval_protocol(tr, imgs, hq, orig, hq, rc);
  CHECK(again.to_json() == j);
  orig.pop_back();
  CHECK_THROWS_AS(eval_protocol(tr, imgs, hq, orig, hq, rc), Error);
}
