#include "elnet/synth.hpp"

#include "elnet/perturb.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

namespace elnet::synth {

using ndarr::Shape;
using ndarr::Tensor;

namespace {

double u01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * u01(rng); }
std::size_t uniform_count(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

void check_rate(double r, const char* key) {
  if (!(r >= 0 && r <= 1)) throw ConfigError(std::string("corruption.") + key + ": must lie in [0,1]");
}

Mask unite(const Mask& a, const Mask& b) {
  std::vector<std::uint8_t> bits(a.size());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = a[i] | b[i];
  return Mask(a.height(), a.width(), std::move(bits));
}

// Radially perturbed, rotated ellipse.
Mask draw_blob(std::size_t size, std::mt19937_64& rng, const SceneSpec& s) {
  const double n = static_cast<double>(size);
  const double cx = uniform(rng, 0.15, 0.85) * n, cy = uniform(rng, 0.15, 0.85) * n;
  const double r = uniform(rng, s.blob_radius_min, s.blob_radius_max) * n;
  const double aspect = uniform(rng, 0.6, 1.0);
  const double angle = uniform(rng, 0.0, std::numbers::pi);
  std::array<double, 3> amp{}, phase{};
  for (std::size_t m = 0; m < 3; ++m) {
    amp[m] = uniform(rng, 0.0, 0.12);
    phase[m] = uniform(rng, 0.0, 2 * std::numbers::pi);
  }
  const double ca = std::cos(angle), sa = std::sin(angle);
  Mask out(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double u = (ca * dx + sa * dy) / r, v = (-sa * dx + ca * dy) / (r * aspect);
      const double rho = std::hypot(u, v), th = std::atan2(v, u);
      double lim = 1.0;
      for (std::size_t m = 0; m < 3; ++m) lim += amp[m] * std::cos(static_cast<double>(m + 2) * th + phase[m]);
      if (rho <= lim) out.set(y, x, true);
    }
  return out;
}

double seg_dist(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * vx), py - (ay + t * vy));
}

// Thick quadratic Bezier curve.
Mask draw_ribbon(std::size_t size, std::mt19937_64& rng, const SceneSpec& s) {
  const double n = static_cast<double>(size);
  std::array<double, 6> p{};
  p[0] = uniform(rng, 0.05, 0.95) * n, p[1] = uniform(rng, 0.05, 0.95) * n;
  p[2] = uniform(rng, 0.2, 0.8) * n, p[3] = uniform(rng, 0.2, 0.8) * n;
  p[4] = uniform(rng, 0.05, 0.95) * n, p[5] = uniform(rng, 0.05, 0.95) * n;
  const double half = 0.5 * uniform(rng, s.ribbon_width_min, s.ribbon_width_max);
  constexpr std::size_t kSamples = 48;
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i <= kSamples; ++i) {
    const double t = static_cast<double>(i) / kSamples, a = (1 - t) * (1 - t), b = 2 * t * (1 - t), c = t * t;
    pts.emplace_back(a * p[0] + b * p[2] + c * p[4], a * p[1] + b * p[3] + c * p[5]);
  }
  Mask out(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double d = 1e300;
      for (std::size_t i = 0; i + 1 < pts.size(); ++i)
        d = std::min(d, seg_dist(static_cast<double>(x), static_cast<double>(y), pts[i].first, pts[i].second,
                                 pts[i + 1].first, pts[i + 1].second));
      if (d <= half) out.set(y, x, true);
    }
  return out;
}

constexpr std::array<std::array<int, 2>, 8> kRing{{{0, -1}, {-1, -1}, {-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}}};

struct Pt {
  int y, x;
  bool operator==(const Pt&) const = default;
};

// Outer boundary of an 8-connected component, clockwise, by Moore-neighbour
// tracing with Jacob's stopping criterion.
std::vector<Pt> trace_boundary(const Mask& m) {
  const int h = static_cast<int>(m.height()), w = static_cast<int>(m.width());
  auto fg = [&](Pt p) { return p.y >= 0 && p.y < h && p.x >= 0 && p.x < w && m.at(p.y, p.x); };
  Pt start{-1, -1};
  for (int y = 0; y < h && start.y < 0; ++y)
    for (int x = 0; x < w; ++x)
      if (m.at(y, x)) {
        start = {y, x};
        break;
      }
  if (start.y < 0) return {};
  const Pt b0{start.y, start.x - 1};
  std::vector<Pt> contour{start};
  Pt cur = start, back = b0;
  const std::size_t guard = 4 * m.size() + 16;
  for (std::size_t it = 0; it < guard; ++it) {
    int dir = 0;
    for (int k = 0; k < 8; ++k)
      if (cur.y + kRing[k][0] == back.y && cur.x + kRing[k][1] == back.x) dir = k;
    bool found = false;
    Pt next{}, prev{};
    for (int i = 1; i <= 8; ++i) {
      const int d = (dir + i) % 8;
      const Pt c{cur.y + kRing[d][0], cur.x + kRing[d][1]};
      if (fg(c)) {
        const int pd = (d + 7) % 8;
        next = c;
        prev = {cur.y + kRing[pd][0], cur.x + kRing[pd][1]};
        found = true;
        break;
      }
    }
    if (!found) break;
    if (next == start && prev == b0) break;
    contour.push_back(next);
    cur = next;
    back = prev;
  }
  return contour;
}

double point_line_dist(Pt p, Pt a, Pt b) {
  return seg_dist(p.x, p.y, a.x, a.y, b.x, b.y);
}

void douglas_peucker(const std::vector<Pt>& pts, std::size_t lo, std::size_t hi, double tol, std::vector<Pt>& out) {
  double best = -1;
  std::size_t idx = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    const double d = point_line_dist(pts[i], pts[lo], pts[hi]);
    if (d > best) best = d, idx = i;
  }
  if (best > tol) {
    douglas_peucker(pts, lo, idx, tol, out);
    douglas_peucker(pts, idx, hi, tol, out);
  } else {
    out.push_back(pts[hi]);
  }
}

std::vector<Pt> simplify_closed(const std::vector<Pt>& contour, double tol) {
  std::size_t far = 0;
  double best = -1;
  for (std::size_t i = 0; i < contour.size(); ++i) {
    const double d = std::hypot(contour[i].x - contour[0].x, contour[i].y - contour[0].y);
    if (d > best) best = d, far = i;
  }
  std::vector<Pt> ring(contour);
  ring.push_back(contour[0]);
  std::vector<Pt> out{contour[0]};
  douglas_peucker(ring, 0, far, tol, out);
  douglas_peucker(ring, far, ring.size() - 1, tol, out);
  out.pop_back();  // closing point repeats the first
  return out;
}

void draw_line(Mask& m, Pt a, Pt b) {
  int dx = std::abs(b.x - a.x), dy = -std::abs(b.y - a.y);
  const int sx = a.x < b.x ? 1 : -1, sy = a.y < b.y ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    m.set(a.y, a.x, true);
    if (a == b) break;
    const int e2 = 2 * err;
    if (e2 >= dy) err += dy, a.x += sx;
    if (e2 <= dx) err += dx, a.y += sy;
  }
}

// Pixels whose centre lies inside the polygon (even-odd rule) plus its edges.
Mask fill_polygon(std::size_t h, std::size_t w, const std::vector<Pt>& poly) {
  Mask out(h, w);
  int y0 = poly[0].y, y1 = poly[0].y, x0 = poly[0].x, x1 = poly[0].x;
  for (auto p : poly) y0 = std::min(y0, p.y), y1 = std::max(y1, p.y), x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      bool in = false;
      for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto &a = poly[i], &b = poly[j];
        if ((a.y > y) != (b.y > y)) {
          const double xc = a.x + static_cast<double>(y - a.y) * (b.x - a.x) / static_cast<double>(b.y - a.y);
          if (x < xc) in = !in;
        }
      }
      if (in) out.set(y, x, true);
    }
  for (std::size_t i = 0; i < poly.size(); ++i) draw_line(out, poly[i], poly[(i + 1) % poly.size()]);
  return out;
}

std::vector<std::array<int, 2>> disk(std::size_t radius) {
  const int r = static_cast<int>(radius);
  std::vector<std::array<int, 2>> off;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dy * dy + dx * dx <= r * r) off.push_back({dy, dx});
  return off;
}

}  // namespace

void SceneSpec::validate() const {
  if (size == 0 || size % 16 != 0) throw ConfigError("scene.size: must be a positive multiple of 16");
  if (blobs_min > blobs_max) throw ConfigError("scene.blobs: min exceeds max");
  if (ribbons_min > ribbons_max) throw ConfigError("scene.ribbons: min exceeds max");
  if (!(blob_radius_min > 0 && blob_radius_min <= blob_radius_max)) throw ConfigError("scene.blob_radius: bad range");
  if (!(ribbon_width_min > 0 && ribbon_width_min <= ribbon_width_max)) throw ConfigError("scene.ribbon_width: bad range");
  if (!(speckle >= 0)) throw ConfigError("scene.speckle: must be non-negative");
  if (!(background > 0 && background <= 1)) throw ConfigError("scene.background: must lie in (0,1]");
  if (!(contrast > 0 && contrast <= 1)) throw ConfigError("scene.contrast: must lie in (0,1]");
  if (!(fg_budget > 0 && fg_budget <= 1)) throw ConfigError("scene.fg_budget: must lie in (0,1]");
}

nlohmann::ordered_json SceneSpec::to_json() const {
  return {{"size", size},
          {"blobs", {blobs_min, blobs_max}},
          {"ribbons", {ribbons_min, ribbons_max}},
          {"blob_radius", {blob_radius_min, blob_radius_max}},
          {"ribbon_width", {ribbon_width_min, ribbon_width_max}},
          {"speckle", speckle},
          {"background", background},
          {"contrast", contrast},
          {"fg_budget", fg_budget},
          {"seed", seed}};
}

void CorruptionSpec::validate() const {
  if (!(poly_tolerance >= 0)) throw ConfigError("corruption.poly_tolerance: must be non-negative");
  check_rate(morph_rate, "morph_rate");
  check_rate(fp_rate, "fp_rate");
  check_rate(omission_rate, "omission_rate");
  if (morph_radius_min > morph_radius_max) throw ConfigError("corruption.morph_radius: min exceeds max");
}

nlohmann::ordered_json CorruptionSpec::to_json() const {
  return {{"poly_tolerance", poly_tolerance},
          {"morph_rate", morph_rate},
          {"morph_radius", {morph_radius_min, morph_radius_max}},
          {"fp_rate", fp_rate},
          {"omission_rate", omission_rate},
          {"seed", seed}};
}

Scene gen_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t n = spec.size;
  const auto budget = static_cast<std::size_t>(spec.fg_budget * static_cast<double>(n * n));
  Mask gt(n, n);
  const std::size_t blobs = uniform_count(rng, spec.blobs_min, spec.blobs_max);
  const std::size_t ribbons = uniform_count(rng, spec.ribbons_min, spec.ribbons_max);
  for (std::size_t i = 0; i < blobs + ribbons; ++i) {
    auto shape = i < blobs ? draw_blob(n, rng, spec) : draw_ribbon(n, rng, spec);
    auto merged = unite(gt, shape);
    if (merged.count() <= budget) gt = std::move(merged);
  }
  const float bg = static_cast<float>(spec.background);
  const float fg = static_cast<float>(spec.background * (1.0 - spec.contrast));
  std::vector<float> v(n * n);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = gt[i] ? fg : bg;
  if (spec.speckle > 0) {
    const double looks = 1.0 / (spec.speckle * spec.speckle);
    std::gamma_distribution<double> gamma(looks, 1.0 / looks);
    for (auto& x : v) x = static_cast<float>(std::clamp(x * gamma(rng), 0.0, 1.0));
  }
  return {GrayImage(n, n, 1, std::move(v)), std::move(gt)};
}

std::vector<Mask> connected_components(const Mask& m) {
  const std::size_t h = m.height(), w = m.width();
  std::vector<int> label(m.size(), -1);
  std::vector<Mask> out;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!m[s] || label[s] >= 0) continue;
    const int id = static_cast<int>(out.size());
    out.emplace_back(h, w);
    label[s] = id;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / w, x = p % w;
      out.back().set(y, x, true);
      for (auto [dy, dx] : kRing) {
        const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
        if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
        const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
        if (m[q] && label[q] < 0) {
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
  }
  return out;
}

Mask dilate(const Mask& m, std::size_t radius) {
  const auto off = disk(radius);
  const long h = static_cast<long>(m.height()), w = static_cast<long>(m.width());
  Mask out(m.height(), m.width());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      if (!m.at(y, x)) continue;
      for (auto [dy, dx] : off) {
        const long ny = y + dy, nx = x + dx;
        if (ny >= 0 && nx >= 0 && ny < h && nx < w) out.set(ny, nx, true);
      }
    }
  return out;
}

// Pixels outside the grid count as foreground, so the border does not erode.
Mask erode(const Mask& m, std::size_t radius) {
  const auto off = disk(radius);
  const long h = static_cast<long>(m.height()), w = static_cast<long>(m.width());
  Mask out(m.height(), m.width());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      if (!m.at(y, x)) continue;
      bool keep = true;
      for (auto [dy, dx] : off) {
        const long ny = y + dy, nx = x + dx;
        if (ny >= 0 && nx >= 0 && ny < h && nx < w && !m.at(ny, nx)) {
          keep = false;
          break;
        }
      }
      if (keep) out.set(y, x, true);
    }
  return out;
}

Mask polygonize(const Mask& m, double tolerance) {
  if (tolerance <= 0) return m;
  Mask out(m.height(), m.width());
  for (const auto& comp : connected_components(m)) {
    const auto contour = trace_boundary(comp);
    if (contour.size() < 4) {
      out = unite(out, comp);
      continue;
    }
    const auto poly = simplify_closed(contour, tolerance);
    out = unite(out, poly.size() < 3 ? comp : fill_polygon(m.height(), m.width(), poly));
  }
  return out;
}

Mask corrupt_label(const Mask& gt, const CorruptionSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  Mask m = polygonize(gt, spec.poly_tolerance);

  const double morph_u = u01(rng);
  const std::size_t radius = uniform_count(rng, spec.morph_radius_min, spec.morph_radius_max);
  const bool grow = (rng() & 1) != 0;
  if (morph_u < spec.morph_rate && radius > 0) m = grow ? dilate(m, radius) : erode(m, radius);

  const double fp_u = u01(rng);
  const double h = static_cast<double>(m.height()), w = static_cast<double>(m.width());
  const double cy = uniform(rng, 0.1, 0.9) * h, cx = uniform(rng, 0.1, 0.9) * w;
  const double ry = uniform(rng, 2.0, 5.0), rx = uniform(rng, 2.0, 5.0);
  if (fp_u < spec.fp_rate && !m.empty()) {
    for (std::size_t y = 0; y < m.height(); ++y)
      for (std::size_t x = 0; x < m.width(); ++x) {
        const double u = (static_cast<double>(x) - cx) / rx, v = (static_cast<double>(y) - cy) / ry;
        if (u * u + v * v <= 1.0) m.set(y, x, true);
      }
  }

  Mask out(m.height(), m.width());
  for (const auto& comp : connected_components(m))
    if (!(u01(rng) < spec.omission_rate)) out = unite(out, comp);
  return out;
}

std::vector<BenchmarkItem> gen_benchmark(std::size_t n, const SceneSpec& scene, const CorruptionSpec& corruption,
                                         double test_fraction) {
  scene.validate();
  corruption.validate();
  if (!(test_fraction >= 0 && test_fraction <= 1)) throw ConfigError("synth.test_fraction: must lie in [0,1]");
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  const std::uint64_t scene_base = perturb::mix_seed(scene.seed);
  const std::uint64_t corr_base = perturb::mix_seed(corruption.seed ^ 0x636f61727365ULL);
  std::vector<BenchmarkItem> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    SceneSpec ss = scene;
    ss.seed = perturb::mix_seed(scene_base + i);
    CorruptionSpec cs = corruption;
    cs.seed = perturb::mix_seed(corr_base + i);
    auto sc = gen_scene(ss);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04zu", i);
    out[i].name = name;
    out[i].coarse = corrupt_label(sc.gt, cs);
    out[i].image = std::move(sc.image);
    out[i].gt = std::move(sc.gt);
    out[i].split = i + n_test >= n && n_test > 0 ? maskio::Split::kTest : maskio::Split::kTrain;
  }
  return out;
}

DatasetManifest gen_dataset(std::size_t n, const SceneSpec& scene, const CorruptionSpec& corruption,
                            const std::filesystem::path& out_dir, double test_fraction) {
  const auto items = gen_benchmark(n, scene, corruption, test_fraction);
  std::error_code ec;
  for (const char* sub : {"images", "gt", "coarse"}) {
    std::filesystem::create_directories(out_dir / sub, ec);
    if (ec) throw Error("gen_dataset: cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  DatasetManifest m;
  m.base_dir = out_dir;
  for (const auto& it : items) {
    const std::string file = it.name + ".png";
    maskio::save_image(it.image, out_dir / "images" / file);
    maskio::save_mask(it.gt, out_dir / "gt" / file);
    maskio::save_mask(it.coarse, out_dir / "coarse" / file);
    maskio::ManifestRecord r;
    r.image_path = "images/" + file;
    r.label_path = "coarse/" + file;
    r.split = it.split;
    r.provenance = maskio::Provenance::kCoarse;
    r.extra["gt_path"] = "gt/" + file;
    m.records.push_back(std::move(r));
  }
  maskio::write_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

// --- reference network ------------------------------------------------------------------

nlohmann::ordered_json RefNetConfig::to_json() const {
  return {{"hidden", hidden},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"seed", seed}};
}

namespace {

Tensor<float> kaiming(const Shape& s, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
  std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
  std::vector<float> v(ndarr::numel(s));
  for (auto& x : v) x = static_cast<float>(d(rng));
  return Tensor<float>(s, std::move(v));
}

Tensor<float> refnet_forward(RefNet& net, const Tensor<float>& x) {
  auto& p = net.params;
  auto h = ndarr::relu(ndarr::conv2d(x, p.get("l1.w"), std::optional(p.get("l1.b")), 1));
  h = ndarr::relu(ndarr::conv2d(h, p.get("l2.w"), std::optional(p.get("l2.b")), 3, 3));
  return ndarr::conv2d(h, p.get("l3.w"), std::optional(p.get("l3.b")), 1);
}

}  // namespace

RefNet train_refnet(const std::vector<train::Sample>& samples, const RefNetConfig& cfg) {
  if (samples.empty()) throw Error("refnet: empty training set");
  if (cfg.hidden == 0 || cfg.batch_size == 0) throw ConfigError("refnet: hidden and batch_size must be positive");
  const auto& f = samples.front();
  for (const auto& s : samples)
    if (s.image.height() != f.image.height() || s.image.width() != f.image.width() ||
        s.image.channels() != f.image.channels() || s.label.height() != s.image.height() ||
        s.label.width() != s.image.width())
      throw ShapeError("refnet: samples must share one image size and match their labels");

  RefNet net;
  net.in_channels = f.image.channels();
  std::mt19937_64 rng(cfg.seed);
  const std::size_t c = cfg.hidden;
  net.params.add("l1.w", kaiming({c, net.in_channels, 3, 3}, rng), false);
  net.params.add("l1.b", Tensor<float>::zeros({c}), false);
  net.params.add("l2.w", kaiming({c, c, 3, 3}, rng), false);
  net.params.add("l2.b", Tensor<float>::zeros({c}), false);
  net.params.add("l3.w", kaiming({1, c, 3, 3}, rng), false);
  net.params.add("l3.b", Tensor<float>::zeros({1}), false);
  net.params.prepare_for_training();

  const train::LossConfig lcfg;
  train::AdamState opt;
  const train::AdamParams ap{cfg.learning_rate, 0.0};
  std::vector<train::Targets<float>> targets;
  for (const auto& s : samples) targets.push_back(train::make_targets<float>({s.label}, lcfg));

  std::vector<std::size_t> perm(samples.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
    for (std::size_t b = 0; b < perm.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(perm.size(), b + cfg.batch_size);
      std::vector<GrayImage> imgs;
      std::vector<float> g, w;
      for (std::size_t k = b; k < e; ++k) {
        imgs.push_back(samples[perm[k]].image);
        const auto& t = targets[perm[k]];
        g.insert(g.end(), t.g.data().begin(), t.g.data().end());
        w.insert(w.end(), t.w.data().begin(), t.w.data().end());
      }
      const Shape ts{e - b, 1, f.label.height(), f.label.width()};
      train::Targets<float> t{Tensor<float>(ts, std::move(g)), Tensor<float>(ts, std::move(w))};
      auto loss = train::combined_loss(refnet_forward(net, model::images_to_tensor<float>(imgs)), t, lcfg);
      ndarr::backward(loss);
      train::adam_step(net.params, opt, ap);
      net.params.zero_grads();
    }
  }
  net.params.set_all_requires_grad(false);
  return net;
}

std::vector<Mask> refnet_predict(RefNet& net, const std::vector<GrayImage>& images) {
  ndarr::NoGradGuard ng;
  std::vector<Mask> out;
  for (const auto& im : images) {
    if (im.channels() != net.in_channels) throw ShapeError("refnet: image channels do not match the network");
    auto logits = refnet_forward(net, model::images_to_tensor<float>({im}));
    out.push_back(model::logits_to_mask(logits.data(), im.height(), im.width()));
  }
  return out;
}

nlohmann::ordered_json ProtocolReport::to_json() const {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    arr.push_back({{"test_set", r.test_set},
                   {"miou", r.miou},
                   {"delta_miou", r.delta_miou},
                   {"acc", r.acc},
                   {"delta_acc", r.delta_acc}});
  return arr;
}

const ProtocolRow& ProtocolReport::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.test_set == name) return r;
  throw Error("protocol report: no row " + name);
}

ProtocolReport eval_protocol(const std::vector<train::Sample>& train, const std::vector<GrayImage>& test_images,
                             const std::vector<Mask>& test_hq, const std::vector<Mask>& test_orig,
                             const std::vector<Mask>& test_enh, const RefNetConfig& cfg) {
  if (test_images.empty()) throw Error("eval_protocol: empty test set");
  if (test_hq.size() != test_images.size() || test_orig.size() != test_images.size() ||
      test_enh.size() != test_images.size())
    throw Error("eval_protocol: inconsistent test coverage");
  auto net = train_refnet(train, cfg);
  const auto preds = refnet_predict(net, test_images);
  ProtocolReport rep;
  const std::array<std::pair<const char*, const std::vector<Mask>*>, 3> sets{
      {{"Test-HQ", &test_hq}, {"Test-Orig", &test_orig}, {"Test-Enh", &test_enh}}};
  for (const auto& [name, labels] : sets) {
    maskio::ConfusionCounts cc;
    for (std::size_t i = 0; i < preds.size(); ++i) cc += maskio::confusion(preds[i], (*labels)[i]);
    rep.rows.push_back({name, maskio::miou(cc), 0.0, maskio::accuracy(cc), 0.0});
  }
  for (auto& r : rep.rows) {
    r.delta_miou = rep.rows[0].miou - r.miou;
    r.delta_acc = rep.rows[0].acc - r.acc;
  }
  return rep;
}

ProtocolReport eval_protocol(const DatasetManifest& train, const DatasetManifest& test_hq,
                             const DatasetManifest& test_orig, const DatasetManifest& test_enh,
                             const RefNetConfig& cfg) {
  const auto samples = train::load_samples(train, maskio::Split::kTrain);
  std::vector<GrayImage> images;
  std::vector<Mask> hq, orig, enh;
  // Records are matched on the resolved image file, so the manifests may live
  // in different directories.
  auto key = [](const DatasetManifest& m, const std::string& image) {
    return std::filesystem::weakly_canonical(m.resolve(image)).generic_string();
  };
  auto index = [&](const DatasetManifest& m) {
    std::map<std::string, const maskio::ManifestRecord*> idx;
    for (const auto& r : m.records) idx[key(m, r.image_path)] = &r;
    return idx;
  };
  const auto idx_orig = index(test_orig), idx_enh = index(test_enh);
  auto label_of = [&](const DatasetManifest& m, const std::map<std::string, const maskio::ManifestRecord*>& idx,
                      const std::string& k, const char* which) {
    const auto it = idx.find(k);
    if (it == idx.end() || !it->second->label_path)
      throw Error(std::string("eval_protocol: inconsistent test coverage: ") + which + " has no label for " + k);
    return maskio::load_mask(m.resolve(*it->second->label_path));
  };
  if (test_orig.records.size() != test_hq.records.size() || test_enh.records.size() != test_hq.records.size())
    throw Error("eval_protocol: inconsistent test coverage: test sets differ in size");
  for (const auto& r : test_hq.records) {
    if (!r.label_path) throw Error("eval_protocol: inconsistent test coverage: Test-HQ has no label for " + r.image_path);
    const auto k = key(test_hq, r.image_path);
    images.push_back(maskio::load_image(test_hq.resolve(r.image_path)));
    hq.push_back(maskio::load_mask(test_hq.resolve(*r.label_path)));
    orig.push_back(label_of(test_orig, idx_orig, k, "Test-Orig"));
    enh.push_back(label_of(test_enh, idx_enh, k, "Test-Enh"));
  }
  return eval_protocol(samples, images, hq, orig, enh, cfg);
}

}  // namespace elnet::synth
