#include "elnet/maskio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

namespace elnet::maskio {

// --- Mask / GrayImage ----------------------------------------------------------------

Mask::Mask(std::size_t height, std::size_t width, std::uint8_t fill)
    : Mask(height, width, std::vector<std::uint8_t>(height * width, fill)) {}

Mask::Mask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits)
    : height_(height), width_(width), bits_(std::move(bits)) {
  if (height == 0 || width == 0) throw ShapeError("mask: dimensions must be positive");
  if (bits_.size() != height * width) throw ShapeError("mask: bit count does not match dimensions");
  for (auto b : bits_)
    if (b > 1) throw FormatError("mask: cell values must be 0 or 1");
}

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto b : bits_) n += b;
  return n;
}

Mask Mask::complement() const {
  std::vector<std::uint8_t> out(bits_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1 - bits_[i];
  return Mask(height_, width_, std::move(out));
}

Mask Mask::transposed() const {
  Mask out(width_, height_);
  for (std::size_t y = 0; y < height_; ++y)
    for (std::size_t x = 0; x < width_; ++x) out.set(x, y, at(y, x));
  return out;
}

GrayImage::GrayImage(std::size_t height, std::size_t width, std::size_t channels, float fill)
    : GrayImage(height, width, channels, std::vector<float>(height * width * channels, fill)) {}

GrayImage::GrayImage(std::size_t height, std::size_t width, std::size_t channels, std::vector<float> values)
    : height_(height), width_(width), channels_(channels), values_(std::move(values)) {
  if (height == 0 || width == 0) throw ShapeError("image: dimensions must be positive");
  if (channels != 1 && channels != 3) throw ShapeError("image: channels must be 1 or 3");
  if (values_.size() != height * width * channels) throw ShapeError("image: value count does not match dimensions");
  for (auto& v : values_) {
    if (!std::isfinite(v)) throw NumericError("image: non-finite value");
    v = std::clamp(v, 0.f, 1.f);
  }
}

void GrayImage::set(std::size_t c, std::size_t y, std::size_t x, float v) {
  values_[(c * height_ + y) * width_ + x] = std::clamp(v, 0.f, 1.f);
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

// --- raster IO ---------------------------------------------------------------------------

namespace {

struct Raster {
  std::size_t height = 0, width = 0, channels = 1;  // interleaved 8-bit
  std::vector<std::uint8_t> bytes;
};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::string lower_ext(const fs::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

Raster read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    while (true) {
      int c = in.peek();
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    in >> t;
    return t;
  };
  if (token() != "P5") throw FormatError(path.string() + ": not a binary PGM (P5)");
  Raster r;
  try {
    r.width = std::stoul(token());
    r.height = std::stoul(token());
    const auto maxval = std::stoul(token());
    if (maxval != 255) throw FormatError(path.string() + ": unsupported bit depth (maxval " + std::to_string(maxval) + ")");
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": malformed PGM header");
  }
  in.get();
  r.bytes.resize(r.width * r.height);
  in.read(reinterpret_cast<char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(r.bytes.size())) throw FormatError(path.string() + ": truncated PGM");
  return r;
}

void write_pgm(const Raster& r, const fs::path& path) {
  if (r.channels != 1) throw FormatError("PGM output supports one channel only");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << r.width << ' ' << r.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

[[noreturn]] void png_error_fn(png_structp, png_const_charp msg) { throw FormatError(std::string("png: ") + msg); }
void png_warning_fn(png_structp, png_const_charp) {}

Raster read_png(const fs::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw FormatError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  png_init_io(png, f.get());
  png_read_info(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int type = png_get_color_type(png, info);
  if (depth != 8) throw FormatError(path.string() + ": unsupported bit depth " + std::to_string(depth));
  if (type == PNG_COLOR_TYPE_PALETTE) throw FormatError(path.string() + ": palette PNGs are not supported");
  Raster r;
  r.width = png_get_image_width(png, info);
  r.height = png_get_image_height(png, info);
  const std::size_t src_channels = png_get_channels(png, info);
  std::vector<std::uint8_t> raw(r.width * r.height * src_channels);
  std::vector<png_bytep> rows(r.height);
  for (std::size_t y = 0; y < r.height; ++y) rows[y] = raw.data() + y * r.width * src_channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  // Drop alpha.
  r.channels = (type & PNG_COLOR_MASK_COLOR) ? 3 : 1;
  r.bytes.resize(r.width * r.height * r.channels);
  for (std::size_t i = 0; i < r.width * r.height; ++i)
    for (std::size_t c = 0; c < r.channels; ++c) r.bytes[i * r.channels + c] = raw[i * src_channels + c];
  return r;
}

void write_png(const Raster& r, const fs::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw FormatError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8,
               r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < r.height; ++y)
    png_write_row(png, const_cast<png_bytep>(r.bytes.data() + y * r.width * r.channels));
  png_write_end(png, nullptr);
}

Raster read_raster(const fs::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw FormatError("cannot open " + path.string());
  char sig[8] = {};
  probe.read(sig, 8);
  if (probe.gcount() >= 2 && sig[0] == 'P' && sig[1] == '5') return read_pgm(path);
  if (probe.gcount() == 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(sig), 0, 8) == 0) return read_png(path);
  throw FormatError(path.string() + ": unrecognised image format (expected PNG or P5 PGM)");
}

void write_raster(const Raster& r, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto ext = lower_ext(path);
  if (ext == ".pgm") {
    write_pgm(r, path);
  } else if (ext == ".png") {
    write_png(r, path);
  } else {
    throw FormatError(path.string() + ": unsupported output extension (use .png or .pgm)");
  }
}

}  // namespace

Mask load_mask(const fs::path& path) {
  const Raster r = read_raster(path);
  std::vector<std::uint8_t> bits(r.width * r.height);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    int v = 0;
    for (std::size_t c = 0; c < r.channels; ++c) v += r.bytes[i * r.channels + c];
    bits[i] = (v / static_cast<int>(r.channels)) >= kMaskThreshold ? 1 : 0;
  }
  return Mask(r.height, r.width, std::move(bits));
}

void save_mask(const Mask& mask, const fs::path& path) {
  Raster r{mask.height(), mask.width(), 1, {}};
  r.bytes.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) r.bytes[i] = mask[i] ? 255 : 0;
  write_raster(r, path);
}

GrayImage load_image(const fs::path& path) {
  const Raster r = read_raster(path);
  const std::size_t plane = r.width * r.height;
  std::vector<float> values(plane * r.channels);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < r.channels; ++c) values[c * plane + i] = r.bytes[i * r.channels + c] / 255.f;
  return GrayImage(r.height, r.width, r.channels, std::move(values));
}

void save_image(const GrayImage& image, const fs::path& path) {
  Raster r{image.height(), image.width(), image.channels(), {}};
  const std::size_t plane = r.width * r.height;
  r.bytes.resize(plane * r.channels);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < r.channels; ++c)
      r.bytes[i * r.channels + c] = static_cast<std::uint8_t>(std::lround(image.values()[c * plane + i] * 255.f));
  write_raster(r, path);
}

// --- metrics --------------------------------------------------------------------------------

namespace {

void require_same(const Mask& a, const Mask& b, const char* op) {
  if (a.height() != b.height() || a.width() != b.width())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()));
}

}  // namespace

ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  require_same(pred, gt, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i], g = gt[i];
    if (p && g) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (g) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

double accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw Error("accuracy: empty counts");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double iou(const Mask& a, const Mask& b) {
  require_same(a, b, "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] & b[i];
    uni += a[i] | b[i];
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double dice(const Mask& a, const Mask& b) {
  require_same(a, b, "dice");
  std::size_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] & b[i];
    sa += a[i];
    sb += b[i];
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

double miou(const ConfusionCounts& c) {
  auto cls = [](std::uint64_t hit, std::uint64_t miss_a, std::uint64_t miss_b) {
    const std::uint64_t d = hit + miss_a + miss_b;
    return d == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(d);
  };
  return 0.5 * (cls(c.tp, c.fp, c.fn) + cls(c.tn, c.fn, c.fp));
}

double miou(const Mask& pred, const Mask& gt) { return miou(confusion(pred, gt)); }

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["acc"] = acc;
  j["miou"] = miou;
  j["per_image"] = nlohmann::ordered_json::array();
  for (const auto& e : per_image) j["per_image"].push_back({{"name", e.name}, {"acc", e.acc}, {"miou", e.miou}});
  return j;
}

MetricReport evaluate_pairs(const std::vector<std::pair<std::string, std::pair<Mask, Mask>>>& named_pred_gt) {
  if (named_pred_gt.empty()) throw Error("metrics: no mask pairs to evaluate");
  MetricReport rep;
  ConfusionCounts pooled;
  for (const auto& [name, pg] : named_pred_gt) {
    const auto c = confusion(pg.first, pg.second);
    pooled += c;
    rep.per_image.push_back({name, accuracy(c), miou(c)});
  }
  rep.acc = accuracy(pooled);
  rep.miou = miou(pooled);
  return rep;
}

// --- manifests ------------------------------------------------------------------------------------

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kManual:
      return "manual";
    case Provenance::kCoarse:
      return "coarse";
    case Provenance::kAuto:
      return "auto";
    case Provenance::kEnhanced:
      return "enhanced";
    case Provenance::kFlagged:
      return "flagged";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split '" + s + "' (expected train|test)");
}

Provenance parse_provenance(const std::string& s) {
  for (auto p : {Provenance::kManual, Provenance::kCoarse, Provenance::kAuto, Provenance::kEnhanced,
                 Provenance::kFlagged})
    if (to_string(p) == s) return p;
  throw FormatError("unknown provenance '" + s + "' (expected manual|coarse|auto|enhanced|flagged)");
}

fs::path DatasetManifest::resolve(const std::string& p) const {
  fs::path path(p);
  if (path.is_absolute() || base_dir.empty()) return path;
  return base_dir / path;
}

const ManifestRecord* DatasetManifest::find(const std::string& image_path) const {
  for (const auto& r : records)
    if (r.image_path == image_path) return &r;
  return nullptr;
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.image_path.empty()) throw FormatError("manifest record " + std::to_string(i + 1) + ": empty image_path");
    if (!seen.insert(r.image_path).second)
      throw FormatError("manifest record " + std::to_string(i + 1) + ": duplicate image_path " + r.image_path);
    if (r.quality && (*r.quality < 0.0 || *r.quality > 1.0))
      throw FormatError("manifest record " + std::to_string(i + 1) + ": quality outside [0,1]");
  }
}

ManifestRecord record_from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw FormatError("record is not a JSON object");
  ManifestRecord r;
  if (!j.contains("image_path") || !j["image_path"].is_string()) throw FormatError("missing string field image_path");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& key = it.key();
    const auto& v = it.value();
    if (key == "image_path") {
      r.image_path = v.get<std::string>();
    } else if (key == "label_path") {
      if (!v.is_null()) {
        if (!v.is_string()) throw FormatError("label_path must be a string");
        r.label_path = v.get<std::string>();
      }
    } else if (key == "split") {
      if (!v.is_string()) throw FormatError("split must be a string");
      r.split = parse_split(v.get<std::string>());
    } else if (key == "provenance") {
      if (!v.is_string()) throw FormatError("provenance must be a string");
      r.provenance = parse_provenance(v.get<std::string>());
    } else if (key == "quality") {
      if (!v.is_null()) {
        if (!v.is_number()) throw FormatError("quality must be a number");
        r.quality = v.get<double>();
        if (*r.quality < 0.0 || *r.quality > 1.0) throw FormatError("quality outside [0,1]");
      }
    } else {
      r.extra[key] = v;
    }
  }
  return r;
}

nlohmann::ordered_json record_to_json(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["image_path"] = r.image_path;
  if (r.label_path) j["label_path"] = *r.label_path;
  j["split"] = to_string(r.split);
  j["provenance"] = to_string(r.provenance);
  if (r.quality) j["quality"] = *r.quality;
  for (auto it = r.extra.begin(); it != r.extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.base_dir = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto rec = record_from_json(nlohmann::ordered_json::parse(line));
      if (!seen.insert(rec.image_path).second) throw FormatError("duplicate image_path " + rec.image_path);
      m.records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

std::string manifest_to_string(const DatasetManifest& m) {
  m.validate();
  std::string out;
  for (const auto& r : m.records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  const auto text = manifest_to_string(m);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write manifest " + path.string());
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace elnet::maskio
