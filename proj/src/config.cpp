#include "elnet/config.hpp"

#include <cctype>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

namespace elnet::config {

using json = nlohmann::ordered_json;

nlohmann::ordered_json lqe_to_json(const lqe::LqeConfig& c) {
  return {{"beta", c.beta}, {"tau_q", c.tau_q}, {"tau_r", c.tau_r}, {"tau_iou", c.tau_iou}, {"tau_dice", c.tau_dice}};
}

// --- TOML subset ----------------------------------------------------------------------

namespace {

class ValueParser {
 public:
  explicit ValueParser(const std::string& s) : s_(s) {}

  json parse_all() {
    auto v = value();
    ws();
    if (i_ != s_.size()) fail("trailing characters");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("invalid value '" + s_ + "': " + what);
  }
  void ws() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
  }
  json value() {
    ws();
    if (i_ >= s_.size()) fail("missing value");
    const char c = s_[i_];
    if (c == '[') return array();
    if (c == '"') return basic_string();
    if (c == '\'') return literal_string();
    if (s_.compare(i_, 4, "true") == 0) return i_ += 4, json(true);
    if (s_.compare(i_, 5, "false") == 0) return i_ += 5, json(false);
    if (c == '{') fail("inline tables are not supported");
    return number();
  }
  json array() {
    ++i_;
    json arr = json::array();
    for (;;) {
      ws();
      if (i_ < s_.size() && s_[i_] == ']') return ++i_, arr;
      arr.push_back(value());
      ws();
      if (i_ < s_.size() && s_[i_] == ',') {
        ++i_;
        continue;
      }
      if (i_ < s_.size() && s_[i_] == ']') return ++i_, arr;
      fail("expected ',' or ']' in array");
    }
  }
  json basic_string() {
    ++i_;
    std::string out;
    while (i_ < s_.size() && s_[i_] != '"') {
      char c = s_[i_++];
      if (c == '\\') {
        if (i_ >= s_.size()) fail("unterminated escape");
        const char e = s_[i_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      out += c;
    }
    if (i_ >= s_.size()) fail("unterminated string");
    ++i_;
    return out;
  }
  json literal_string() {
    const auto end = s_.find('\'', i_ + 1);
    if (end == std::string::npos) fail("unterminated string");
    std::string out = s_.substr(i_ + 1, end - i_ - 1);
    i_ = end + 1;
    return out;
  }
  json number() {
    const std::size_t b = i_;
    while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '.' || s_[i_] == '+' ||
                              s_[i_] == '-' || s_[i_] == '_'))
      ++i_;
    std::string tok;
    for (std::size_t k = b; k < i_; ++k)
      if (s_[k] != '_') tok += s_[k];
    if (tok.empty()) fail("expected a value");
    const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" || tok == "nan";
    try {
      std::size_t used = 0;
      if (is_float) {
        const double d = std::stod(tok, &used);
        if (used == tok.size()) return d;
      } else {
        const long long v = std::stoll(tok, &used, 10);
        if (used == tok.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("not a number, string, boolean or array");
  }

  const std::string& s_;
  std::size_t i_ = 0;
};

std::string strip_comment(const std::string& line) {
  bool dq = false, sq = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '\\' && dq) {
      ++i;
      continue;
    }
    if (c == '"' && !sq) dq = !dq;
    if (c == '\'' && !dq) sq = !sq;
    if (c == '#' && !dq && !sq) return line.substr(0, i);
  }
  return line;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

int bracket_balance(const std::string& s) {
  int depth = 0;
  bool dq = false, sq = false;
  for (char c : s) {
    if (c == '"' && !sq) dq = !dq;
    if (c == '\'' && !dq) sq = !sq;
    if (!dq && !sq) depth += (c == '[') - (c == ']');
  }
  return depth;
}

void set_key(json& tree, const std::string& full, json value, const std::string& where) {
  const auto dot = full.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == full.size() || full.find('.', dot + 1) != std::string::npos)
    throw ConfigError(where + "key '" + full + "' must have the form section.key");
  auto& sec = tree[full.substr(0, dot)];
  const auto key = full.substr(dot + 1);
  if (sec.contains(key)) throw ConfigError(where + "duplicate key '" + full + "'");
  sec[key] = std::move(value);
}

}  // namespace

json parse_value(const std::string& text) { return ValueParser(text).parse_all(); }

json parse_toml(const std::string& text, const std::string& origin) {
  json tree = json::object();
  std::istringstream in(text);
  std::string raw, section;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::size_t start_line = lineno;
    std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(start_line) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3 || line[1] == '[')
        throw ConfigError(where + "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.find('.') != std::string::npos) throw ConfigError(where + "nested sections are not supported");
      tree[section];
      if (!tree[section].is_object()) tree[section] = json::object();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    while (bracket_balance(val) > 0 && std::getline(in, raw)) {
      ++lineno;
      val += " " + trim(strip_comment(raw));
    }
    if (key.empty()) throw ConfigError(where + "empty key");
    json v;
    try {
      v = parse_value(val);
    } catch (const ConfigError& e) {
      throw ConfigError(where + (section.empty() ? key : section + "." + key) + ": " + e.what());
    }
    set_key(tree, section.empty() ? key : section + "." + key, std::move(v), where);
  }
  return tree;
}

// --- typed application ----------------------------------------------------------------

namespace {

using Setter = std::function<void(ResolvedConfig&, const json&, const std::string&)>;

[[noreturn]] void type_error(const std::string& key, const std::string& expected, const json& v) {
  throw ConfigError(key + ": expected " + expected + ", got " + v.dump());
}

std::size_t as_size(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) type_error(key, "a non-negative integer", v);
  return v.get<std::size_t>();
}
std::uint64_t as_u64(const json& v, const std::string& key) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
    type_error(key, "a non-negative integer", v);
  return v.get<std::uint64_t>();
}
double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) type_error(key, "a number", v);
  return v.get<double>();
}
bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) type_error(key, "a boolean", v);
  return v.get<bool>();
}
std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) type_error(key, "a string", v);
  return v.get<std::string>();
}
template <std::size_t N>
std::array<double, N> as_double_array(const json& v, const std::string& key) {
  if (!v.is_array() || v.size() != N) type_error(key, "an array of " + std::to_string(N) + " numbers", v);
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = as_double(v[i], key + "[" + std::to_string(i) + "]");
  return out;
}
std::vector<std::size_t> as_size_vector(const json& v, const std::string& key) {
  if (!v.is_array()) type_error(key, "an array of integers", v);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_size(v[i], key + "[" + std::to_string(i) + "]"));
  return out;
}
std::pair<std::size_t, std::size_t> as_size_range(const json& v, const std::string& key) {
  auto r = as_size_vector(v, key);
  if (r.size() != 2) type_error(key, "[min, max]", v);
  return {r[0], r[1]};
}
std::pair<double, double> as_double_range(const json& v, const std::string& key) {
  auto r = as_double_array<2>(v, key);
  return {r[0], r[1]};
}

#define SIZE(path, field) {path, [](ResolvedConfig& c, const json& v, const std::string& k) { c.field = as_size(v, k); }}
#define U64(path, field) {path, [](ResolvedConfig& c, const json& v, const std::string& k) { c.field = as_u64(v, k); }}
#define DBL(path, field) {path, [](ResolvedConfig& c, const json& v, const std::string& k) { c.field = as_double(v, k); }}
#define BOOL(path, field) {path, [](ResolvedConfig& c, const json& v, const std::string& k) { c.field = as_bool(v, k); }}
#define STR(path, field) {path, [](ResolvedConfig& c, const json& v, const std::string& k) { c.field = as_string(v, k); }}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"pipeline.mode",
       [](ResolvedConfig& c, const json& v, const std::string& k) {
         c.pipeline.mode = pipeline::parse_mode(as_string(v, k));
       }},
      SIZE("pipeline.loop_count", pipeline.loop_count),
      {"pipeline.ensemble_checkpoints",
       [](ResolvedConfig& c, const json& v, const std::string& k) {
         c.pipeline.ensemble_checkpoints = as_size_vector(v, k);
       }},
      SIZE("pipeline.refine_epochs", pipeline.refine_epochs),
      BOOL("pipeline.cold_start", pipeline.cold_start),
      DBL("pipeline.noise_sigma", pipeline.noise_sigma),
      SIZE("pipeline.pretrain_epochs", pipeline.pretrain_epochs),
      STR("pipeline.backbone_checkpoint", pipeline.backbone_checkpoint),
      U64("pipeline.seed", pipeline.seed),
      STR("pipeline.out_dir", pipeline.out_dir),

      SIZE("train.epochs", pipeline.train.epochs),
      SIZE("train.batch_size", pipeline.train.batch_size),
      DBL("train.learning_rate", pipeline.train.learning_rate),
      DBL("train.weight_decay", pipeline.train.weight_decay),
      U64("train.seed", pipeline.train.seed),
      {"train.checkpoint_epochs",
       [](ResolvedConfig& c, const json& v, const std::string& k) {
         c.pipeline.train.checkpoint_epochs = as_size_vector(v, k);
       }},

      DBL("loss.lambda", pipeline.loss.lambda),
      {"loss.alpha",
       [](ResolvedConfig& c, const json& v, const std::string& k) { c.pipeline.loss.alpha = as_double_array<3>(v, k); }},
      DBL("loss.boundary_mu", pipeline.loss.boundary_mu),
      SIZE("loss.boundary_window", pipeline.loss.boundary_window),
      DBL("loss.prob_clip", pipeline.loss.prob_clip),

      {"lqe.beta",
       [](ResolvedConfig& c, const json& v, const std::string& k) { c.pipeline.lqe.beta = as_double_array<3>(v, k); }},
      DBL("lqe.tau_q", pipeline.lqe.tau_q),
      DBL("lqe.tau_r", pipeline.lqe.tau_r),
      DBL("lqe.tau_iou", pipeline.lqe.tau_iou),
      DBL("lqe.tau_dice", pipeline.lqe.tau_dice),

      SIZE("model.in_channels", pipeline.model.in_channels),
      {"model.stage_channels",
       [](ResolvedConfig& c, const json& v, const std::string& k) {
         auto s = as_size_vector(v, k);
         if (s.size() != 4) type_error(k, "an array of 4 integers", v);
         std::copy(s.begin(), s.end(), c.pipeline.model.stage_channels.begin());
       }},
      SIZE("model.adapter_bottleneck", pipeline.model.adapter_bottleneck),
      {"model.rfb_out",
       [](ResolvedConfig&, const json& v, const std::string& k) {
         if (as_size(v, k) != model::ModelConfig::rfb_out) throw ConfigError(k + ": fixed at 64");
       }},
      SIZE("model.rfb_branch_channels", pipeline.model.rfb_branch_channels),
      SIZE("model.decoder_channels", pipeline.model.decoder_channels),
      BOOL("model.adapter_residual", pipeline.model.adapter_residual),
      BOOL("model.eam_enabled", pipeline.model.eam_enabled),
      BOOL("model.block_bias", pipeline.model.block_bias),

      SIZE("refnet.hidden", refnet.hidden),
      SIZE("refnet.epochs", refnet.epochs),
      SIZE("refnet.batch_size", refnet.batch_size),
      DBL("refnet.learning_rate", refnet.learning_rate),
      U64("refnet.seed", refnet.seed),

      SIZE("scene.size", scene.size),
      {"scene.blobs",
       [](ResolvedConfig& c, const json& v, const std::string& k) {
         std::tie(c.scene.blobs_min, c.scene.blobs_max) = as_size_range(v, k);
       }},
      {"scene.ribbons",
       [](ResolvedConfig& c, const json& v, const std::string& k) {
         std::tie(c.scene.ribbons_min, c.scene.ribbons_max) = as_size_range(v, k);
       }},
      {"scene.blob_radius",
       [](ResolvedConfig& c, const json& v, const std::string& k) {
         std::tie(c.scene.blob_radius_min, c.scene.blob_radius_max) = as_double_range(v, k);
       }},
      {"scene.ribbon_width",
       [](ResolvedConfig& c, const json& v, const std::string& k) {
         std::tie(c.scene.ribbon_width_min, c.scene.ribbon_width_max) = as_double_range(v, k);
       }},
      DBL("scene.speckle", scene.speckle),
      DBL("scene.background", scene.background),
      DBL("scene.contrast", scene.contrast),
      DBL("scene.fg_budget", scene.fg_budget),
      U64("scene.seed", scene.seed),

      DBL("corruption.poly_tolerance", corruption.poly_tolerance),
      DBL("corruption.morph_rate", corruption.morph_rate),
      {"corruption.morph_radius",
       [](ResolvedConfig& c, const json& v, const std::string& k) {
         std::tie(c.corruption.morph_radius_min, c.corruption.morph_radius_max) = as_size_range(v, k);
       }},
      DBL("corruption.fp_rate", corruption.fp_rate),
      DBL("corruption.omission_rate", corruption.omission_rate),
      U64("corruption.seed", corruption.seed),
  };
  return table;
}

#undef SIZE
#undef U64
#undef DBL
#undef BOOL
#undef STR

}  // namespace

ResolvedConfig apply(const json& tree, ResolvedConfig base) {
  if (!tree.is_object()) throw ConfigError("config: top level must be a table of sections");
  for (const auto& [section, body] : tree.items()) {
    if (!body.is_object()) throw ConfigError(section + ": expected a section table");
    for (const auto& [key, v] : body.items()) {
      const std::string full = section + "." + key;
      auto it = setters().find(full);
      if (it == setters().end()) throw ConfigError(full + ": unknown key");
      it->second(base, v, full);
    }
  }
  base.validate();
  return base;
}

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "': expected section.key=value");
  const std::string key = trim(assignment.substr(0, eq));
  const std::string raw = trim(assignment.substr(eq + 1));
  json v;
  try {
    v = parse_value(raw);
  } catch (const ConfigError&) {
    v = raw;
  }
  const auto dot = key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == key.size())
    throw ConfigError("override '" + assignment + "': key must have the form section.key");
  tree[key.substr(0, dot)][key.substr(dot + 1)] = std::move(v);
}

json load_tree(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides) {
  json tree = json::object();
  if (path) {
    std::ifstream in(*path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot read " + path->string());
    std::stringstream ss;
    ss << in.rdbuf();
    if (path->extension() == ".json") {
      try {
        tree = json::parse(ss.str());
      } catch (const json::parse_error& e) {
        throw ConfigError(path->string() + ": " + e.what());
      }
      if (tree.is_null()) tree = json::object();
    } else {
      tree = parse_toml(ss.str(), path->string());
    }
  }
  for (const auto& o : overrides) apply_override(tree, o);
  return tree;
}

ResolvedConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides) {
  return apply(load_tree(path, overrides));
}

void ResolvedConfig::validate() const {
  pipeline.validate();
  scene.validate();
  corruption.validate();
  if (refnet.hidden == 0) throw ConfigError("refnet.hidden: must be positive");
  if (refnet.batch_size == 0) throw ConfigError("refnet.batch_size: must be positive");
  if (!(refnet.learning_rate > 0)) throw ConfigError("refnet.learning_rate: must be positive");
}

json ResolvedConfig::to_json() const {
  json j;
  j["pipeline"] = pipeline.to_json();
  j["train"] = pipeline.train.to_json();
  j["loss"] = pipeline.loss.to_json();
  j["lqe"] = lqe_to_json(pipeline.lqe);
  j["model"] = pipeline.model.to_json();
  j["refnet"] = refnet.to_json();
  j["scene"] = scene.to_json();
  j["corruption"] = corruption.to_json();
  return j;
}

}  // namespace elnet::config
