#pragma once

// Run configuration: defaults, then a TOML or JSON file, then key=value
// overrides. Sections: pipeline, train, loss, lqe, model, refnet, scene,
// corruption.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "elnet/pipeline.hpp"
#include "elnet/synth.hpp"

namespace elnet::config {

struct ResolvedConfig {
  pipeline::PipelineConfig pipeline;  // holds train, loss, lqe and model
  synth::RefNetConfig refnet;
  synth::SceneSpec scene;
  synth::CorruptionSpec corruption;

  nlohmann::ordered_json to_json() const;
  void validate() const;
};

nlohmann::ordered_json lqe_to_json(const lqe::LqeConfig& c);

// Subset of TOML: [section] headers, key = value, dotted keys, strings,
// integers, floats, booleans, (multi-line) arrays and # comments. Returns
// {section: {key: value}}. Errors carry origin:line.
nlohmann::ordered_json parse_toml(const std::string& text, const std::string& origin = "<string>");

// A single TOML value literal.
nlohmann::ordered_json parse_value(const std::string& text);

// Applies a {section: {key: value}} tree on top of `base`. Unknown keys and
// type errors name the offending key.
ResolvedConfig apply(const nlohmann::ordered_json& tree, ResolvedConfig base = {});

// "section.key=value"; values that are not valid literals are taken as strings.
void apply_override(nlohmann::ordered_json& tree, const std::string& assignment);

// Raw {section: {key: value}} tree after the file and the overrides.
nlohmann::ordered_json load_tree(const std::optional<std::filesystem::path>& path,
                                 const std::vector<std::string>& overrides = {});

ResolvedConfig load_config(const std::optional<std::filesystem::path>& path,
                           const std::vector<std::string>& overrides = {});

}  // namespace elnet::config
