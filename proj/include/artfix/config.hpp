#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/artifacts.hpp"
#include "artfix/checkpoint.hpp"
#include "artfix/data.hpp"
#include "artfix/denoiser.hpp"
#include "artfix/sampler.hpp"
#include "artfix/train.hpp"

namespace artfix {

// Config files are plain text:
//
//   # comment
//   [section]
//   key = value
//
// Keys are addressed as section.key on the command line (--set). Lists are
// comma separated. Every key must be known; see config_keys().

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DenoiserConfig model;
  ScheduleParams diffusion;
  DatasetSpec data;
  /// Train on this many generated textures when data.root_path is unset.
  int synthetic_count = 0;
  TrainConfig train;
  RestoreOptions restore;
  std::vector<int> snapshots{0, 50, 100, 150};
  DetectorParams detect;
  ArtifactKind synth_kind = ArtifactKind::fold;
  double synth_intensity = 0.8;
  int ablate_eval_images = 10;
  int ablate_timed_restores = 10;
};

namespace config_detail {

inline std::string trim(std::string s) {
  auto sp = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), sp));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), sp).base(), s.end());
  return s;
}

template <class I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<int>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": expected a comma separated list");
  return out;
}

template <class F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& schema() {
  using K = const std::string&;
  static const std::map<std::string, Setter> s{
      {"run.seed", [](RunConfig& c, K k, K v) { c.seed = parse_int<std::uint64_t>(k, v); }},

      {"model.variant", [](RunConfig& c, K k, K v) { c.model = wrap(k, [&] { return with_variant(c.model, v); }); }},
      {"model.backbone", [](RunConfig& c, K k, K v) { c.model.backbone = wrap(k, [&] { return parse_backbone(v); }); }},
      {"model.time_injection",
       [](RunConfig& c, K k, K v) { c.model.time_injection = wrap(k, [&] { return parse_injection(v); }); }},
      {"model.patch_size", [](RunConfig& c, K k, K v) { c.model.patch_size = parse_int<int>(k, v); }},
      {"model.window_size", [](RunConfig& c, K k, K v) { c.model.window_size = parse_int<int>(k, v); }},
      {"model.embed_dim", [](RunConfig& c, K k, K v) { c.model.embed_dim = parse_int<int>(k, v); }},
      {"model.depths", [](RunConfig& c, K k, K v) { c.model.depths = parse_int_list(k, v); }},
      {"model.num_heads", [](RunConfig& c, K k, K v) { c.model.num_heads = parse_int_list(k, v); }},
      {"model.image_size", [](RunConfig& c, K k, K v) { c.model.image_size = parse_int<int>(k, v); }},
      {"model.in_channels", [](RunConfig& c, K k, K v) { c.model.in_channels = parse_int<int>(k, v); }},
      {"model.mlp_ratio", [](RunConfig& c, K k, K v) { c.model.mlp_ratio = parse_int<int>(k, v); }},
      {"model.time_embed_dim", [](RunConfig& c, K k, K v) { c.model.time_embed_dim = parse_int<int>(k, v); }},

      {"diffusion.steps", [](RunConfig& c, K k, K v) { c.diffusion.steps = parse_int<int>(k, v); }},
      {"diffusion.schedule",
       [](RunConfig& c, K k, K v) { c.diffusion.kind = wrap(k, [&] { return parse_schedule_kind(v); }); }},
      {"diffusion.beta_start", [](RunConfig& c, K k, K v) { c.diffusion.beta_start = parse_real(k, v); }},
      {"diffusion.beta_end", [](RunConfig& c, K k, K v) { c.diffusion.beta_end = parse_real(k, v); }},

      {"data.root_path", [](RunConfig& c, K, K v) { c.data.root_path = v; }},
      {"data.patch_size", [](RunConfig& c, K k, K v) { c.data.patch_size = parse_int<int>(k, v); }},
      {"data.train_fraction", [](RunConfig& c, K k, K v) { c.data.train_fraction = parse_real(k, v); }},
      {"data.validation_fraction", [](RunConfig& c, K k, K v) { c.data.validation_fraction = parse_real(k, v); }},
      {"data.shuffle_seed", [](RunConfig& c, K k, K v) { c.data.shuffle_seed = parse_int<std::uint64_t>(k, v); }},
      {"data.synthetic_count", [](RunConfig& c, K k, K v) { c.synthetic_count = parse_int<int>(k, v); }},

      {"train.learning_rate", [](RunConfig& c, K k, K v) { c.train.learning_rate = parse_real(k, v); }},
      {"train.batch_size", [](RunConfig& c, K k, K v) { c.train.batch_size = parse_int<int>(k, v); }},
      {"train.total_steps", [](RunConfig& c, K k, K v) { c.train.total_steps = parse_int<int>(k, v); }},
      {"train.optimizer", [](RunConfig& c, K, K v) { c.train.optimizer = v; }},
      {"train.adam_beta1", [](RunConfig& c, K k, K v) { c.train.beta1 = parse_real(k, v); }},
      {"train.adam_beta2", [](RunConfig& c, K k, K v) { c.train.beta2 = parse_real(k, v); }},
      {"train.grad_clip",
       [](RunConfig& c, K k, K v) {
         const double g = parse_real(k, v);
         c.train.grad_clip = g > 0 ? std::optional<double>(g) : std::nullopt;
       }},
      {"train.checkpoint_every", [](RunConfig& c, K k, K v) { c.train.checkpoint_every = parse_int<int>(k, v); }},
      {"train.ema_decay", [](RunConfig& c, K k, K v) { c.train.ema_decay = parse_real(k, v); }},

      {"restore.jumps", [](RunConfig& c, K k, K v) { c.restore.jumps = parse_int<int>(k, v); }},
      {"restore.init",
       [](RunConfig& c, K k, K v) {
         if (v == "noise") c.restore.init = MaskInit::noise;
         else if (v == "diffused") c.restore.init = MaskInit::diffused;
         else throw ConfigError(k + ": expected 'noise' or 'diffused', got '" + v + "'");
       }},
      {"restore.snapshots", [](RunConfig& c, K k, K v) { c.snapshots = parse_int_list(k, v); }},

      {"detect.dark_luma_threshold", [](RunConfig& c, K k, K v) { c.detect.dark_luma_threshold = parse_real(k, v); }},
      {"detect.saturation_threshold", [](RunConfig& c, K k, K v) { c.detect.saturation_threshold = parse_real(k, v); }},
      {"detect.dilation_radius", [](RunConfig& c, K k, K v) { c.detect.dilation_radius = parse_int<int>(k, v); }},
      {"detect.min_component_area", [](RunConfig& c, K k, K v) { c.detect.min_component_area = parse_int<int>(k, v); }},

      {"synthesize.kind", [](RunConfig& c, K k, K v) { c.synth_kind = wrap(k, [&] { return parse_artifact_kind(v); }); }},
      {"synthesize.intensity", [](RunConfig& c, K k, K v) { c.synth_intensity = parse_real(k, v); }},

      {"ablate.eval_images", [](RunConfig& c, K k, K v) { c.ablate_eval_images = parse_int<int>(k, v); }},
      {"ablate.timed_restores", [](RunConfig& c, K k, K v) { c.ablate_timed_restores = parse_int<int>(k, v); }},
  };
  return s;
}

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : config_detail::schema()) keys.push_back(k);
  return keys;
}

/// Sets one dotted key; throws ConfigError for unknown keys or bad values.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& s = config_detail::schema();
  auto it = s.find(key);
  if (it == s.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(c, key, config_detail::trim(value));
}

/// Applies "section.key=value".
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  apply_setting(c, config_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void parse_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    line = config_detail::trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = config_detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of any [section]");
    const std::string key = section + "." + config_detail::trim(line.substr(0, eq));
    try {
      apply_setting(c, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

inline void load_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  parse_config_text(c, ss.str(), path.string());
}

/// Cross-field validation; messages name the offending key.
inline void validate_config(const RunConfig& c) {
  auto check = [](const std::string& section, auto&& f) {
    try {
      f();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(section + ": " + e.what());
    }
  };
  check("model", [&] { c.model.validate(); });
  check("diffusion", [&] { c.diffusion.build(); });
  check("train", [&] { c.train.validate(); });
  check("detect", [&] { c.detect.validate(); });
  for (int t : c.snapshots)
    if (t < 0 || t > c.diffusion.steps)
      throw ConfigError("restore.snapshots: timestep " + std::to_string(t) + " outside [0, diffusion.steps]");
  if (c.data.patch_size != c.model.image_size)
    throw ConfigError("data.patch_size (" + std::to_string(c.data.patch_size) + ") must equal model.image_size (" +
                      std::to_string(c.model.image_size) + ")");
  if (c.restore.jumps < 0) throw ConfigError("restore.jumps must be >= 0");
  if (!(c.synth_intensity > 0 && c.synth_intensity <= 1)) throw ConfigError("synthesize.intensity must lie in (0,1]");
  if (c.synthetic_count < 0) throw ConfigError("data.synthetic_count must be >= 0");
  if (c.ablate_eval_images < 1) throw ConfigError("ablate.eval_images must be >= 1");
  if (c.ablate_timed_restores < 10) throw ConfigError("ablate.timed_restores must be >= 10");
}

}  // namespace artfix
