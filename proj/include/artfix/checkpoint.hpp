#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "artfix/denoiser.hpp"
#include "artfix/diffusion.hpp"
#include "json.hpp"

namespace artfix {

// Layout: 8-byte magic "ARTIFUS\0", u32 LE version, u64 LE header length,
// UTF-8 JSON header, then raw little-endian float32 payloads. Tensor offsets
// in the header are relative to the first payload byte.
inline constexpr char kCheckpointMagic[8] = {'A', 'R', 'T', 'I', 'F', 'U', 'S', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Code { io, bad_magic, bad_version, truncated, corrupt };
  CheckpointError(Code c, const std::string& what) : std::runtime_error(what), code_(c) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

inline const char* checkpoint_error_name(CheckpointError::Code c) {
  switch (c) {
    case CheckpointError::Code::io: return "io";
    case CheckpointError::Code::bad_magic: return "bad_magic";
    case CheckpointError::Code::bad_version: return "bad_version";
    case CheckpointError::Code::truncated: return "truncated";
    case CheckpointError::Code::corrupt: return "corrupt";
  }
  return "?";
}

struct ScheduleParams {
  int steps = 250;
  ScheduleKind kind = ScheduleKind::linear;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return make_schedule(steps, kind, beta_start, beta_end); }
  friend bool operator==(const ScheduleParams&, const ScheduleParams&) = default;
};

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  DenoiserConfig config;
  ScheduleParams schedule;
  DenoiserWeights<float> weights;
  /// Optimizer moments and any auxiliary tensors (e.g. "ema/<param>").
  std::map<std::string, std::vector<float>> optimizer_state;
  std::int64_t step = 0;
  std::string rng_state;
};

inline nlohmann::json config_to_json(const DenoiserConfig& c) {
  return {{"backbone", backbone_name(c.backbone)},
          {"time_injection", injection_name(c.time_injection)},
          {"patch_size", c.patch_size},
          {"window_size", c.window_size},
          {"embed_dim", c.embed_dim},
          {"depths", c.depths},
          {"num_heads", c.num_heads},
          {"image_size", c.image_size},
          {"in_channels", c.in_channels},
          {"mlp_ratio", c.mlp_ratio},
          {"time_embed_dim", c.time_embed_dim}};
}

inline DenoiserConfig config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.backbone = parse_backbone(j.at("backbone").get<std::string>());
  c.time_injection = parse_injection(j.at("time_injection").get<std::string>());
  c.patch_size = j.at("patch_size").get<int>();
  c.window_size = j.at("window_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.depths = j.at("depths").get<std::vector<int>>();
  c.num_heads = j.at("num_heads").get<std::vector<int>>();
  c.image_size = j.at("image_size").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.time_embed_dim = j.at("time_embed_dim").get<int>();
  c.validate();
  return c;
}

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

struct TensorEntry {
  std::string name;
  Shape shape;
  const std::vector<float>* data;
};

}  // namespace detail

/// Serializes c to bytes.
inline std::string encode_checkpoint(const Checkpoint& c) {
  std::vector<detail::TensorEntry> entries;
  for (const auto& [k, t] : c.weights.tensors) entries.push_back({"weights/" + k, t.shape, &t.data});
  for (const auto& [k, v] : c.optimizer_state) entries.push_back({"optimizer/" + k, Shape{v.size()}, &v});

  nlohmann::ordered_json header;
  header["format"] = "artfix-checkpoint";
  header["config"] = config_to_json(c.config);
  header["schedule"] = {{"steps", c.schedule.steps},
                        {"kind", schedule_kind_name(c.schedule.kind)},
                        {"beta_start", c.schedule.beta_start},
                        {"beta_end", c.schedule.beta_end}};
  header["step"] = c.step;
  header["rng_state"] = c.rng_state;
  auto& list = header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    const std::uint64_t nbytes = std::uint64_t(e.data->size()) * 4;
    list.push_back({{"name", e.name}, {"dtype", "f32"}, {"shape", e.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["payload_bytes"] = offset;
  const std::string h = header.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le(out, c.format_version, 4);
  detail::put_le(out, h.size(), 8);
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& e : entries)
    for (float v : *e.data) detail::put_le(out, std::bit_cast<std::uint32_t>(v), 4);
  return out;
}

/// Parses and fully validates a checkpoint; nothing is returned on error.
inline Checkpoint decode_checkpoint(const std::string& bytes) {
  using Code = CheckpointError::Code;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 8 || std::memcmp(p, kCheckpointMagic, 8) != 0)
    throw CheckpointError(Code::bad_magic, "not a checkpoint: bad magic bytes");
  if (n < 20) throw CheckpointError(Code::truncated, "checkpoint truncated inside the preamble");
  const auto version = std::uint32_t(detail::get_le(p + 8, 4));
  if (version != kCheckpointVersion)
    throw CheckpointError(Code::bad_version, "unsupported checkpoint version " + std::to_string(version) +
                                                 " (expected " + std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t hlen = detail::get_le(p + 12, 8);
  if (hlen > n - 20) throw CheckpointError(Code::truncated, "checkpoint truncated inside the header");
  const std::size_t payload_at = 20 + std::size_t(hlen);

  Checkpoint c;
  c.format_version = version;
  std::vector<std::pair<std::string, std::vector<float>>> flat;
  try {
    const auto h = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + std::ptrdiff_t(payload_at));
    const std::uint64_t payload_bytes = h.at("payload_bytes").get<std::uint64_t>();
    if (payload_bytes > n - payload_at)
      throw CheckpointError(Code::truncated, "checkpoint payload truncated: header declares " +
                                                 std::to_string(payload_bytes) + " bytes, file holds " +
                                                 std::to_string(n - payload_at));
    if (payload_bytes != n - payload_at)
      throw CheckpointError(Code::corrupt, "checkpoint has trailing bytes after the payload");
    c.config = config_from_json(h.at("config"));
    const auto& s = h.at("schedule");
    c.schedule = {s.at("steps").get<int>(), parse_schedule_kind(s.at("kind").get<std::string>()),
                  s.at("beta_start").get<double>(), s.at("beta_end").get<double>()};
    c.step = h.at("step").get<std::int64_t>();
    c.rng_state = h.at("rng_state").get<std::string>();
    for (const auto& t : h.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      if (t.at("dtype").get<std::string>() != "f32")
        throw CheckpointError(Code::corrupt, "tensor '" + name + "' has unsupported dtype");
      const Shape shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::uint64_t>(), nbytes = t.at("nbytes").get<std::uint64_t>();
      if (nbytes != numel(shape) * 4)
        throw CheckpointError(Code::corrupt, "tensor '" + name + "' byte count disagrees with its shape");
      if (offset > payload_bytes || nbytes > payload_bytes - offset)
        throw CheckpointError(Code::corrupt, "tensor '" + name + "' extends past the payload");
      std::vector<float> v(numel(shape));
      const unsigned char* src = p + payload_at + offset;
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = std::bit_cast<float>(std::uint32_t(detail::get_le(src + 4 * i, 4)));
      if (name.rfind("weights/", 0) == 0) {
        c.weights.tensors.emplace(name.substr(8), Tensor<float>(shape, std::move(v)));
      } else if (name.rfind("optimizer/", 0) == 0) {
        c.optimizer_state.emplace(name.substr(10), std::move(v));
      } else {
        throw CheckpointError(Code::corrupt, "unknown tensor group in '" + name + "'");
      }
    }
    check_weights(c.weights, c.config);
    c.schedule.build();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(Code::corrupt, std::string("checkpoint header invalid: ") + e.what());
  }
  return c;
}

/// Writes atomically through a temporary file in the same directory.
inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(c);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointError::Code::io, "cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw CheckpointError(CheckpointError::Code::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Code::io, "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace artfix
