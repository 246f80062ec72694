#pragma once

// RunConfig: every knob a CLI run can turn, read from a plain key=value file
// and overridden by flags. Unknown keys are errors.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "psp/data.hpp"
#include "psp/model.hpp"
#include "psp/optim.hpp"
#include "psp/train.hpp"

namespace psp {

struct RunConfig {
  ModelConfig model;  // model.pyramid is ignored; see psp / pyramid
  bool psp = true;
  PyramidConfig pyramid;
  OptimConfig optim;
  AugmentConfig augment;
  SynthConfig synth;
  std::uint64_t seed = 0;
  std::int64_t batch_size = 4;
  std::int64_t log_interval = 10;
  std::int64_t checkpoint_interval = 500;  // 0 writes only the final checkpoint
  std::string train_dir = "data/train";
  std::string eval_dir = "data/val";
  std::vector<double> eval_scales{1.0};
  std::int64_t synth_count = 32;
  std::int64_t ablate_seeds = 3;
  std::int64_t ablate_train = 256;
  std::int64_t ablate_test = 64;
  std::string ablate_tables = "variants,alpha";

  ModelConfig model_config() const {
    auto m = model;
    if (psp) {
      m.pyramid = pyramid;
    } else {
      m.pyramid.reset();
    }
    return m;
  }

  TrainOptions train_options(int threads = 1) const { return {batch_size, seed, threads}; }

  void validate() const {
    model_config().validate();
    optim.validate();
    augment.validate();
    synth.validate();
    if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (log_interval < 1) throw ConfigError("train.log_interval must be positive");
    if (checkpoint_interval < 0) throw ConfigError("train.checkpoint_interval must be non-negative");
    if (eval_scales.empty()) throw ConfigError("eval.scales must list at least one scale");
    for (double s : eval_scales) {
      if (!(s > 0)) throw ConfigError("eval.scales must be positive");
    }
    if (synth_count < 1) throw ConfigError("synth.count must be positive");
    if (ablate_seeds < 1 || ablate_train < 1 || ablate_test < 1) {
      throw ConfigError("ablate.seeds, ablate.train_count and ablate.test_count must be positive");
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& s) {
  N v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) throw ConfigError("not a valid number: '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("not a valid boolean: '" + s + "'");
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  if (out.empty() || (out.size() == 1 && out[0].empty())) throw ConfigError("empty list");
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename N>
std::string format_list(const N& xs) {
  std::string s;
  for (const auto& x : xs) {
    if (!s.empty()) s += ',';
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(x)>>) {
      s += format_double(x);
    } else {
      s += std::to_string(x);
    }
  }
  return s;
}

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Access>
ConfigKey field(std::string name, Access access) {
  ConfigKey k;
  k.name = std::move(name);
  k.set = [access](RunConfig& c, const std::string& v) {
    T& ref = access(c);
    if constexpr (std::is_same_v<T, bool>) {
      ref = parse_bool(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      ref = v;
    } else if constexpr (std::is_same_v<T, std::vector<int>> || std::is_same_v<T, std::vector<double>>) {
      T out;
      for (const auto& item : split_csv(v)) out.push_back(parse_number<typename T::value_type>(item));
      ref = std::move(out);
    } else if constexpr (std::is_same_v<T, std::array<int, 4>>) {
      auto items = split_csv(v);
      if (items.size() != 4) throw ConfigError("expected 4 comma-separated values");
      for (std::size_t i = 0; i < 4; ++i) ref[i] = parse_number<int>(items[i]);
    } else {
      ref = parse_number<T>(v);
    }
  };
  k.get = [access](const RunConfig& c) -> std::string {
    const T& ref = access(const_cast<RunConfig&>(c));
    if constexpr (std::is_same_v<T, bool>) {
      return ref ? "true" : "false";
    } else if constexpr (std::is_same_v<T, std::string>) {
      return ref;
    } else if constexpr (std::is_same_v<T, std::vector<int>> || std::is_same_v<T, std::vector<double>> ||
                         std::is_same_v<T, std::array<int, 4>>) {
      return format_list(ref);
    } else if constexpr (std::is_floating_point_v<T>) {
      return format_double(ref);
    } else {
      return std::to_string(ref);
    }
  };
  return k;
}

#define PSP_FIELD(T, key, expr) field<T>(key, [](RunConfig& c) -> T& { return expr; })

using Int4 = std::array<int, 4>;

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k{
        PSP_FIELD(std::uint64_t, "seed", c.seed),
        PSP_FIELD(int, "model.num_classes", c.model.num_classes),
        PSP_FIELD(Int4, "model.blocks", c.model.backbone.stage_blocks),
        PSP_FIELD(int, "model.base_channels", c.model.backbone.base_channels),
        PSP_FIELD(int, "model.out_multiplier", c.model.backbone.out_multiplier),
        PSP_FIELD(int, "model.bottleneck_ratio", c.model.backbone.bottleneck_ratio),
        PSP_FIELD(Int4, "model.strides", c.model.backbone.strides),
        PSP_FIELD(Int4, "model.dilations", c.model.backbone.dilations),
        PSP_FIELD(int, "model.tap_stage", c.model.backbone.tap_stage),
        PSP_FIELD(bool, "model.zero_init_residual", c.model.backbone.zero_init_residual),
        PSP_FIELD(int, "model.head_channels", c.model.head_channels),
        PSP_FIELD(bool, "model.aux", c.model.aux_enabled),
        PSP_FIELD(double, "model.aux_weight", c.model.aux_weight),
        PSP_FIELD(bool, "model.psp", c.psp),
        PSP_FIELD(std::vector<int>, "model.bins", c.pyramid.bins),
        PSP_FIELD(bool, "model.dim_reduce", c.pyramid.dim_reduce),
        PSP_FIELD(double, "optim.base_lr", c.optim.base_lr),
        PSP_FIELD(double, "optim.power", c.optim.power),
        PSP_FIELD(std::int64_t, "optim.max_iter", c.optim.max_iter),
        PSP_FIELD(double, "optim.momentum", c.optim.momentum),
        PSP_FIELD(double, "optim.weight_decay", c.optim.weight_decay),
        PSP_FIELD(bool, "augment.enabled", c.augment.enabled),
        PSP_FIELD(double, "augment.mirror_prob", c.augment.mirror_prob),
        PSP_FIELD(double, "augment.resize_min", c.augment.resize_min),
        PSP_FIELD(double, "augment.resize_max", c.augment.resize_max),
        PSP_FIELD(double, "augment.rotate_deg", c.augment.rotate_deg),
        PSP_FIELD(double, "augment.blur_prob", c.augment.blur_prob),
        PSP_FIELD(double, "augment.blur_sigma_min", c.augment.blur_sigma_min),
        PSP_FIELD(double, "augment.blur_sigma_max", c.augment.blur_sigma_max),
        PSP_FIELD(std::int64_t, "augment.crop_size", c.augment.crop_size),
        PSP_FIELD(std::int64_t, "synth.height", c.synth.height),
        PSP_FIELD(std::int64_t, "synth.width", c.synth.width),
        PSP_FIELD(int, "synth.scene_classes", c.synth.scene_classes),
        PSP_FIELD(int, "synth.objects_min", c.synth.objects_min),
        PSP_FIELD(int, "synth.objects_max", c.synth.objects_max),
        PSP_FIELD(int, "synth.object_size_min", c.synth.object_size_min),
        PSP_FIELD(int, "synth.object_size_max", c.synth.object_size_max),
        PSP_FIELD(int, "synth.halo", c.synth.halo),
        PSP_FIELD(double, "synth.noise", c.synth.noise),
        PSP_FIELD(double, "synth.scene_saturation", c.synth.scene_saturation),
        PSP_FIELD(double, "synth.split_prob", c.synth.split_prob),
        PSP_FIELD(std::int64_t, "synth.count", c.synth_count),
        PSP_FIELD(std::int64_t, "train.batch_size", c.batch_size),
        PSP_FIELD(std::int64_t, "train.log_interval", c.log_interval),
        PSP_FIELD(std::int64_t, "train.checkpoint_interval", c.checkpoint_interval),
        PSP_FIELD(std::string, "data.train_dir", c.train_dir),
        PSP_FIELD(std::string, "data.eval_dir", c.eval_dir),
        PSP_FIELD(std::vector<double>, "eval.scales", c.eval_scales),
        PSP_FIELD(std::int64_t, "ablate.seeds", c.ablate_seeds),
        PSP_FIELD(std::int64_t, "ablate.train_count", c.ablate_train),
        PSP_FIELD(std::int64_t, "ablate.test_count", c.ablate_test),
        PSP_FIELD(std::string, "ablate.tables", c.ablate_tables),
    };
    ConfigKey stem{"model.stem",
                   [](RunConfig& c, const std::string& v) {
                     if (v == "toy") {
                       c.model.backbone.stem = StemKind::Toy;
                     } else if (v == "resnet") {
                       c.model.backbone.stem = StemKind::ResNet;
                     } else {
                       throw ConfigError("expected toy or resnet, got '" + v + "'");
                     }
                   },
                   [](const RunConfig& c) -> std::string {
                     return c.model.backbone.stem == StemKind::Toy ? "toy" : "resnet";
                   }};
    ConfigKey pool{"model.pool",
                   [](RunConfig& c, const std::string& v) {
                     if (v == "avg") {
                       c.pyramid.pool = PoolMode::Average;
                     } else if (v == "max") {
                       c.pyramid.pool = PoolMode::Max;
                     } else {
                       throw ConfigError("expected avg or max, got '" + v + "'");
                     }
                   },
                   [](const RunConfig& c) -> std::string { return c.pyramid.pool == PoolMode::Average ? "avg" : "max"; }};
    k.push_back(std::move(stem));
    k.push_back(std::move(pool));
    return k;
  }();
  return keys;
}

#undef PSP_FIELD

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value,
                             const std::string& where = "") {
  const auto& keys = detail::config_keys();
  auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == key; });
  const std::string at = where.empty() ? "" : where + ": ";
  if (it == keys.end()) throw ConfigError(at + "unknown config key '" + key + "'");
  try {
    it->set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(at + key + ": " + e.what());
  }
}

/// Parses one `key=value` override.
inline void apply_override(RunConfig& cfg, const std::string& assignment, const std::string& where = "") {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError((where.empty() ? "" : where + ": ") + "expected key=value, got '" + assignment + "'");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)), where);
}

/// Blank lines and lines starting with '#' are skipped; a key may appear once.
inline void apply_config_text(RunConfig& cfg, std::istream& in, const std::string& name) {
  std::string line;
  std::map<std::string, int> seen;
  for (int n = 1; std::getline(in, line); ++n) {
    auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto where = name + ":" + std::to_string(n);
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + t + "'");
    auto key = detail::trim(t.substr(0, eq));
    if (auto [it, fresh] = seen.emplace(key, n); !fresh) {
      throw ConfigError(where + ": '" + key + "' already set on line " + std::to_string(it->second));
    }
    set_config_value(cfg, key, detail::trim(t.substr(eq + 1)), where);
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  apply_config_text(cfg, in, path.string());
}

/// Every key with its current value, in a fixed order; the output parses back
/// to the same configuration.
inline std::vector<std::pair<std::string, std::string>> resolved_config(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : detail::config_keys()) out.emplace_back(k.name, k.get(cfg));
  return out;
}

inline void write_config(std::ostream& os, const RunConfig& cfg) {
  for (const auto& [k, v] : resolved_config(cfg)) os << k << " = " << v << '\n';
}

/// Worker count from PSP_THREADS, defaulting to 1.
inline int threads_from_env(const char* value) {
  if (!value || !*value) return 1;
  int n = 0;
  try {
    n = detail::parse_number<int>(value);
  } catch (const ConfigError&) {
    throw ConfigError(std::string("PSP_THREADS must be a positive integer, got '") + value + "'");
  }
  if (n < 1) throw ConfigError(std::string("PSP_THREADS must be a positive integer, got '") + value + "'");
  return n;
}

}  // namespace psp
