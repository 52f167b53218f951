#pragma once

// Flat key=value configuration mirroring TrainConfig. One option per line,
// '#' starts a comment; the same keys are accepted by `--set key=value`
// overrides. Unknown keys and malformed values are rejected.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adps/backbone.hpp"
#include "adps/data.hpp"
#include "adps/errors.hpp"
#include "adps/synth.hpp"
#include "adps/wmb.hpp"

namespace adps::config {

using json = nlohmann::json;
using KeyValues = std::map<std::string, std::string>;

enum class Variant { kFull, kNoTeacher, kNoStudent, kNoPsmWmb };

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "no-teacher") return Variant::kNoTeacher;
  if (s == "no-student") return Variant::kNoStudent;
  if (s == "no-psm-wmb") return Variant::kNoPsmWmb;
  throw ConfigError("unknown variant '" + s +
                    "' (expected full|no-teacher|no-student|no-psm-wmb)");
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoTeacher: return "no-teacher";
    case Variant::kNoStudent: return "no-student";
    case Variant::kNoPsmWmb: return "no-psm-wmb";
  }
  return "full";
}

struct TrainConfig {
  // optimization
  int epochs = 300;
  int batch_size = 32;
  real lr = 1e-4;
  std::vector<int> lr_decay_epochs = {240, 270};
  real lr_decay_factor = 0.2;
  real lambda = 1.0;
  real tau = 2.0;
  std::uint64_t seed = 0;

  // distillation structure
  int k = 8;
  std::map<int, int> stage_splits;  // empty = input-only asymmetry
  std::string fusion_mode = "wmb";
  std::string mask_metric = "cosine";
  Variant variant = Variant::kFull;
  bool joint_backprop = false;

  // model
  int resolution = 256;
  int input_channels = 3;
  std::vector<int> stage_channels = {64, 128, 256};
  std::vector<int> stage_strides = {2, 4, 8};
  bool norm = true;
  int kernel_size = 3;
  std::vector<int> upblock_channels;  // empty = mirror stage channels
  std::string teacher_mode = "random-frozen";
  std::string teacher_checkpoint;

  // data
  std::string data_layout = "toy";
  std::string data_root;
  std::string data_category;
  int toy_train = 200;
  int toy_test = 60;

  // synthesis
  synth::SynthConfig synth;

  // evaluation
  real smooth_sigma = 4.0;
  real fpr_limit = 0.3;
  bool per_image_auroc = false;

  backbone::BackboneConfig backbone_config() const {
    backbone::BackboneConfig b;
    b.stage_channels = stage_channels;
    b.stage_strides = stage_strides;
    b.input_channels = input_channels;
    b.norm = norm;
    b.kernel_size = kernel_size;
    return b;
  }

  backbone::AsymmetryPlan plan() const {
    backbone::AsymmetryPlan p;
    p.input_k = k;
    p.stage_splits = stage_splits;
    return p;
  }

  data::DatasetSpec dataset_spec() const {
    data::DatasetSpec d;
    d.root = data_root;
    d.layout = data::layout_from_string(data_layout);
    d.category = data_category;
    d.resolution = resolution;
    d.toy_train = toy_train;
    d.toy_test = toy_test;
    d.seed = seed;
    return d;
  }

  void validate() const {
    backbone_config().validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    int prev = 0;
    for (int d : lr_decay_epochs) {
      if (d <= prev || d >= epochs)
        throw ConfigError("lr_decay_epochs must be strictly increasing and < epochs");
      prev = d;
    }
    if (lr_decay_factor <= 0.0) throw ConfigError("lr_decay_factor must be positive");
    if (lambda < 0.0 || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
    if (tau < 0.0 || !std::isfinite(tau)) throw ConfigError("tau must be finite and >= 0");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (resolution % stage_strides.back() != 0)
      throw ConfigError("resolution must be divisible by the deepest stride");
    if (resolution % k != 0) throw ConfigError("resolution must be divisible by k");
    try {
      backbone::validate_plan_geometry(backbone_config(), resolution, resolution, plan());
    } catch (const DivisibilityError& e) {
      throw ConfigError(e.what());
    }
    wmb::fusion_from_string(fusion_mode);
    wmb::metric_from_string(mask_metric);
    data::layout_from_string(data_layout);
    if (teacher_mode != "random-frozen" && teacher_mode != "load-checkpoint")
      throw ConfigError("teacher_mode must be random-frozen or load-checkpoint");
    if (teacher_mode == "load-checkpoint" && teacher_checkpoint.empty())
      throw ConfigError("teacher_mode=load-checkpoint requires teacher_checkpoint");
    synth.validate();
    if (smooth_sigma < 0.0) throw ConfigError("eval.smooth_sigma must be >= 0");
    if (fpr_limit <= 0.0 || fpr_limit > 1.0) throw ConfigError("eval.fpr_limit must lie in (0,1]");
  }
};

// Paper operating point with the desk-scale backbone.
inline TrainConfig paper_preset() { return TrainConfig{}; }

// Small preset that trains in minutes on a laptop CPU.
inline TrainConfig toy_preset() {
  TrainConfig c;
  c.epochs = 60;
  c.batch_size = 16;
  c.lr = 1e-3;
  c.lr_decay_epochs = {48, 54};
  c.k = 4;
  c.resolution = 64;
  c.stage_channels = {16, 32, 64};
  c.stage_strides = {2, 4, 8};
  c.toy_train = 200;
  c.toy_test = 60;
  return c;
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
  }
}

inline real parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const real r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected boolean, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const std::string& item : split_list(v, ',')) out.push_back(parse_int(key, item));
  return out;
}

// "1:2,2:2" -> {1: 2, 2: 2}
inline std::map<int, int> parse_splits(const std::string& key, const std::string& v) {
  std::map<int, int> out;
  for (const std::string& item : split_list(v, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw ConfigError("key '" + key + "': expected stage:factor entries, got '" + item + "'");
    out[parse_int(key, trim(item.substr(0, colon)))] =
        parse_int(key, trim(item.substr(colon + 1)));
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ",";
    os << v[i];
  }
  return os.str();
}

inline std::string join_splits(const std::map<int, int>& m) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [k, v] : m) {
    if (!first) os << ",";
    os << k << ":" << v;
    first = false;
  }
  return os.str();
}


inline std::string real_str(real v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline KeyValues parse_config_text(std::istream& in) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse_config_text(in);
}

inline KeyValues parse_overrides(const std::vector<std::string>& sets) {
  KeyValues kv;
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + s + "': expected key=value");
    kv[detail::trim(s.substr(0, eq))] = detail::trim(s.substr(eq + 1));
  }
  return kv;
}

// Applies key/value pairs onto a config; every key is schema-checked.
inline TrainConfig apply_overrides(TrainConfig cfg, const KeyValues& kv) {
  using namespace detail;
  for (const auto& [key, value] : kv) {
    if (key == "epochs") cfg.epochs = parse_int(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
    else if (key == "lr") cfg.lr = parse_real(key, value);
    else if (key == "lr_decay_epochs") cfg.lr_decay_epochs = parse_int_list(key, value);
    else if (key == "lr_decay_factor") cfg.lr_decay_factor = parse_real(key, value);
    else if (key == "lambda") cfg.lambda = parse_real(key, value);
    else if (key == "tau") cfg.tau = parse_real(key, value);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(std::stoull(value));
    else if (key == "k") cfg.k = parse_int(key, value);
    else if (key == "stage_splits") cfg.stage_splits = parse_splits(key, value);
    else if (key == "fusion_mode") cfg.fusion_mode = value;
    else if (key == "mask_metric") cfg.mask_metric = value;
    else if (key == "variant") cfg.variant = variant_from_string(value);
    else if (key == "joint_backprop") cfg.joint_backprop = parse_bool(key, value);
    else if (key == "resolution") cfg.resolution = parse_int(key, value);
    else if (key == "input_channels") cfg.input_channels = parse_int(key, value);
    else if (key == "stage_channels") cfg.stage_channels = parse_int_list(key, value);
    else if (key == "stage_strides") cfg.stage_strides = parse_int_list(key, value);
    else if (key == "norm") cfg.norm = parse_bool(key, value);
    else if (key == "kernel_size") cfg.kernel_size = parse_int(key, value);
    else if (key == "upblock_channels") cfg.upblock_channels = parse_int_list(key, value);
    else if (key == "teacher_mode") cfg.teacher_mode = value;
    else if (key == "teacher_checkpoint") cfg.teacher_checkpoint = value;
    else if (key == "data.layout") cfg.data_layout = value;
    else if (key == "data.root") cfg.data_root = value;
    else if (key == "data.category") cfg.data_category = value;
    else if (key == "data.toy_train") cfg.toy_train = parse_int(key, value);
    else if (key == "data.toy_test") cfg.toy_test = parse_int(key, value);
    else if (key == "synth.anomaly_prob") cfg.synth.anomaly_prob = parse_real(key, value);
    else if (key == "synth.perlin_lo") cfg.synth.perlin_scale_lo = parse_int(key, value);
    else if (key == "synth.perlin_hi") cfg.synth.perlin_scale_hi = parse_int(key, value);
    else if (key == "synth.threshold") cfg.synth.threshold = parse_real(key, value);
    else if (key == "synth.beta_lo") cfg.synth.beta_lo = parse_real(key, value);
    else if (key == "synth.beta_hi") cfg.synth.beta_hi = parse_real(key, value);
    else if (key == "synth.texture_source") cfg.synth.texture_source = value;
    else if (key == "eval.smooth_sigma") cfg.smooth_sigma = parse_real(key, value);
    else if (key == "eval.fpr_limit") cfg.fpr_limit = parse_real(key, value);
    else if (key == "eval.per_image_auroc") cfg.per_image_auroc = parse_bool(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

inline KeyValues to_key_values(const TrainConfig& c) {
  using namespace detail;
  KeyValues kv;
  kv["epochs"] = std::to_string(c.epochs);
  kv["batch_size"] = std::to_string(c.batch_size);
  kv["lr"] = real_str(c.lr);
  kv["lr_decay_epochs"] = join(c.lr_decay_epochs);
  kv["lr_decay_factor"] = real_str(c.lr_decay_factor);
  kv["lambda"] = real_str(c.lambda);
  kv["tau"] = real_str(c.tau);
  kv["seed"] = std::to_string(c.seed);
  kv["k"] = std::to_string(c.k);
  kv["stage_splits"] = join_splits(c.stage_splits);
  kv["fusion_mode"] = c.fusion_mode;
  kv["mask_metric"] = c.mask_metric;
  kv["variant"] = to_string(c.variant);
  kv["joint_backprop"] = c.joint_backprop ? "true" : "false";
  kv["resolution"] = std::to_string(c.resolution);
  kv["input_channels"] = std::to_string(c.input_channels);
  kv["stage_channels"] = join(c.stage_channels);
  kv["stage_strides"] = join(c.stage_strides);
  kv["norm"] = c.norm ? "true" : "false";
  kv["kernel_size"] = std::to_string(c.kernel_size);
  kv["upblock_channels"] = join(c.upblock_channels);
  kv["teacher_mode"] = c.teacher_mode;
  kv["teacher_checkpoint"] = c.teacher_checkpoint;
  kv["data.layout"] = c.data_layout;
  kv["data.root"] = c.data_root;
  kv["data.category"] = c.data_category;
  kv["data.toy_train"] = std::to_string(c.toy_train);
  kv["data.toy_test"] = std::to_string(c.toy_test);
  kv["synth.anomaly_prob"] = real_str(c.synth.anomaly_prob);
  kv["synth.perlin_lo"] = std::to_string(c.synth.perlin_scale_lo);
  kv["synth.perlin_hi"] = std::to_string(c.synth.perlin_scale_hi);
  kv["synth.threshold"] = real_str(c.synth.threshold);
  kv["synth.beta_lo"] = real_str(c.synth.beta_lo);
  kv["synth.beta_hi"] = real_str(c.synth.beta_hi);
  kv["synth.texture_source"] = c.synth.texture_source;
  kv["eval.smooth_sigma"] = real_str(c.smooth_sigma);
  kv["eval.fpr_limit"] = real_str(c.fpr_limit);
  kv["eval.per_image_auroc"] = c.per_image_auroc ? "true" : "false";
  return kv;
}

// JSON snapshot for checkpoint headers; round-trips through apply().
inline json to_json(const TrainConfig& c) {
  json j;
  for (const auto& [k, v] : to_key_values(c)) j[k] = v;
  return j;
}

inline TrainConfig from_json(const json& j) {
  KeyValues kv;
  for (const auto& [k, v] : j.items()) kv[k] = v.get<std::string>();
  return apply_overrides(TrainConfig{}, kv);
}

inline void write_config_file(const std::string& path, const TrainConfig& c) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write config file: " + path);
  for (const auto& [k, v] : to_key_values(c)) out << k << " = " << v << "\n";
}

}  // namespace adps::config
