// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/config.hpp"

#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "dpdiff/errors.hpp"

namespace dpdiff {

namespace {

using ojson = nlohmann::ordered_json;

template <typename T>
T get_as(const ojson& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + value.dump());
  }
}

template <typename T>
T get_unsigned(const ojson& value, const std::string& key) {
  if (!value.is_number_integer() || (!value.is_number_unsigned() && value.get<std::int64_t>() < 0)) {
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  }
  const auto raw = value.get<std::uint64_t>();
  if (raw > std::numeric_limits<T>::max()) throw ConfigError("config key '" + key + "' is out of range");
  return static_cast<T>(raw);
}

int get_int(const ojson& value, const std::string& key) {
  if (!value.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
  return value.get<int>();
}

double get_double(const ojson& value, const std::string& key) {
  if (!value.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return value.get<double>();
}

struct SynthField {
  const char* key;
  std::function<ojson(const SynthSpec&)> read;
  std::function<void(SynthSpec&, const ojson&)> write;
};

const std::vector<SynthField>& synth_fields() {
  static const std::vector<SynthField> fields = {
      {"num_categories", [](const SynthSpec& s) { return ojson(s.num_categories); },
       [](SynthSpec& s, const ojson& v) { s.num_categories = get_unsigned<std::uint32_t>(v, "num_categories"); }},
      {"centroids_per_category", [](const SynthSpec& s) { return ojson(s.centroids_per_category); },
       [](SynthSpec& s, const ojson& v) {
         s.centroids_per_category = get_unsigned<std::uint32_t>(v, "centroids_per_category");
       }},
      {"grid_h", [](const SynthSpec& s) { return ojson(s.grid_h); },
       [](SynthSpec& s, const ojson& v) { s.grid_h = get_unsigned<std::uint16_t>(v, "grid_h"); }},
      {"grid_w", [](const SynthSpec& s) { return ojson(s.grid_w); },
       [](SynthSpec& s, const ojson& v) { s.grid_w = get_unsigned<std::uint16_t>(v, "grid_w"); }},
      {"channels", [](const SynthSpec& s) { return ojson(s.channels); },
       [](SynthSpec& s, const ojson& v) { s.channels = get_unsigned<std::uint16_t>(v, "channels"); }},
      {"layers", [](const SynthSpec& s) { return ojson(s.layers); },
       [](SynthSpec& s, const ojson& v) { s.layers = get_unsigned<std::uint8_t>(v, "layers"); }},
      {"image_h", [](const SynthSpec& s) { return ojson(s.image_h); },
       [](SynthSpec& s, const ojson& v) { s.image_h = get_unsigned<std::uint16_t>(v, "image_h"); }},
      {"image_w", [](const SynthSpec& s) { return ojson(s.image_w); },
       [](SynthSpec& s, const ojson& v) { s.image_w = get_unsigned<std::uint16_t>(v, "image_w"); }},
      {"centroid_scale", [](const SynthSpec& s) { return ojson(s.centroid_scale); },
       [](SynthSpec& s, const ojson& v) { s.centroid_scale = get_double(v, "centroid_scale"); }},
      {"token_noise", [](const SynthSpec& s) { return ojson(s.token_noise); },
       [](SynthSpec& s, const ojson& v) { s.token_noise = get_double(v, "token_noise"); }},
      {"anomaly_offset", [](const SynthSpec& s) { return ojson(s.anomaly_offset); },
       [](SynthSpec& s, const ojson& v) { s.anomaly_offset = get_double(v, "anomaly_offset"); }},
      {"rect_min", [](const SynthSpec& s) { return ojson(s.rect_min); },
       [](SynthSpec& s, const ojson& v) { s.rect_min = get_unsigned<std::uint16_t>(v, "rect_min"); }},
      {"rect_max", [](const SynthSpec& s) { return ojson(s.rect_max); },
       [](SynthSpec& s, const ojson& v) { s.rect_max = get_unsigned<std::uint16_t>(v, "rect_max"); }},
      {"train_per_category", [](const SynthSpec& s) { return ojson(s.train_per_category); },
       [](SynthSpec& s, const ojson& v) { s.train_per_category = get_unsigned<std::uint32_t>(v, "train_per_category"); }},
      {"test_normal_per_category", [](const SynthSpec& s) { return ojson(s.test_normal_per_category); },
       [](SynthSpec& s, const ojson& v) {
         s.test_normal_per_category = get_unsigned<std::uint32_t>(v, "test_normal_per_category");
       }},
      {"test_anomalous_per_category", [](const SynthSpec& s) { return ojson(s.test_anomalous_per_category); },
       [](SynthSpec& s, const ojson& v) {
         s.test_anomalous_per_category = get_unsigned<std::uint32_t>(v, "test_anomalous_per_category");
       }},
      {"seed", [](const SynthSpec& s) { return ojson(s.seed); },
       [](SynthSpec& s, const ojson& v) { s.seed = get_unsigned<std::uint64_t>(v, "seed"); }},
  };
  return fields;
}

ojson synth_to(const SynthSpec& spec) {
  ojson j = ojson::object();
  for (const auto& f : synth_fields()) j[f.key] = f.read(spec);
  return j;
}

SynthSpec synth_from(const ojson& j) {
  if (!j.is_object()) throw ConfigError("synth spec must be a JSON object");
  SynthSpec spec;
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const auto& f : synth_fields()) {
      if (key == f.key) {
        f.write(spec, value);
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown synth spec key '" + key + "'");
  }
  return spec;
}

struct Field {
  const char* key;
  bool reported;  // value taken from the published implementation details
  std::function<ojson(const RunConfig&)> read;
  std::function<void(RunConfig&, const ojson&)> write;
};

#define DPDIFF_SIZE_FIELD(name, reported)                                      \
  Field {                                                                      \
    #name, reported, [](const RunConfig& c) { return ojson(c.name); },         \
        [](RunConfig& c, const ojson& v) { c.name = get_unsigned<std::size_t>(v, #name); } \
  }
#define DPDIFF_INT_FIELD(name, reported)                               \
  Field {                                                              \
    #name, reported, [](const RunConfig& c) { return ojson(c.name); }, \
        [](RunConfig& c, const ojson& v) { c.name = get_int(v, #name); } \
  }
#define DPDIFF_DOUBLE_FIELD(name, reported)                               \
  Field {                                                                 \
    #name, reported, [](const RunConfig& c) { return ojson(c.name); },    \
        [](RunConfig& c, const ojson& v) { c.name = get_double(v, #name); } \
  }
#define DPDIFF_STRING_FIELD(name, reported)                                         \
  Field {                                                                           \
    #name, reported, [](const RunConfig& c) { return ojson(c.name); },              \
        [](RunConfig& c, const ojson& v) { c.name = get_as<std::string>(v, #name); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", false, [](const RunConfig& c) { return ojson(c.seed); },
            [](RunConfig& c, const ojson& v) { c.seed = get_unsigned<std::uint64_t>(v, "seed"); }},
      DPDIFF_STRING_FIELD(train_features, false),
      DPDIFF_STRING_FIELD(test_features, false),
      Field{"synth", false, [](const RunConfig& c) { return synth_to(c.synth); },
            [](RunConfig& c, const ojson& v) { c.synth = synth_from(v); }},
      Field{"layers", false, [](const RunConfig& c) { return ojson(c.layers); },
            [](RunConfig& c, const ojson& v) {
              if (!v.is_array()) throw ConfigError("config key 'layers' must be an array");
              c.layers.clear();
              for (const auto& e : v) c.layers.push_back(get_unsigned<std::size_t>(e, "layers"));
            }},
      DPDIFF_SIZE_FIELD(local_prototypes, true),
      DPDIFF_SIZE_FIELD(global_prototypes, true),
      DPDIFF_SIZE_FIELD(prototype_heads, false),
      DPDIFF_SIZE_FIELD(prototype_ffn_hidden, false),
      DPDIFF_SIZE_FIELD(depth, false),
      DPDIFF_SIZE_FIELD(heads, false),
      DPDIFF_SIZE_FIELD(ffn_hidden, false),
      DPDIFF_SIZE_FIELD(time_freq_dim, false),
      DPDIFF_INT_FIELD(diffusion_steps, true),
      DPDIFF_DOUBLE_FIELD(beta_start, true),
      DPDIFF_DOUBLE_FIELD(beta_end, true),
      DPDIFF_DOUBLE_FIELD(lambda_local, true),
      DPDIFF_DOUBLE_FIELD(lambda_global, true),
      Field{"sinkhorn_epsilon", false,
            [](const RunConfig& c) { return c.sinkhorn_epsilon ? ojson(*c.sinkhorn_epsilon) : ojson(nullptr); },
            [](RunConfig& c, const ojson& v) {
              if (v.is_null()) {
                c.sinkhorn_epsilon.reset();
              } else {
                c.sinkhorn_epsilon = get_double(v, "sinkhorn_epsilon");
              }
            }},
      DPDIFF_INT_FIELD(sinkhorn_max_iter, false),
      DPDIFF_DOUBLE_FIELD(sinkhorn_tol, false),
      DPDIFF_DOUBLE_FIELD(lr, true),
      DPDIFF_SIZE_FIELD(batch_size, true),
      DPDIFF_SIZE_FIELD(epochs, false),
      DPDIFF_SIZE_FIELD(max_steps, false),
      DPDIFF_SIZE_FIELD(checkpoint_interval, false),
      DPDIFF_INT_FIELD(t_fix, false),
      Field{"sampler", false,
            [](const RunConfig& c) { return ojson(c.sampler == Sampler::kDdim ? "ddim" : "ddpm"); },
            [](RunConfig& c, const ojson& v) {
              const auto s = get_as<std::string>(v, "sampler");
              if (s == "ddim") {
                c.sampler = Sampler::kDdim;
              } else if (s == "ddpm") {
                c.sampler = Sampler::kDdpm;
              } else {
                throw ConfigError("config key 'sampler' must be \"ddim\" or \"ddpm\", got \"" + s + "\"");
              }
            }},
      DPDIFF_INT_FIELD(ddim_steps, true),
      DPDIFF_INT_FIELD(ddpm_steps, false),
      DPDIFF_SIZE_FIELD(pool_kernel, false),
      DPDIFF_DOUBLE_FIELD(fpr_limit, false),
      DPDIFF_SIZE_FIELD(aupro_max_thresholds, false),
      DPDIFF_SIZE_FIELD(eval_workers, false),
      DPDIFF_STRING_FIELD(output_dir, false),
  };
  return table;
}

#undef DPDIFF_SIZE_FIELD
#undef DPDIFF_INT_FIELD
#undef DPDIFF_DOUBLE_FIELD
#undef DPDIFF_STRING_FIELD

ojson parse_json(const std::string& text, const char* what) {
  try {
    return ojson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(what) + " is not valid JSON: " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  if (lambda_local < 0.0 || lambda_global < 0.0) throw ConfigError("lambda_local and lambda_global must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (diffusion_steps < 1) throw ConfigError("diffusion_steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  if (t_fix < 1 || t_fix > diffusion_steps) {
    throw ConfigError("t_fix must lie in [1, " + std::to_string(diffusion_steps) + "], got " + std::to_string(t_fix));
  }
  if (ddim_steps < 1) throw ConfigError("ddim_steps must be >= 1");
  if (ddpm_steps < 1) throw ConfigError("ddpm_steps must be >= 1");
  if (local_prototypes < 1 || global_prototypes < 1) throw ConfigError("prototype counts must be >= 1");
  if (depth < 1 || heads < 1 || prototype_heads < 1) throw ConfigError("depth and head counts must be >= 1");
  if (time_freq_dim == 0 || time_freq_dim % 2 != 0) throw ConfigError("time_freq_dim must be even and positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (sinkhorn_epsilon && !(*sinkhorn_epsilon > 0.0)) throw ConfigError("sinkhorn_epsilon must be > 0");
  if (sinkhorn_max_iter < 1) throw ConfigError("sinkhorn_max_iter must be >= 1");
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("fpr_limit must lie in (0, 1]");
  if (pool_kernel < 1) throw ConfigError("pool_kernel must be >= 1");
  if (eval_workers < 1) throw ConfigError("eval_workers must be >= 1");
  if (train_features.empty() != test_features.empty()) {
    throw ConfigError("train_features and test_features must be given together");
  }
  if (!uses_feature_files()) synth.validate();
}

RunConfig config_from_json(const std::string& text) {
  const ojson j = parse_json(text, "config");
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig config;
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const auto& f : fields()) {
      if (key == f.key) {
        f.write(config, value);
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
  config.validate();
  return config;
}

std::string config_to_json(const RunConfig& config) {
  ojson j = ojson::object();
  for (const auto& f : fields()) j[f.key] = f.read(config);
  return j.dump(2) + "\n";
}

std::string config_defaults_dump(const RunConfig& config) {
  ojson j = ojson::object();
  for (const auto& f : fields()) {
    ojson entry = ojson::object();
    entry["value"] = f.read(config);
    entry["source"] = f.reported ? "reported setting" : "artifact default";
    j[f.key] = entry;
  }
  return j.dump(2) + "\n";
}

SynthSpec synth_spec_from_json(const std::string& text) {
  SynthSpec spec = synth_from(parse_json(text, "synth spec"));
  spec.validate();
  return spec;
}

std::string synth_spec_to_json(const SynthSpec& spec) { return synth_to(spec).dump(2) + "\n"; }

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace dpdiff
