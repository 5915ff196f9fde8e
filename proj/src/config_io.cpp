// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#include "nevlab/config_io.hpp"

#include <cstddef>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace nevlab {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Every scalar field is reached through one typed pointer so that the
// serializer, the parser, and the override path share a single registry
// and can never drift apart.
enum class FieldKind { u64, i64, f64, boolean, pooling, variant_tag };

struct Field {
  const char* key;  // dotted name, e.g. "train.peak_lr"
  FieldKind kind;
  void* ptr;
};

static_assert(sizeof(std::size_t) == sizeof(std::uint64_t),
              "size_t fields are serialized as 64-bit unsigned");

std::vector<Field> registry(RunConfig& cfg) {
  PipelineConfig& p = cfg.pipeline;
  return {
      {"world.num_objects", FieldKind::u64, &p.world.num_objects},
      {"world.objects_per_image", FieldKind::u64, &p.world.objects_per_image},
      {"world.feature_dim", FieldKind::u64, &p.world.feature_dim},
      {"world.noise_rate", FieldKind::f64, &p.world.noise_rate},
      {"world.drop_rate", FieldKind::f64, &p.world.drop_rate},
      {"world.feature_noise_sigma", FieldKind::f64,
       &p.world.feature_noise_sigma},
      {"world.dataset_size", FieldKind::u64, &p.world.dataset_size},
      {"world.seed", FieldKind::u64, &p.world.seed},
      {"encoder.num_patches", FieldKind::u64, &p.encoder.num_patches},
      {"encoder.enc_dim", FieldKind::u64, &p.encoder.enc_dim},
      {"encoder.seed", FieldKind::u64, &p.encoder.seed},
      {"bridge.num_queries", FieldKind::u64, &p.bridge.num_queries},
      {"bridge.d_model", FieldKind::u64, &p.bridge.d_model},
      {"bridge.num_layers", FieldKind::u64, &p.bridge.num_layers},
      {"bridge.num_heads", FieldKind::u64, &p.bridge.num_heads},
      {"bridge.d_itc", FieldKind::u64, &p.bridge.d_itc},
      {"bridge.max_positions", FieldKind::u64, &p.bridge.max_positions},
      {"bridge.seed", FieldKind::u64, &p.bridge.seed},
      {"decoder.d_llm", FieldKind::u64, &p.decoder.d_llm},
      {"decoder.layers", FieldKind::u64, &p.decoder.layers},
      {"decoder.heads", FieldKind::u64, &p.decoder.heads},
      {"decoder.max_len", FieldKind::u64, &p.decoder.max_len},
      {"decoder.seed", FieldKind::u64, &p.decoder.seed},
      {"decoder.pretrain_steps", FieldKind::u64, &p.decoder.pretrain_steps},
      {"decoder.pretrain_batch", FieldKind::u64, &p.decoder.pretrain_batch},
      {"decoder.pretrain_lr", FieldKind::f64, &p.decoder.pretrain_lr},
      {"train.peak_lr", FieldKind::f64, &p.train.peak_lr},
      {"train.weight_decay", FieldKind::f64, &p.train.weight_decay},
      {"train.beta1", FieldKind::f64, &p.train.beta1},
      {"train.beta2", FieldKind::f64, &p.train.beta2},
      {"train.eps", FieldKind::f64, &p.train.eps},
      {"train.batch_size", FieldKind::u64, &p.train.batch_size},
      {"train.stage2_batch_size", FieldKind::u64, &p.train.stage2_batch_size},
      {"train.warmup_steps", FieldKind::u64, &p.train.warmup_steps},
      {"train.nitc_steps", FieldKind::u64, &p.train.nitc_steps},
      {"train.post_refresh_steps", FieldKind::u64,
       &p.train.post_refresh_steps},
      {"train.stage2_steps", FieldKind::u64, &p.train.stage2_steps},
      {"train.lambda", FieldKind::f64, &p.train.lambda},
      {"train.omega_max", FieldKind::f64, &p.train.omega_max},
      {"train.tau", FieldKind::f64, &p.train.tau},
      {"train.seed", FieldKind::u64, &p.train.seed},
      {"train.strict_itc_denominator", FieldKind::boolean,
       &p.train.strict_itc_denominator},
      {"train.reestimate_every", FieldKind::u64, &p.train.reestimate_every},
      {"train.max_grad_norm", FieldKind::f64, &p.train.max_grad_norm},
      {"train.num_concepts", FieldKind::u64, &p.train.num_concepts},
      {"train.max_caption_len", FieldKind::u64, &p.train.max_caption_len},
      {"train.eval_candidates", FieldKind::u64, &p.train.eval_candidates},
      {"train.pooling", FieldKind::pooling, &p.train.pooling},
      {"corpus.min_count", FieldKind::i64, &cfg.corpus_min_count},
      {"variant", FieldKind::variant_tag, &cfg.variant},
  };
}

[[noreturn]] void bad_value(const std::string& key) {
  throw std::invalid_argument("config: bad value for " + key);
}

std::string pooling_name(QueryPooling p) {
  return p == QueryPooling::max_query ? "max_query" : "mean_query";
}

QueryPooling pooling_from(const std::string& s, const std::string& key) {
  if (s == "max_query") return QueryPooling::max_query;
  if (s == "mean_query") return QueryPooling::mean_query;
  bad_value(key);
}

Variant variant_from(const std::string& s, const std::string& key) {
  if (s == "full") return Variant::full;
  if (s == "no_noise_adaptation") return Variant::no_noise_adaptation;
  if (s == "no_concepts") return Variant::no_concepts;
  bad_value(key);
}

void set_from_json(const Field& f, const json& v) {
  switch (f.kind) {
    case FieldKind::u64:
      if (!v.is_number_unsigned()) bad_value(f.key);
      *static_cast<std::uint64_t*>(f.ptr) = v.get<std::uint64_t>();
      return;
    case FieldKind::i64:
      if (!v.is_number_integer()) bad_value(f.key);
      *static_cast<std::int64_t*>(f.ptr) = v.get<std::int64_t>();
      return;
    case FieldKind::f64:
      if (!v.is_number()) bad_value(f.key);
      *static_cast<double*>(f.ptr) = v.get<double>();
      return;
    case FieldKind::boolean:
      if (!v.is_boolean()) bad_value(f.key);
      *static_cast<bool*>(f.ptr) = v.get<bool>();
      return;
    case FieldKind::pooling:
      if (!v.is_string()) bad_value(f.key);
      *static_cast<QueryPooling*>(f.ptr) =
          pooling_from(v.get<std::string>(), f.key);
      return;
    case FieldKind::variant_tag:
      if (!v.is_string()) bad_value(f.key);
      *static_cast<Variant*>(f.ptr) =
          variant_from(v.get<std::string>(), f.key);
      return;
  }
}

// Parses with the std::sto* family but reports every failure (garbage,
// trailing text, overflow) as the uniform "config: bad value" error.
template <typename T, typename Parse>
T parse_or_reject(const std::string& v, const std::string& key,
                  Parse parse) {
  std::size_t used = 0;
  T out{};
  try {
    out = parse(v, &used);
  } catch (const std::exception&) {
    bad_value(key);
  }
  if (used != v.size()) bad_value(key);
  return out;
}

void set_from_string(const Field& f, const std::string& v) {
  switch (f.kind) {
    case FieldKind::u64:
      if (!v.empty() && v[0] == '-') bad_value(f.key);
      *static_cast<std::uint64_t*>(f.ptr) = parse_or_reject<std::uint64_t>(
          v, f.key,
          [](const std::string& s, std::size_t* u) { return std::stoull(s, u); });
      return;
    case FieldKind::i64:
      *static_cast<std::int64_t*>(f.ptr) = parse_or_reject<std::int64_t>(
          v, f.key,
          [](const std::string& s, std::size_t* u) { return std::stoll(s, u); });
      return;
    case FieldKind::f64:
      *static_cast<double*>(f.ptr) = parse_or_reject<double>(
          v, f.key,
          [](const std::string& s, std::size_t* u) { return std::stod(s, u); });
      return;
    case FieldKind::boolean:
      if (v == "true" || v == "1") {
        *static_cast<bool*>(f.ptr) = true;
      } else if (v == "false" || v == "0") {
        *static_cast<bool*>(f.ptr) = false;
      } else {
        bad_value(f.key);
      }
      return;
    case FieldKind::pooling:
      *static_cast<QueryPooling*>(f.ptr) = pooling_from(v, f.key);
      return;
    case FieldKind::variant_tag:
      *static_cast<Variant*>(f.ptr) = variant_from(v, f.key);
      return;
  }
}

ordered_json field_to_json(const Field& f) {
  switch (f.kind) {
    case FieldKind::u64:
      return *static_cast<const std::uint64_t*>(f.ptr);
    case FieldKind::i64:
      return *static_cast<const std::int64_t*>(f.ptr);
    case FieldKind::f64:
      return *static_cast<const double*>(f.ptr);
    case FieldKind::boolean:
      return *static_cast<const bool*>(f.ptr);
    case FieldKind::pooling:
      return pooling_name(*static_cast<const QueryPooling*>(f.ptr));
    case FieldKind::variant_tag:
      return variant_name(*static_cast<const Variant*>(f.ptr));
  }
  bad_value(f.key);  // unreachable
}

ordered_json to_json_doc(const RunConfig& cfg) {
  RunConfig& mut = const_cast<RunConfig&>(cfg);  // registry wants one form
  ordered_json out = ordered_json::object();
  for (const Field& f : registry(mut)) {
    const std::string key = f.key;
    const std::size_t dot = key.find('.');
    if (dot == std::string::npos) {
      out[key] = field_to_json(f);
    } else {
      out[key.substr(0, dot)][key.substr(dot + 1)] = field_to_json(f);
    }
  }
  return out;
}

RunConfig from_json_doc(const json& j) {
  RunConfig cfg;
  if (!j.is_object()) throw std::invalid_argument("config: not an object");
  const std::vector<Field> fields = registry(cfg);
  auto find = [&fields](const std::string& key) -> const Field* {
    for (const Field& f : fields) {
      if (key == f.key) return &f;
    }
    return nullptr;
  };
  for (const auto& [section, value] : j.items()) {
    if (const Field* f = find(section)) {
      set_from_json(*f, value);
      continue;
    }
    if (!value.is_object()) {
      throw std::invalid_argument("config: unknown key " + section);
    }
    for (const auto& [name, v] : value.items()) {
      const std::string dotted = section + "." + name;
      const Field* f = find(dotted);
      if (f == nullptr) {
        throw std::invalid_argument("config: unknown key " + dotted);
      }
      set_from_json(*f, v);
    }
  }
  return cfg;
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) {
  return to_json_doc(cfg).dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: cannot parse: ") +
                                e.what());
  }
  return from_json_doc(j);
}

void apply_override(RunConfig& cfg, const std::string& key,
                    const std::string& value) {
  for (const Field& f : registry(cfg)) {
    if (key == f.key) {
      set_from_string(f, value);
      return;
    }
  }
  throw std::invalid_argument("config: unknown key " + key);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return run_config_from_json(text.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string(e.what()) + " (" + path + ")");
  }
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write " + path);
  out << run_config_to_json(cfg);
  if (!out) throw std::runtime_error("config: cannot write " + path);
}

}  // namespace nevlab
