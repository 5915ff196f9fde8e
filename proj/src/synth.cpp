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

#include "nevlab/synth.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "nevlab/rng.hpp"
#include "nevlab/vocab.hpp"

namespace nevlab {

namespace {

using nlohmann::json;

void validate(const WorldConfig& cfg) {
  if (cfg.num_objects == 0) {
    throw std::invalid_argument("invalid config: num_objects must be > 0");
  }
  if (cfg.objects_per_image == 0 ||
      cfg.objects_per_image > cfg.num_objects) {
    throw std::invalid_argument(
        "invalid config: objects_per_image must be in [1, num_objects]");
  }
  if (cfg.raw_dim() != cfg.num_objects) {
    // The retrieval stub's object basis lives in R^M; other widths have
    // no basis assignment.
    throw std::invalid_argument(
        "invalid config: feature_dim must equal num_objects (or 0)");
  }
  if (cfg.noise_rate < 0.0 || cfg.noise_rate > 1.0) {
    throw std::invalid_argument("invalid config: noise_rate outside [0, 1]");
  }
  if (cfg.drop_rate < 0.0 || cfg.drop_rate >= 1.0) {
    throw std::invalid_argument("invalid config: drop_rate outside [0, 1)");
  }
  if (cfg.feature_noise_sigma < 0.0) {
    throw std::invalid_argument("invalid config: negative feature noise");
  }
  if (cfg.dataset_size == 0) {
    throw std::invalid_argument("invalid config: dataset_size must be > 0");
  }
  if (cfg.noise_rate > 0.0 && cfg.dataset_size < 2) {
    throw std::invalid_argument(
        "invalid config: dataset_size must be >= 2 when noise_rate > 0");
  }
}

}  // namespace

std::vector<PairedSample> generate_dataset(const WorldConfig& cfg) {
  validate(cfg);
  const std::size_t n = cfg.dataset_size;
  const std::size_t m = cfg.objects_per_image;
  const std::size_t raw_dim = cfg.raw_dim();
  Vocab vocab = Vocab::build(cfg.num_objects);
  Rng rng(cfg.seed);

  std::vector<PairedSample> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    PairedSample& s = samples[i];
    s.id = static_cast<int>(i);

    std::vector<std::size_t> objects =
        rng.sample_without_replacement(cfg.num_objects, m);
    std::sort(objects.begin(), objects.end());

    s.features.assign(raw_dim, 0.0);
    for (std::size_t o : objects) s.features[o] += 1.0;
    if (cfg.feature_noise_sigma > 0.0) {
      for (double& f : s.features) f += cfg.feature_noise_sigma * rng.normal();
    }

    for (std::size_t o : objects) {
      s.true_objects.push_back(vocab.object_id(o));
    }

    // Independent omissions, but captions never go empty: if every
    // object drops, the lowest-id one is kept after all.
    std::vector<int> survivors;
    for (int tok : s.true_objects) {
      if (rng.uniform() < cfg.drop_rate) s.dropped.push_back(tok);
      else survivors.push_back(tok);
    }
    if (survivors.empty()) {
      survivors.push_back(s.dropped.front());
      s.dropped.erase(s.dropped.begin());
    }
    s.caption = survivors;  // ascending because true_objects is
  }

  // floor(rho * N) with a guard against binary representation of
  // decimal rates (0.3 * 400 evaluates just below 120).
  const std::size_t num_noisy = static_cast<std::size_t>(
      cfg.noise_rate * static_cast<double>(n) + 1e-9);
  if (num_noisy > 0) {
    if (num_noisy < 2) {
      throw std::invalid_argument(
          "cannot plant noise: floor(noise_rate * N) must be 0 or >= 2");
    }
    std::vector<std::size_t> sel =
        rng.sample_without_replacement(n, num_noisy);
    std::vector<std::vector<int>> originals(num_noisy);
    for (std::size_t k = 0; k < num_noisy; ++k) {
      originals[k] = samples[sel[k]].caption;
    }
    // Smallest rotation that moves every caption to a different one.
    std::size_t shift = 0;
    for (std::size_t g = 1; g < num_noisy && shift == 0; ++g) {
      bool ok = true;
      for (std::size_t k = 0; k < num_noisy && ok; ++k) {
        ok = originals[(k + g) % num_noisy] != originals[k];
      }
      if (ok) shift = g;
    }
    if (shift == 0) {
      throw std::invalid_argument(
          "cannot plant noise: no caption rotation leaves every selected "
          "sample changed");
    }
    for (std::size_t k = 0; k < num_noisy; ++k) {
      samples[sel[k]].caption = originals[(k + shift) % num_noisy];
      samples[sel[k]].is_noisy = true;
    }
  }
  return samples;
}

void save_dataset(const std::vector<PairedSample>& samples,
                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const PairedSample& s : samples) {
    json j;
    j["id"] = s.id;
    j["features"] = s.features;
    j["caption"] = s.caption;
    j["true_objects"] = s.true_objects;
    j["is_noisy"] = s.is_noisy;
    j["dropped"] = s.dropped;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<PairedSample> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<PairedSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      PairedSample s;
      s.id = j.at("id").get<int>();
      s.features = j.at("features").get<std::vector<double>>();
      s.caption = j.at("caption").get<std::vector<int>>();
      s.true_objects = j.at("true_objects").get<std::vector<int>>();
      s.is_noisy = j.at("is_noisy").get<bool>();
      s.dropped = j.at("dropped").get<std::vector<int>>();
      samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw std::runtime_error("malformed dataset line " +
                               std::to_string(line_no) + ": " + e.what());
    }
  }
  return samples;
}

}  // namespace nevlab
