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

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nevlab {

// Parameters of the synthetic paired-data world.
struct WorldConfig {
  std::size_t num_objects = 24;       // M: distinct object types
  std::size_t objects_per_image = 3;  // m: objects drawn per image
  std::size_t feature_dim = 0;        // 0 means num_objects
  double noise_rate = 0.3;            // rho: fraction of swapped captions
  double drop_rate = 0.2;             // delta: per-object omission chance
  double feature_noise_sigma = 0.05;
  std::size_t dataset_size = 400;     // N
  std::uint64_t seed = 1;

  std::size_t raw_dim() const {
    return feature_dim == 0 ? num_objects : feature_dim;
  }
};

// One image-caption pair with full ground truth attached.
struct PairedSample {
  int id = 0;
  std::vector<double> features;   // raw_dim, basis sum plus noise
  std::vector<int> caption;       // vocab token ids, ascending
  std::vector<int> true_objects;  // vocab token ids of the drawn objects
  bool is_noisy = false;          // caption swapped in from another sample
  std::vector<int> dropped;       // vocab ids omitted from the original
};

// Draws the dataset: m distinct objects per image, features as the sum
// of their basis vectors plus Gaussian noise, captions as the surviving
// object tokens in ascending id order (at least one always survives),
// then exactly floor(rho*N) captions swapped by a cyclic shift chosen so
// every swapped caption differs from the original.
std::vector<PairedSample> generate_dataset(const WorldConfig& cfg);

// JSONL persistence; loading reports malformed input with its line
// number. The float round trip is lossless.
void save_dataset(const std::vector<PairedSample>& samples,
                  const std::string& path);
std::vector<PairedSample> load_dataset(const std::string& path);

}  // namespace nevlab
