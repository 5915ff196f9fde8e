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

#include "nevlab/train.hpp"

namespace nevlab {

// One run's complete configuration: the pipeline settings plus the two
// knobs that only the driver layer cares about (corpus pruning and the
// ablation variant).  A saved snapshot of this struct is sufficient to
// reproduce the run.
struct RunConfig {
  PipelineConfig pipeline;
  std::int64_t corpus_min_count = 5;
  Variant variant = Variant::full;
};

// JSON uses one object per section ("world", "encoder", "bridge",
// "decoder", "train", "corpus") plus the top-level "variant" string.  The
// bridge's enc_dim and vocab_size are derived from the encoder and world
// settings and are deliberately absent from the schema.  Output is a
// canonical two-space-indented document ending in a newline.
std::string run_config_to_json(const RunConfig& cfg);

// Missing keys keep their defaults; unknown keys, ill-typed values, and
// unparsable input throw std::invalid_argument with a "config:" prefix.
RunConfig run_config_from_json(const std::string& text);

// Applies one dotted-key override, e.g. ("train.seed", "7") or
// ("variant", "no_concepts").  Unknown keys and unparsable values throw
// std::invalid_argument.
void apply_override(RunConfig& cfg, const std::string& key,
                    const std::string& value);

// File round-trip.  load throws std::invalid_argument on a missing or
// unparsable file; save throws std::runtime_error when the file cannot
// be written.
RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);

}  // namespace nevlab
