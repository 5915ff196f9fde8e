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
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "nevlab/tensor.hpp"

namespace nevlab {

// Little-endian binary checkpoint stream. Every file starts with the
// magic "NVLP" and a format version; training state written through
// these helpers round-trips bitwise.
class CheckpointWriter {
 public:
  explicit CheckpointWriter(const std::string& path);

  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void str(const std::string& s);
  void doubles(const std::vector<double>& v);
  void ints(const std::vector<int>& v);

  // Fails loudly if the OS swallowed a write.
  void close();

 private:
  void bytes(const void* p, std::size_t n);
  std::ofstream out_;
  std::string path_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::string& path);

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  std::vector<double> doubles();
  std::vector<int> ints();

 private:
  void bytes(void* p, std::size_t n);
  std::ifstream in_;
};

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint8_t kCheckpointStage1 = 1;
constexpr std::uint8_t kCheckpointStage2 = 2;

// Magic + version + kind.
void write_checkpoint_header(CheckpointWriter& w, std::uint8_t kind);
// Validates magic/version and that the file holds the expected kind.
void read_checkpoint_header(CheckpointReader& r, std::uint8_t kind);

// One entry per parameter: name, shape, frozen flag, raw values.
void write_named_params(CheckpointWriter& w,
                        const std::vector<std::pair<std::string, Tensor>>& p);
// Loads values into the given (already-shaped) parameters; any name or
// shape disagreement is an error.
void read_named_params(CheckpointReader& r,
                       const std::vector<std::pair<std::string, Tensor>>& p);

}  // namespace nevlab
