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

#include "nevlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

namespace nevlab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'N', 'V', 'L', 'P'};
}  // namespace

CheckpointWriter::CheckpointWriter(const std::string& path)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  if (!out_) throw std::runtime_error("checkpoint: cannot open " + path);
}

void CheckpointWriter::bytes(const void* p, std::size_t n) {
  out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void CheckpointWriter::u8(std::uint8_t v) { bytes(&v, 1); }
void CheckpointWriter::u32(std::uint32_t v) { bytes(&v, 4); }
void CheckpointWriter::u64(std::uint64_t v) { bytes(&v, 8); }
void CheckpointWriter::f64(double v) { bytes(&v, 8); }

void CheckpointWriter::str(const std::string& s) {
  u64(s.size());
  bytes(s.data(), s.size());
}

void CheckpointWriter::doubles(const std::vector<double>& v) {
  u64(v.size());
  bytes(v.data(), v.size() * sizeof(double));
}

void CheckpointWriter::ints(const std::vector<int>& v) {
  u64(v.size());
  for (int x : v) {
    auto w = static_cast<std::int64_t>(x);
    bytes(&w, 8);
  }
}

void CheckpointWriter::close() {
  out_.flush();
  if (!out_) throw std::runtime_error("checkpoint: write failed for " + path_);
  out_.close();
}

CheckpointReader::CheckpointReader(const std::string& path)
    : in_(path, std::ios::binary) {
  if (!in_) throw std::runtime_error("checkpoint: cannot open " + path);
}

void CheckpointReader::bytes(void* p, std::size_t n) {
  in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw std::runtime_error("checkpoint: truncated file");
  }
}

std::uint8_t CheckpointReader::u8() {
  std::uint8_t v = 0;
  bytes(&v, 1);
  return v;
}

std::uint32_t CheckpointReader::u32() {
  std::uint32_t v = 0;
  bytes(&v, 4);
  return v;
}

std::uint64_t CheckpointReader::u64() {
  std::uint64_t v = 0;
  bytes(&v, 8);
  return v;
}

double CheckpointReader::f64() {
  double v = 0;
  bytes(&v, 8);
  return v;
}

std::string CheckpointReader::str() {
  const std::uint64_t n = u64();
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

std::vector<double> CheckpointReader::doubles() {
  const std::uint64_t n = u64();
  std::vector<double> v(n);
  bytes(v.data(), n * sizeof(double));
  return v;
}

std::vector<int> CheckpointReader::ints() {
  const std::uint64_t n = u64();
  std::vector<int> v(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::int64_t w = 0;
    bytes(&w, 8);
    v[i] = static_cast<int>(w);
  }
  return v;
}

void write_checkpoint_header(CheckpointWriter& w, std::uint8_t kind) {
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.u8(kind);
}

void read_checkpoint_header(CheckpointReader& r, std::uint8_t kind) {
  for (char c : kMagic) {
    if (r.u8() != static_cast<std::uint8_t>(c)) {
      throw std::runtime_error("checkpoint: bad magic");
    }
  }
  if (r.u32() != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version");
  }
  if (r.u8() != kind) {
    throw std::runtime_error("checkpoint: wrong checkpoint kind");
  }
}

void write_named_params(CheckpointWriter& w,
                        const std::vector<std::pair<std::string, Tensor>>& p) {
  w.u64(p.size());
  for (const auto& [name, t] : p) {
    w.str(name);
    w.u64(t.rows());
    w.u64(t.cols());
    w.u8(t.requires_grad() ? 1 : 0);
    w.doubles(t.data());
  }
}

void read_named_params(CheckpointReader& r,
                       const std::vector<std::pair<std::string, Tensor>>& p) {
  if (r.u64() != p.size()) {
    throw std::runtime_error("checkpoint: parameter mismatch");
  }
  for (const auto& [name, param] : p) {
    Tensor t = param;  // shared handle: copies alias the same storage
    if (r.str() != name || r.u64() != t.rows() || r.u64() != t.cols()) {
      throw std::runtime_error("checkpoint: parameter mismatch");
    }
    r.u8();  // requires_grad flag is informational; shape/name gate loading
    const std::vector<double> vals = r.doubles();
    std::copy(vals.begin(), vals.end(), t.data().begin());
  }
}

}  // namespace nevlab
