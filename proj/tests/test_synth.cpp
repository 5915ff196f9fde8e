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

#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "nevlab/synth.hpp"
#include "nevlab/vocab.hpp"

using namespace nevlab;

namespace {

std::string temp_path(const char* name) {
  return std::string("synth_test_") + name + ".jsonl";
}

}  // namespace

TEST_CASE("clean world: captions equal true objects and features are sums") {
  WorldConfig cfg;
  cfg.num_objects = 8;
  cfg.objects_per_image = 3;
  cfg.noise_rate = 0.0;
  cfg.drop_rate = 0.0;
  cfg.feature_noise_sigma = 0.0;
  cfg.dataset_size = 40;
  cfg.seed = 3;
  auto samples = generate_dataset(cfg);
  REQUIRE(samples.size() == 40);
  Vocab vocab = Vocab::build(8);
  for (const PairedSample& s : samples) {
    CHECK_FALSE(s.is_noisy);
    CHECK(s.dropped.empty());
    CHECK(s.caption == s.true_objects);
    CHECK(std::is_sorted(s.caption.begin(), s.caption.end()));
    CHECK(s.caption.size() == 3);
    // Features are exactly the basis sum with sigma = 0.
    double total = 0.0;
    for (double f : s.features) {
      CHECK((f == 0.0 || f == 1.0));
      total += f;
    }
    CHECK(total == 3.0);
    for (int tok : s.true_objects) {
      const std::size_t obj = static_cast<std::size_t>(tok - Vocab::kNumSpecials);
      CHECK(s.features[obj] == 1.0);
    }
  }
}

TEST_CASE("full swap: every caption is noisy and differs from the original") {
  WorldConfig cfg;
  cfg.num_objects = 10;
  cfg.objects_per_image = 2;
  cfg.noise_rate = 1.0;
  cfg.drop_rate = 0.0;
  cfg.feature_noise_sigma = 0.0;
  cfg.dataset_size = 12;
  cfg.seed = 5;
  auto noisy = generate_dataset(cfg);

  WorldConfig clean_cfg = cfg;
  clean_cfg.noise_rate = 0.0;
  auto clean = generate_dataset(clean_cfg);  // same stream until the swap

  REQUIRE(noisy.size() == clean.size());
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    CHECK(noisy[i].is_noisy);
    CHECK(noisy[i].caption != clean[i].caption);
  }
}

TEST_CASE("noisy count is exactly the floored fraction") {
  WorldConfig cfg;
  cfg.num_objects = 12;
  cfg.objects_per_image = 3;
  cfg.noise_rate = 0.3;
  cfg.drop_rate = 0.0;
  cfg.dataset_size = 1000;
  cfg.seed = 9;
  auto samples = generate_dataset(cfg);
  std::size_t noisy = 0;
  for (const auto& s : samples) noisy += s.is_noisy ? 1 : 0;
  CHECK(noisy == 300);

  cfg.dataset_size = 400;
  auto smaller = generate_dataset(cfg);
  noisy = 0;
  for (const auto& s : smaller) noisy += s.is_noisy ? 1 : 0;
  CHECK(noisy == 120);
}

TEST_CASE("generation is a function of the seed alone") {
  WorldConfig cfg;
  cfg.num_objects = 9;
  cfg.objects_per_image = 3;
  cfg.dataset_size = 50;
  cfg.noise_rate = 0.2;
  cfg.seed = 21;
  auto a = generate_dataset(cfg);
  auto b = generate_dataset(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].features == b[i].features);
    CHECK(a[i].caption == b[i].caption);
    CHECK(a[i].is_noisy == b[i].is_noisy);
  }
  cfg.seed = 22;
  auto c = generate_dataset(cfg);
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i)
    same = same && a[i].features == c[i].features;
  CHECK_FALSE(same);
}

TEST_CASE("raising the drop rate never lengthens a caption") {
  WorldConfig lo;
  lo.num_objects = 10;
  lo.objects_per_image = 4;
  lo.noise_rate = 0.0;
  lo.drop_rate = 0.1;
  lo.dataset_size = 200;
  lo.seed = 31;
  WorldConfig hi = lo;
  hi.drop_rate = 0.6;
  auto a = generate_dataset(lo);
  auto b = generate_dataset(hi);
  double mean_a = 0.0, mean_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(b[i].caption.size() <= a[i].caption.size());
    mean_a += static_cast<double>(a[i].caption.size());
    mean_b += static_cast<double>(b[i].caption.size());
  }
  CHECK(mean_b < mean_a);
}

TEST_CASE("captions never go empty even under heavy dropping") {
  WorldConfig cfg;
  cfg.num_objects = 6;
  cfg.objects_per_image = 3;
  cfg.noise_rate = 0.0;
  cfg.drop_rate = 0.9;
  cfg.dataset_size = 300;
  cfg.seed = 7;
  auto samples = generate_dataset(cfg);
  for (const auto& s : samples) {
    CHECK(!s.caption.empty());
    CHECK(s.caption.size() + s.dropped.size() == 3);
  }
}

TEST_CASE("noisy samples keep their own image ground truth") {
  WorldConfig cfg;
  cfg.num_objects = 10;
  cfg.objects_per_image = 3;
  cfg.noise_rate = 0.5;
  cfg.drop_rate = 0.0;
  cfg.feature_noise_sigma = 0.0;
  cfg.dataset_size = 30;
  cfg.seed = 13;
  auto samples = generate_dataset(cfg);
  for (const auto& s : samples) {
    // true_objects always matches the features, noisy or not.
    for (int tok : s.true_objects) {
      const std::size_t obj = static_cast<std::size_t>(tok - Vocab::kNumSpecials);
      CHECK(s.features[obj] == 1.0);
    }
    if (s.is_noisy) CHECK(s.caption != s.true_objects);
  }
}

TEST_CASE("invalid configurations are rejected") {
  WorldConfig cfg;
  cfg.num_objects = 4;
  cfg.objects_per_image = 5;  // more objects per image than exist
  CHECK_THROWS_AS(generate_dataset(cfg), std::invalid_argument);

  WorldConfig neg;
  neg.noise_rate = -0.1;
  CHECK_THROWS_AS(generate_dataset(neg), std::invalid_argument);

  WorldConfig one;
  one.num_objects = 4;
  one.objects_per_image = 2;
  one.dataset_size = 4;
  one.noise_rate = 0.3;  // floor(1.2) = 1: a single sample cannot swap
  CHECK_THROWS_AS(generate_dataset(one), std::invalid_argument);

  WorldConfig same;
  same.num_objects = 1;
  same.objects_per_image = 1;
  same.dataset_size = 10;
  same.noise_rate = 1.0;  // every caption identical: no rotation works
  same.drop_rate = 0.0;
  CHECK_THROWS_AS(generate_dataset(same), std::invalid_argument);
}

TEST_CASE("dataset round-trips losslessly through JSONL") {
  WorldConfig cfg;
  cfg.num_objects = 7;
  cfg.objects_per_image = 2;
  cfg.noise_rate = 0.25;
  cfg.drop_rate = 0.3;
  cfg.dataset_size = 64;
  cfg.seed = 17;
  auto samples = generate_dataset(cfg);
  const std::string path = temp_path("roundtrip");
  save_dataset(samples, path);
  auto back = load_dataset(path);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].id == samples[i].id);
    CHECK(back[i].features == samples[i].features);  // bitwise
    CHECK(back[i].caption == samples[i].caption);
    CHECK(back[i].true_objects == samples[i].true_objects);
    CHECK(back[i].is_noisy == samples[i].is_noisy);
    CHECK(back[i].dropped == samples[i].dropped);
  }
  std::remove(path.c_str());
}

TEST_CASE("malformed dataset lines are reported with their line number") {
  const std::string path = temp_path("malformed");
  {
    std::ofstream out(path);
    out << R"({"id":0,"features":[1.0],"caption":[7],"true_objects":[7],)"
        << R"("is_noisy":false,"dropped":[]})" << "\n";
    out << "not json at all\n";
  }
  try {
    load_dataset(path);
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::remove(path.c_str());

  const std::string path2 = temp_path("truncated");
  {
    std::ofstream out(path2);
    out << R"({"id":0,"features":[1.0],"caption":[7],"true_objects":[7],)"
        << R"("is_noisy":false,"dropped":[]})" << "\n";
    out << R"({"id":1,"features":[1.0],"cap)";  // cut mid-record
  }
  try {
    load_dataset(path2);
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::remove(path2.c_str());

  const std::string path3 = temp_path("missing_field");
  {
    std::ofstream out(path3);
    out << R"({"id":0,"features":[1.0]})" << "\n";
  }
  CHECK_THROWS_AS(load_dataset(path3), std::runtime_error);
  std::remove(path3.c_str());
}

TEST_CASE("ten thousand samples round-trip inside the time budget") {
  WorldConfig cfg;
  cfg.num_objects = 24;
  cfg.objects_per_image = 3;
  cfg.noise_rate = 0.3;
  cfg.dataset_size = 10000;
  cfg.seed = 2;
  const auto t0 = std::chrono::steady_clock::now();
  auto samples = generate_dataset(cfg);
  const std::string path = temp_path("bulk");
  save_dataset(samples, path);
  auto back = load_dataset(path);
  const auto t1 = std::chrono::steady_clock::now();
  CHECK(back.size() == 10000);
  CHECK(back[9999].features == samples[9999].features);
  const double secs = std::chrono::duration<double>(t1 - t0).count();
  CHECK(secs < 5.0);
  std::remove(path.c_str());
}
