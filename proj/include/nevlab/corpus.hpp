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
#include <map>
#include <string>
#include <vector>

#include "nevlab/frozen.hpp"
#include "nevlab/synth.hpp"
#include "nevlab/tensor.hpp"

namespace nevlab {

// Nouns that occur often enough to count as visual concepts, sorted
// lexicographically, each with its occurrence count.
struct ConceptCorpus {
  std::vector<std::string> nouns;
  std::vector<std::int64_t> counts;
  std::int64_t min_count = 5;

  std::size_t size() const { return nouns.size(); }
};

// Top-k retrieval result for one image.
struct ConceptRetrieval {
  int image_id = 0;
  std::vector<std::string> concepts;  // best first
  std::vector<double> scores;         // non-increasing
};

// Keeps exactly the nouns with count >= min_count. Throws "empty corpus"
// when nothing survives; rejects non-positive counts.
ConceptCorpus build_corpus(const std::map<std::string, std::int64_t>& counts,
                           std::int64_t min_count = 5);

// Tallies the object nouns of every caption in a dataset and builds the
// corpus from those counts. Non-noun tokens are ignored.
ConceptCorpus corpus_from_dataset(const std::vector<PairedSample>& samples,
                                  std::size_t num_objects,
                                  std::int64_t min_count = 5);

// score[n] = <vp_embed(image) . tp_embed(prompt, noun n)> for every
// corpus noun, in corpus order.
std::vector<double> concept_similarity(const Tensor& raw_features,
                                       const ConceptCorpus& corpus,
                                       const RetrievalVlmStub& stub,
                                       const std::string& prompt_template =
                                           "a photo of a {noun}");

// Top-k nouns by similarity; ties resolved toward the lexicographically
// smaller noun. Returns the whole corpus when it has fewer than k nouns.
ConceptRetrieval retrieve_concepts(int image_id, const Tensor& raw_features,
                                   const ConceptCorpus& corpus,
                                   const RetrievalVlmStub& stub,
                                   std::size_t k = 3);

// Corpus file: one "noun<TAB>count" line per noun.
void save_corpus(const ConceptCorpus& corpus, const std::string& path);
ConceptCorpus load_corpus(const std::string& path, std::int64_t min_count = 5);

// Retrieval cache: JSONL {"image_id":..,"concepts":[..],"scores":[..]}.
void save_retrievals(const std::vector<ConceptRetrieval>& retrievals,
                     const std::string& path);
std::vector<ConceptRetrieval> load_retrievals(const std::string& path);

}  // namespace nevlab
