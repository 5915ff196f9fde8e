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

#include "nevlab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "nevlab/vocab.hpp"

namespace nevlab {

namespace {

using nlohmann::json;

std::string apply_template(const std::string& tmpl, const std::string& noun) {
  std::string out = tmpl;
  const std::string key = "{noun}";
  std::size_t pos = 0;
  while ((pos = out.find(key, pos)) != std::string::npos) {
    out.replace(pos, key.size(), noun);
    pos += noun.size();
  }
  return out;
}

}  // namespace

ConceptCorpus build_corpus(const std::map<std::string, std::int64_t>& counts,
                           std::int64_t min_count) {
  ConceptCorpus corpus;
  corpus.min_count = min_count;
  for (const auto& [noun, count] : counts) {  // map iterates in lex order
    if (count <= 0) {
      throw std::invalid_argument("corpus counts must be positive");
    }
    if (count >= min_count) {
      corpus.nouns.push_back(noun);
      corpus.counts.push_back(count);
    }
  }
  if (corpus.nouns.empty()) {
    throw std::invalid_argument("empty corpus");
  }
  return corpus;
}

ConceptCorpus corpus_from_dataset(const std::vector<PairedSample>& samples,
                                  std::size_t num_objects,
                                  std::int64_t min_count) {
  Vocab vocab = Vocab::build(num_objects);
  std::map<std::string, std::int64_t> counts;
  for (const PairedSample& s : samples) {
    for (int tok : s.caption) {
      if (vocab.is_object_id(tok)) counts[vocab.token(tok)]++;
    }
  }
  return build_corpus(counts, min_count);
}

std::vector<double> concept_similarity(const Tensor& raw_features,
                                       const ConceptCorpus& corpus,
                                       const RetrievalVlmStub& stub,
                                       const std::string& prompt_template) {
  if (corpus.nouns.empty()) throw std::invalid_argument("empty corpus");
  Tensor v = stub.vp_embed(raw_features);
  std::vector<double> scores(corpus.nouns.size());
  for (std::size_t n = 0; n < corpus.nouns.size(); ++n) {
    Tensor t = stub.tp_embed(apply_template(prompt_template, corpus.nouns[n]),
                             corpus.nouns[n]);
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i)
      acc += v.data()[i] * t.data()[i];
    scores[n] = acc;
  }
  return scores;
}

ConceptRetrieval retrieve_concepts(int image_id, const Tensor& raw_features,
                                   const ConceptCorpus& corpus,
                                   const RetrievalVlmStub& stub,
                                   std::size_t k) {
  if (k == 0) throw std::invalid_argument("k must be >= 1");
  const std::vector<double> scores =
      concept_similarity(raw_features, corpus, stub);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  // Corpus order is lexicographic, so a stable sort on score leaves
  // ties in lexicographic order.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return scores[a] > scores[b];
                   });
  ConceptRetrieval out;
  out.image_id = image_id;
  const std::size_t take = std::min(k, order.size());
  for (std::size_t i = 0; i < take; ++i) {
    out.concepts.push_back(corpus.nouns[order[i]]);
    out.scores.push_back(scores[order[i]]);
  }
  return out;
}

void save_corpus(const ConceptCorpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t i = 0; i < corpus.nouns.size(); ++i) {
    out << corpus.nouns[i] << '\t' << corpus.counts[i] << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

ConceptCorpus load_corpus(const std::string& path, std::int64_t min_count) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::map<std::string, std::int64_t> counts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw std::runtime_error("malformed corpus line " +
                               std::to_string(line_no) +
                               ": expected noun<TAB>count");
    }
    const std::string noun = line.substr(0, tab);
    std::int64_t count = 0;
    try {
      std::size_t used = 0;
      count = std::stoll(line.substr(tab + 1), &used);
      if (used != line.size() - tab - 1) throw std::invalid_argument("trail");
    } catch (const std::exception&) {
      throw std::runtime_error("malformed corpus line " +
                               std::to_string(line_no) + ": bad count");
    }
    if (counts.count(noun)) {
      throw std::runtime_error("malformed corpus line " +
                               std::to_string(line_no) + ": duplicate noun");
    }
    counts[noun] = count;
  }
  return build_corpus(counts, min_count);
}

void save_retrievals(const std::vector<ConceptRetrieval>& retrievals,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const ConceptRetrieval& r : retrievals) {
    json j;
    j["image_id"] = r.image_id;
    j["concepts"] = r.concepts;
    j["scores"] = r.scores;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<ConceptRetrieval> load_retrievals(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<ConceptRetrieval> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      ConceptRetrieval r;
      r.image_id = j.at("image_id").get<int>();
      r.concepts = j.at("concepts").get<std::vector<std::string>>();
      r.scores = j.at("scores").get<std::vector<double>>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw std::runtime_error("malformed retrieval line " +
                               std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace nevlab
