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

#include <cstdio>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace nevlab {

// Whitespace token vocabulary: three specials, four function words, then
// one noun per synthetic object. Object nouns are zero-padded so their
// lexicographic order equals their id order.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kDec = 2;
  static constexpr int kNumSpecials = 7;  // specials + function words

  static Vocab build(std::size_t num_objects) {
    Vocab v;
    v.tokens_ = {"[PAD]", "[CLS]", "[DEC]", "a", "and", "of", "with"};
    for (std::size_t o = 0; o < num_objects; ++o) {
      v.tokens_.push_back(object_noun(o));
    }
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      v.index_[v.tokens_[i]] = static_cast<int>(i);
    }
    return v;
  }

  static std::string object_noun(std::size_t object) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "obj%03zu", object);
    return buf;
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t num_objects() const { return tokens_.size() - kNumSpecials; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) {
      throw std::invalid_argument("unknown token: " + token);
    }
    return it->second;
  }

  bool contains(const std::string& token) const {
    return index_.count(token) != 0;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw std::invalid_argument("token id out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  int object_id(std::size_t object) const {
    if (object >= num_objects()) {
      throw std::invalid_argument("object index out of range");
    }
    return static_cast<int>(kNumSpecials + object);
  }

  bool is_object_id(int id) const {
    return id >= kNumSpecials && static_cast<std::size_t>(id) < tokens_.size();
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      while (pos < text.size() && text[pos] == ' ') ++pos;
      std::size_t end = pos;
      while (end < text.size() && text[end] != ' ') ++end;
      if (end > pos) out.push_back(id(text.substr(pos, end - pos)));
      pos = end;
    }
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace nevlab
