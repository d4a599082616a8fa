// Copyright 2026 The prefixchat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "prefixchat/tokenizer.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace prefixchat {

namespace {

constexpr std::string_view kHeader = "#prefixchat-vocab v1";
constexpr std::string_view kMergesSection = "#merges";
const char* const kSpecialNames[] = {"<pad>", "<bos>", "<eos>", "<unk>"};

std::vector<std::string> split_pieces(std::string_view text) {
  std::vector<std::string> pieces;
  std::string current;
  for (char c : text) {
    current.push_back(c);
    if (c == ' ') {
      pieces.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) pieces.push_back(std::move(current));
  return pieces;
}

std::string escape(std::string_view token) {
  std::string out;
  for (char c : token) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case ' ': out += "\\s"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      case '#': out += "\\#"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string unescape(std::string_view text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '\\') {
      out.push_back(text[i]);
      continue;
    }
    if (++i == text.size()) throw std::runtime_error("vocabulary: dangling escape");
    switch (text[i]) {
      case '\\': out.push_back('\\'); break;
      case 's': out.push_back(' '); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      case 't': out.push_back('\t'); break;
      case '#': out.push_back('#'); break;
      default: throw std::runtime_error("vocabulary: bad escape");
    }
  }
  return out;
}

// Merges every occurrence of (left, right) in place, scanning left to right.
void apply_merge(std::vector<std::string>& symbols, const std::string& left,
                 const std::string& right) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(left + right);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

}  // namespace

std::vector<std::string> utf8_symbols(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if ((lead & 0xE0) == 0xC0) len = 2;
    else if ((lead & 0xF0) == 0xE0) len = 3;
    else if ((lead & 0xF8) == 0xF0) len = 4;
    if (i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

Vocabulary::Vocabulary() : Vocabulary({}, {}) {}

Vocabulary::Vocabulary(std::vector<std::string> base_symbols, std::vector<Merge> merges)
    : merges_(std::move(merges)) {
  for (const char* name : kSpecialNames) tokens_.emplace_back(name);
  auto add = [&](const std::string& symbol) {
    if (index_.contains(symbol)) return;
    index_.emplace(symbol, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(symbol);
  };
  for (const auto& symbol : base_symbols) add(symbol);
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto& [left, right] = merges_[r];
    if (!index_.contains(left) || !index_.contains(right)) {
      throw std::invalid_argument("vocabulary: merge references unknown symbol");
    }
    merge_ranks_.emplace(merges_[r], static_cast<int>(r));
    add(left + right);
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("invalid id " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::lookup(std::string_view symbol) const {
  auto it = index_.find(std::string(symbol));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view symbol) const {
  return index_.contains(std::string(symbol));
}

int Vocabulary::merge_rank(const std::string& left, const std::string& right) const {
  auto it = merge_ranks_.find(Merge{left, right});
  return it == merge_ranks_.end() ? -1 : it->second;
}

std::string Vocabulary::serialize() const {
  std::ostringstream out;
  out << kHeader << '\n';
  for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) out << escape(tokens_[i]) << '\n';
  out << kMergesSection << '\n';
  for (const auto& [left, right] : merges_) out << escape(left) << ' ' << escape(right) << '\n';
  return out.str();
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw std::runtime_error("vocabulary: missing or unsupported version header");
  }
  std::vector<std::string> tokens;
  std::vector<Merge> merges;
  bool in_merges = false;
  while (std::getline(in, line)) {
    if (line == kMergesSection) {
      in_merges = true;
      continue;
    }
    if (!in_merges) {
      tokens.push_back(unescape(line));
      continue;
    }
    const auto space = line.find(' ');
    if (space == std::string::npos) throw std::runtime_error("vocabulary: malformed merge line");
    merges.emplace_back(unescape(line.substr(0, space)), unescape(line.substr(space + 1)));
  }
  if (!in_merges) throw std::runtime_error("vocabulary: missing #merges section");

  // The token section lists base symbols followed by merge products; the
  // constructor rebuilds the latter from the merge list.
  std::set<std::string> products;
  for (const auto& [l, r] : merges) products.insert(l + r);
  std::vector<std::string> base;
  std::size_t product_lines = 0;
  for (auto& token : tokens) {
    if (product_lines == 0 && !products.contains(token)) {
      base.push_back(std::move(token));
    } else {
      ++product_lines;
    }
  }
  Vocabulary vocab(std::move(base), std::move(merges));
  if (vocab.size() != tokens.size() + kNumSpecials) {
    throw std::runtime_error("vocabulary: token list inconsistent with merges");
  }
  return vocab;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary '" + path + "'");
  out << serialize();
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocabulary '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t target_size) {
  std::map<std::string, std::int64_t> piece_counts;
  for (const auto& text : corpus) {
    for (auto& piece : split_pieces(text)) ++piece_counts[piece];
  }
  if (piece_counts.empty()) throw std::invalid_argument("empty corpus");

  std::vector<std::vector<std::string>> words;
  std::vector<std::int64_t> counts;
  std::set<std::string> alphabet;
  for (const auto& [piece, count] : piece_counts) {
    words.push_back(utf8_symbols(piece));
    counts.push_back(count);
    alphabet.insert(words.back().begin(), words.back().end());
  }
  if (target_size < Vocabulary::kNumSpecials + alphabet.size() ||
      target_size <= Vocabulary::kNumSpecials) {
    throw std::invalid_argument("target_size " + std::to_string(target_size) +
                                " cannot hold the 4 specials and " +
                                std::to_string(alphabet.size()) + " base symbols");
  }

  std::vector<Vocabulary::Merge> merges;
  std::set<std::string> known(alphabet.begin(), alphabet.end());
  std::size_t size = Vocabulary::kNumSpecials + alphabet.size();
  while (size < target_size) {
    std::map<Vocabulary::Merge, std::int64_t> pairs;
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& symbols = words[w];
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) pairs[{symbols[i], symbols[i + 1]}] += counts[w];
    }
    const Vocabulary::Merge* best = nullptr;
    std::int64_t best_count = 1;
    for (const auto& [pair, count] : pairs) {
      if (count > best_count) {
        best = &pair;
        best_count = count;
      }
    }
    if (best == nullptr) break;
    const Vocabulary::Merge merge = *best;
    for (auto& symbols : words) apply_merge(symbols, merge.first, merge.second);
    merges.push_back(merge);
    if (known.insert(merge.first + merge.second).second) ++size;
  }
  return Vocabulary({alphabet.begin(), alphabet.end()}, std::move(merges));
}

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const auto& piece : split_pieces(text)) {
    auto symbols = utf8_symbols(piece);
    while (symbols.size() > 1) {
      int best_rank = -1;
      std::size_t best_at = 0;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        const int rank = vocab.merge_rank(symbols[i], symbols[i + 1]);
        if (rank >= 0 && (best_rank < 0 || rank < best_rank)) {
          best_rank = rank;
          best_at = i;
        }
      }
      if (best_rank < 0) break;
      const std::string left = symbols[best_at];
      const std::string right = symbols[best_at + 1];
      apply_merge(symbols, left, right);
    }
    for (const auto& symbol : symbols) ids.push_back(vocab.lookup(symbol));
  }
  return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& token = vocab.token(id);
    if (!Vocabulary::is_special(id)) out += token;
  }
  return out;
}

}  // namespace prefixchat
