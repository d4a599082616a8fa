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

#include "prefixchat/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace prefixchat {

namespace {

using nlohmann::json;

bool child_order(const CommentNode& a, const CommentNode& b) {
  if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
  return a.comment_id < b.comment_id;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

bool is_url(std::string_view word) {
  return word.starts_with("http://") || word.starts_with("https://") ||
         word.starts_with("www.");
}

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string strip_urls(const std::string& text) {
  std::string out;
  bool changed = false;
  for (const auto& word : split_words(text)) {
    if (is_url(word)) {
      changed = true;
      continue;
    }
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return changed ? out : text;
}

double non_text_ratio(std::string_view text) {
  if (text.empty()) return 0.0;
  std::size_t other = 0;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    // Multi-byte UTF-8 is counted as text.
    if (u < 0x80 && !std::isalnum(u) && !std::isspace(u)) ++other;
  }
  return static_cast<double>(other) / static_cast<double>(text.size());
}

}  // namespace

const std::vector<CommentNode>& MessageTree::children_of(const std::string& comment_id) const {
  static const std::vector<CommentNode> kNone;
  auto it = children.find(comment_id);
  return it == children.end() ? kNone : it->second;
}

std::size_t MessageTree::node_count() const {
  std::size_t count = 1;
  for (const auto& [id, kids] : children) count += kids.size();
  return count;
}

std::size_t MessageTree::depth() const {
  std::function<std::size_t(const CommentNode&)> walk = [&](const CommentNode& node) {
    std::size_t best = 0;
    for (const auto& child : children_of(node.comment_id)) best = std::max(best, 1 + walk(child));
    return best;
  };
  return walk(root);
}

TreeBuildResult build_trees(std::span<const CommentNode> records) {
  TreeBuildResult result;
  std::map<std::string, CommentNode> nodes;
  for (const auto& record : records) {
    if (!nodes.emplace(record.comment_id, record).second) ++result.report.duplicates;
  }

  auto parent_of = [&](const CommentNode& node) -> const CommentNode* {
    if (!node.parent_id) return nullptr;
    auto it = nodes.find(*node.parent_id);
    return it == nodes.end() ? nullptr : &it->second;
  };

  // Walk each ancestor chain once; a chain that revisits a node on the
  // current walk is a cycle.
  enum class Mark { kUnseen, kOnPath, kDone };
  std::unordered_map<std::string, Mark> marks;
  for (auto& [id, start] : nodes) {
    std::vector<CommentNode*> path;
    CommentNode* cur = &start;
    while (cur != nullptr && marks[cur->comment_id] == Mark::kUnseen) {
      marks[cur->comment_id] = Mark::kOnPath;
      path.push_back(cur);
      const CommentNode* parent = parent_of(*cur);
      cur = parent == nullptr ? nullptr : &nodes.at(parent->comment_id);
    }
    if (cur != nullptr && marks[cur->comment_id] == Mark::kOnPath) {
      auto first = std::find(path.begin(), path.end(), cur);
      CommentNode* victim = *std::min_element(
          first, path.end(),
          [](const CommentNode* a, const CommentNode* b) { return a->comment_id < b->comment_id; });
      victim->parent_id.reset();
      ++result.report.cycles_broken;
    }
    for (CommentNode* node : path) marks[node->comment_id] = Mark::kDone;
  }

  std::map<std::string, std::vector<CommentNode>> children;
  std::vector<CommentNode> roots;
  for (const auto& [id, node] : nodes) {
    if (!node.parent_id) {
      roots.push_back(node);
    } else if (nodes.contains(*node.parent_id)) {
      children[*node.parent_id].push_back(node);
    }
  }
  for (auto& [id, kids] : children) std::sort(kids.begin(), kids.end(), child_order);
  std::sort(roots.begin(), roots.end(), child_order);

  std::size_t reachable = 0;
  for (const auto& root : roots) {
    MessageTree tree{root, {}};
    std::vector<std::string> stack{root.comment_id};
    while (!stack.empty()) {
      const std::string id = stack.back();
      stack.pop_back();
      ++reachable;
      auto it = children.find(id);
      if (it == children.end()) continue;
      tree.children[id] = it->second;
      for (const auto& child : it->second) stack.push_back(child.comment_id);
    }
    result.trees.push_back(std::move(tree));
  }
  result.report.accepted = reachable;
  result.report.orphans = nodes.size() - reachable;
  return result;
}

DialogueSample assign_roles(DialogueSample sample, int role_cap) {
  std::map<std::string, int> roles{{sample.response.user_id, 0}};
  int next = 1;
  sample.role_ids.clear();
  sample.role_ids.reserve(sample.context.size() + 1);
  for (const auto& turn : sample.context) {
    auto [it, inserted] = roles.emplace(turn.user_id, next);
    if (inserted) ++next;
    sample.role_ids.push_back(std::min(it->second, role_cap));
  }
  sample.role_ids.push_back(0);
  return sample;
}

std::vector<DialogueSample> extract_samples(const MessageTree& tree, int role_cap) {
  std::vector<DialogueSample> samples;
  std::vector<Turn> path;
  std::function<void(const CommentNode&)> visit = [&](const CommentNode& node) {
    if (!path.empty()) {
      DialogueSample sample{path, Turn{node.text, node.user_id}, {}};
      samples.push_back(assign_roles(std::move(sample), role_cap));
    }
    path.push_back(Turn{node.text, node.user_id});
    for (const auto& child : tree.children_of(node.comment_id)) visit(child);
    path.pop_back();
  };
  visit(tree.root);
  return samples;
}

std::optional<DialogueSample> clean(const DialogueSample& sample, const CleaningConfig& rules,
                                    CleaningStats* stats) {
  auto reject = [&](const char* reason) -> std::optional<DialogueSample> {
    if (stats != nullptr) ++stats->rejected[reason];
    return std::nullopt;
  };

  DialogueSample out = sample;
  std::vector<Turn*> turns;
  for (auto& turn : out.context) turns.push_back(&turn);
  turns.push_back(&out.response);

  for (Turn* turn : turns) {
    if (rules.strip_urls) turn->text = strip_urls(turn->text);
    const auto words = split_words(turn->text);
    if (words.empty()) return reject("empty");
    if (rules.max_turn_len > 0 && words.size() > rules.max_turn_len) return reject("max_turn_len");
    if (!rules.blocklist.empty()) {
      for (const auto& word : words) {
        if (rules.blocklist.contains(lowercase(word))) return reject("blocklist");
      }
    }
    if (rules.max_non_text_ratio < 1.0 && non_text_ratio(turn->text) > rules.max_non_text_ratio) {
      return reject("non_text");
    }
  }
  if (rules.min_len > 0 && split_words(out.response.text).size() < rules.min_len) {
    return reject("min_len");
  }
  if (stats != nullptr) ++stats->passed;
  return out;
}

std::set<std::string> load_blocklist(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open blocklist '" + path + "'");
  std::set<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    for (auto& word : split_words(line)) words.insert(lowercase(word));
  }
  return words;
}

namespace {

// Ids may be written as strings or integers.
std::string id_string(const json& value) {
  if (value.is_number_integer()) return std::to_string(value.get<std::int64_t>());
  return value.get<std::string>();
}

}  // namespace

CommentNode parse_comment_line(std::string_view line) {
  const json j = json::parse(line);
  CommentNode node;
  node.comment_id = id_string(j.at("id"));
  if (j.contains("parent_id") && !j.at("parent_id").is_null()) {
    node.parent_id = id_string(j.at("parent_id"));
  }
  node.user_id = id_string(j.at("user_id"));
  node.text = j.at("text").get<std::string>();
  if (j.contains("ts") && !j.at("ts").is_null()) node.timestamp = j.at("ts").get<std::int64_t>();
  return node;
}

std::string comment_to_json_line(const CommentNode& node) {
  json j{{"id", node.comment_id},
         {"parent_id", node.parent_id ? json(*node.parent_id) : json(nullptr)},
         {"user_id", node.user_id},
         {"text", node.text}};
  if (node.timestamp) j["ts"] = *node.timestamp;
  return j.dump();
}

std::string sample_to_json_line(const DialogueSample& sample) {
  json context = json::array();
  for (const auto& turn : sample.context) context.push_back({{"text", turn.text}, {"user", turn.user_id}});
  json j{{"context", context},
         {"response", {{"text", sample.response.text}, {"user", sample.response.user_id}}},
         {"roles", sample.role_ids}};
  return j.dump();
}

DialogueSample parse_sample_line(std::string_view line) {
  const json j = json::parse(line);
  DialogueSample sample;
  for (const auto& turn : j.at("context")) {
    sample.context.push_back({turn.at("text").get<std::string>(), turn.at("user").get<std::string>()});
  }
  sample.response = {j.at("response").at("text").get<std::string>(),
                     j.at("response").at("user").get<std::string>()};
  if (j.contains("roles")) sample.role_ids = j.at("roles").get<std::vector<int>>();
  return sample;
}

namespace {

template <typename T, typename Parse>
std::vector<T> read_lines(const std::string& path, Parse parse) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<T> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

std::vector<CommentNode> read_comments(const std::string& path) {
  return read_lines<CommentNode>(path, parse_comment_line);
}

std::vector<DialogueSample> read_samples(const std::string& path) {
  return read_lines<DialogueSample>(path, parse_sample_line);
}

void write_samples(const std::string& path, std::span<const DialogueSample> samples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const auto& sample : samples) out << sample_to_json_line(sample) << '\n';
}

}  // namespace prefixchat
