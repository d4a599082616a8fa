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

#ifndef PREFIXCHAT_CORPUS_HPP_
#define PREFIXCHAT_CORPUS_HPP_

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace prefixchat {

/// One comment record of a social-media dump.
struct CommentNode {
  std::string comment_id;
  std::optional<std::string> parent_id;
  std::string user_id;
  std::string text;
  std::optional<std::int64_t> timestamp;

  bool operator==(const CommentNode&) const = default;
};

/// Reconstructed thread. Children lists are ordered by (timestamp, id);
/// records without a timestamp sort before timestamped ones.
struct MessageTree {
  CommentNode root;
  std::map<std::string, std::vector<CommentNode>> children;

  const std::vector<CommentNode>& children_of(const std::string& comment_id) const;
  std::size_t node_count() const;
  /// Longest root-to-leaf edge count (root-only tree has depth 0).
  std::size_t depth() const;

  bool operator==(const MessageTree&) const = default;
};

struct TreeBuildReport {
  std::size_t accepted = 0;
  std::size_t duplicates = 0;
  /// Nodes dropped because their ancestor chain ends at a missing parent.
  std::size_t orphans = 0;
  /// Parent edges removed to break reply cycles.
  std::size_t cycles_broken = 0;
};

struct TreeBuildResult {
  std::vector<MessageTree> trees;
  TreeBuildReport report;
};

/// Assembles message trees from records given in any order. Duplicate ids
/// keep the first record; orphan subtrees are dropped; a cycle is broken by
/// detaching the smallest comment id in it, which then becomes a root.
TreeBuildResult build_trees(std::span<const CommentNode> records);

struct Turn {
  std::string text;
  std::string user_id;

  bool operator==(const Turn&) const = default;
};

struct DialogueSample {
  std::vector<Turn> context;
  Turn response;
  /// One id per context turn followed by the response id (always 0).
  std::vector<int> role_ids;

  bool operator==(const DialogueSample&) const = default;
};

inline constexpr int kDefaultRoleCap = 8;

/// Role 0 goes to the response author wherever they appear. Other users get
/// 1, 2, ... by first appearance in the context, clamped to `role_cap`.
DialogueSample assign_roles(DialogueSample sample, int role_cap = kDefaultRoleCap);

/// One sample per non-root node in preorder: the context is the path from
/// the root to the node's parent. Roles are assigned.
std::vector<DialogueSample> extract_samples(const MessageTree& tree,
                                            int role_cap = kDefaultRoleCap);

struct CleaningConfig {
  /// Minimum response length in whitespace-separated words; 0 disables.
  std::size_t min_len = 2;
  /// Maximum words in any turn; 0 disables.
  std::size_t max_turn_len = 256;
  bool strip_urls = true;
  /// Lower-cased words; a turn containing one rejects the sample.
  std::set<std::string> blocklist;
  /// Upper bound on the fraction of non-alphanumeric, non-space bytes in a
  /// turn; values >= 1 disable the filter.
  double max_non_text_ratio = 0.5;
};

struct CleaningStats {
  std::size_t passed = 0;
  std::map<std::string, std::size_t> rejected;
};

/// Returns the (possibly URL-stripped) sample if it passes every enabled
/// filter. Rejection reasons: "empty", "min_len", "max_turn_len",
/// "blocklist", "non_text".
std::optional<DialogueSample> clean(const DialogueSample& sample, const CleaningConfig& rules,
                                    CleaningStats* stats = nullptr);

std::set<std::string> load_blocklist(const std::string& path);

// JSON-lines codecs.
CommentNode parse_comment_line(std::string_view line);
std::string comment_to_json_line(const CommentNode& node);
std::string sample_to_json_line(const DialogueSample& sample);
DialogueSample parse_sample_line(std::string_view line);

std::vector<CommentNode> read_comments(const std::string& path);
std::vector<DialogueSample> read_samples(const std::string& path);
void write_samples(const std::string& path, std::span<const DialogueSample> samples);

}  // namespace prefixchat

#endif  // PREFIXCHAT_CORPUS_HPP_
