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

#ifndef PREFIXCHAT_BATCHING_HPP_
#define PREFIXCHAT_BATCHING_HPP_

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "prefixchat/corpus.hpp"
#include "prefixchat/tokenizer.hpp"

namespace prefixchat {

using IdMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum SegmentType : std::int32_t { kContextType = 0, kResponseType = 1, kGroundingType = 2 };

struct PackLimits {
  std::size_t max_ctx = 128;
  std::size_t max_resp = 32;
};

/// One (context, response) pair laid out as
///   [context tokens] BOS [response tokens] EOS
/// so L = context_len + response_len + 2. Context turns are each closed by
/// an EOS separator that counts toward context_len.
struct PackedSample {
  std::vector<TokenId> token_ids;
  std::vector<std::int32_t> position_ids;
  std::vector<std::int32_t> type_ids;
  std::vector<std::int32_t> role_ids;
  /// 1 on every response token and on the closing EOS.
  std::vector<std::int32_t> loss_mask;
  std::size_t context_len = 0;
  std::size_t response_len = 0;

  std::size_t length() const { return token_ids.size(); }
  bool operator==(const PackedSample&) const = default;
};

/// Token-level packing. Each context turn is followed by EOS; the context is
/// truncated from the front to max_ctx; the response is truncated from the
/// back to max_resp - 1. An empty response is allowed here.
PackedSample pack_tokens(std::span<const std::vector<TokenId>> context_turns,
                         std::span<const int> context_roles, std::span<const TokenId> response,
                         const PackLimits& limits);

/// Encodes and packs a sample with role ids already assigned.
/// Throws std::invalid_argument("empty response") when the response encodes
/// to nothing.
PackedSample pack(const DialogueSample& sample, const Vocabulary& vocab, const PackLimits& limits);

/// Context span attends bidirectionally within itself; the response span
/// sees the whole context plus response positions up to and including self.
MaskMatrix build_prefix_mask(std::size_t context_len, std::size_t response_len);

struct Batch {
  IdMatrix token_ids;
  IdMatrix position_ids;
  IdMatrix type_ids;
  IdMatrix role_ids;
  IdMatrix loss_mask;
  /// One L_max x L_max matrix per row; PAD rows and columns are zero.
  std::vector<MaskMatrix> attention_mask;
  /// (context_len, response_len) per row, as in PackedSample.
  std::vector<std::pair<std::size_t, std::size_t>> lengths;
  /// Live (unpadded) tokens per row; context_len + response_len + 2 for
  /// packed samples, smaller for hand-built context-only rows.
  std::vector<std::size_t> row_lengths;
  /// Index of each row in the caller's sample list.
  std::vector<std::size_t> sample_index;
  std::size_t pad_count = 0;

  std::size_t rows() const { return static_cast<std::size_t>(token_ids.rows()); }
  std::size_t max_len() const { return static_cast<std::size_t>(token_ids.cols()); }
  std::size_t row_length(std::size_t row) const { return row_lengths[row]; }
  std::size_t loss_tokens() const;
};

/// Pads the selected samples to a common length.
Batch collate(std::span<const PackedSample> samples, std::span<const std::size_t> indices);
Batch collate(std::span<const PackedSample> samples);

/// Inverse of collate.
std::vector<PackedSample> unpack(const Batch& batch);

struct Grouping {
  std::vector<std::vector<std::size_t>> groups;
  std::size_t pad_count = 0;
  std::size_t slot_count = 0;

  double pad_ratio() const {
    return slot_count == 0 ? 0.0 : static_cast<double>(pad_count) / static_cast<double>(slot_count);
  }
};

/// Greedy packing in the given order: a group grows while
/// rows * L_max <= token_budget (and rows <= max_rows when nonzero).
Grouping plan_groups_in_order(std::span<const std::size_t> lengths,
                              std::span<const std::size_t> order, std::size_t token_budget,
                              std::size_t max_rows = 0);

/// Stable sort by length, then greedy packing.
Grouping plan_groups(std::span<const std::size_t> lengths, std::size_t token_budget,
                     std::size_t max_rows = 0);

struct GroupedBatches {
  std::vector<Batch> batches;
  std::size_t pad_count = 0;
  std::size_t slot_count = 0;

  double pad_ratio() const {
    return slot_count == 0 ? 0.0 : static_cast<double>(pad_count) / static_cast<double>(slot_count);
  }
};

/// Throws std::invalid_argument naming the first sample longer than the
/// budget.
GroupedBatches group_by_length(std::span<const PackedSample> samples, std::size_t token_budget,
                               std::size_t max_rows = 0);

// Debug dump: "PCBT" magic, u32 version, u32 batch count; per batch u32 B,
// u32 L, then token/position/type/role/loss matrices, B*L*L attention mask,
// and B (context_len, response_len) pairs. All values little-endian 32-bit.
void write_batches(std::ostream& out, std::span<const Batch> batches);
std::vector<Batch> read_batches(std::istream& in);
/// Prints one 0/1 grid per row.
void print_masks(std::ostream& out, const Batch& batch);

}  // namespace prefixchat

#endif  // PREFIXCHAT_BATCHING_HPP_
