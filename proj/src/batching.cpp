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

#include "prefixchat/batching.hpp"

#include <algorithm>
#include <array>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace prefixchat {

PackedSample pack_tokens(std::span<const std::vector<TokenId>> context_turns,
                         std::span<const int> context_roles, std::span<const TokenId> response,
                         const PackLimits& limits) {
  if (limits.max_ctx == 0 || limits.max_resp == 0) {
    throw std::invalid_argument("pack limits must be positive");
  }
  if (context_turns.size() != context_roles.size()) {
    throw std::invalid_argument("one role id per context turn required");
  }
  std::vector<TokenId> ctx_tokens;
  std::vector<std::int32_t> ctx_roles;
  for (std::size_t t = 0; t < context_turns.size(); ++t) {
    for (TokenId id : context_turns[t]) {
      ctx_tokens.push_back(id);
      ctx_roles.push_back(context_roles[t]);
    }
    ctx_tokens.push_back(Vocabulary::kEos);
    ctx_roles.push_back(context_roles[t]);
  }
  if (ctx_tokens.size() > limits.max_ctx) {
    const auto drop = static_cast<std::ptrdiff_t>(ctx_tokens.size() - limits.max_ctx);
    ctx_tokens.erase(ctx_tokens.begin(), ctx_tokens.begin() + drop);
    ctx_roles.erase(ctx_roles.begin(), ctx_roles.begin() + drop);
  }
  const std::size_t resp_len = std::min(response.size(), limits.max_resp - 1);

  PackedSample out;
  out.context_len = ctx_tokens.size();
  out.response_len = resp_len;
  const std::size_t length = out.context_len + resp_len + 2;
  out.token_ids = std::move(ctx_tokens);
  out.token_ids.push_back(Vocabulary::kBos);
  out.token_ids.insert(out.token_ids.end(), response.begin(),
                       response.begin() + static_cast<std::ptrdiff_t>(resp_len));
  out.token_ids.push_back(Vocabulary::kEos);

  out.position_ids.resize(length);
  std::iota(out.position_ids.begin(), out.position_ids.end(), 0);
  out.type_ids.assign(length, kResponseType);
  std::fill_n(out.type_ids.begin(), out.context_len, kContextType);
  out.role_ids = std::move(ctx_roles);
  out.role_ids.resize(length, 0);
  out.loss_mask.assign(length, 0);
  std::fill(out.loss_mask.begin() + static_cast<std::ptrdiff_t>(out.context_len + 1),
            out.loss_mask.end(), 1);
  return out;
}

PackedSample pack(const DialogueSample& sample, const Vocabulary& vocab, const PackLimits& limits) {
  if (sample.role_ids.size() != sample.context.size() + 1) {
    throw std::invalid_argument("sample roles not assigned");
  }
  std::vector<std::vector<TokenId>> turns;
  turns.reserve(sample.context.size());
  for (const auto& turn : sample.context) turns.push_back(encode(turn.text, vocab));
  const auto response = encode(sample.response.text, vocab);
  if (response.empty()) throw std::invalid_argument("empty response");
  return pack_tokens(turns, std::span(sample.role_ids).first(sample.context.size()), response,
                     limits);
}

MaskMatrix build_prefix_mask(std::size_t context_len, std::size_t response_len) {
  const auto n = static_cast<Eigen::Index>(context_len + response_len);
  const auto c = static_cast<Eigen::Index>(context_len);
  MaskMatrix mask = MaskMatrix::Zero(n, n);
  mask.topLeftCorner(c, c).setOnes();
  mask.bottomLeftCorner(n - c, c).setOnes();
  for (Eigen::Index i = c; i < n; ++i) mask.row(i).segment(c, i - c + 1).setOnes();
  return mask;
}

std::size_t Batch::loss_tokens() const {
  return static_cast<std::size_t>(loss_mask.cast<std::int64_t>().sum());
}

Batch collate(std::span<const PackedSample> samples, std::span<const std::size_t> indices) {
  std::size_t max_len = 0;
  for (std::size_t i : indices) max_len = std::max(max_len, samples[i].length());
  const auto rows = static_cast<Eigen::Index>(indices.size());
  const auto cols = static_cast<Eigen::Index>(max_len);

  Batch batch;
  batch.token_ids = IdMatrix::Constant(rows, cols, Vocabulary::kPad);
  batch.position_ids = IdMatrix::Zero(rows, cols);
  batch.type_ids = IdMatrix::Zero(rows, cols);
  batch.role_ids = IdMatrix::Zero(rows, cols);
  batch.loss_mask = IdMatrix::Zero(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const std::size_t index = indices[static_cast<std::size_t>(r)];
    const PackedSample& s = samples[index];
    const auto len = static_cast<Eigen::Index>(s.length());
    using Row = Eigen::Map<const Eigen::Matrix<std::int32_t, 1, Eigen::Dynamic>>;
    batch.token_ids.row(r).head(len) = Row(s.token_ids.data(), len);
    batch.position_ids.row(r).head(len) = Row(s.position_ids.data(), len);
    batch.type_ids.row(r).head(len) = Row(s.type_ids.data(), len);
    batch.role_ids.row(r).head(len) = Row(s.role_ids.data(), len);
    batch.loss_mask.row(r).head(len) = Row(s.loss_mask.data(), len);

    MaskMatrix mask = MaskMatrix::Zero(cols, cols);
    mask.topLeftCorner(len, len) = build_prefix_mask(s.context_len, s.response_len + 2);
    batch.attention_mask.push_back(std::move(mask));
    batch.lengths.emplace_back(s.context_len, s.response_len);
    batch.row_lengths.push_back(s.length());
    batch.sample_index.push_back(index);
    batch.pad_count += max_len - s.length();
  }
  return batch;
}

Batch collate(std::span<const PackedSample> samples) {
  std::vector<std::size_t> indices(samples.size());
  std::iota(indices.begin(), indices.end(), 0);
  return collate(samples, indices);
}

std::vector<PackedSample> unpack(const Batch& batch) {
  std::vector<PackedSample> out;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    PackedSample s;
    s.context_len = batch.lengths[r].first;
    s.response_len = batch.lengths[r].second;
    const auto len = static_cast<Eigen::Index>(batch.row_length(r));
    const auto row = static_cast<Eigen::Index>(r);
    auto take = [&](const IdMatrix& m) {
      std::vector<std::int32_t> v(static_cast<std::size_t>(len));
      Eigen::Map<Eigen::Matrix<std::int32_t, 1, Eigen::Dynamic>>(v.data(), len) = m.row(row).head(len);
      return v;
    };
    s.token_ids = take(batch.token_ids);
    s.position_ids = take(batch.position_ids);
    s.type_ids = take(batch.type_ids);
    s.role_ids = take(batch.role_ids);
    s.loss_mask = take(batch.loss_mask);
    out.push_back(std::move(s));
  }
  return out;
}

Grouping plan_groups_in_order(std::span<const std::size_t> lengths,
                              std::span<const std::size_t> order, std::size_t token_budget,
                              std::size_t max_rows) {
  Grouping grouping;
  std::vector<std::size_t> current;
  std::size_t current_max = 0;
  auto close = [&]() {
    if (current.empty()) return;
    for (std::size_t i : current) grouping.pad_count += current_max - lengths[i];
    grouping.slot_count += current_max * current.size();
    grouping.groups.push_back(std::move(current));
    current.clear();
    current_max = 0;
  };
  for (std::size_t i : order) {
    if (lengths[i] > token_budget) {
      throw std::invalid_argument("sample " + std::to_string(i) + " has length " +
                                  std::to_string(lengths[i]) + " > token budget " +
                                  std::to_string(token_budget));
    }
    const std::size_t grown_max = std::max(current_max, lengths[i]);
    const bool fits = (current.size() + 1) * grown_max <= token_budget &&
                      (max_rows == 0 || current.size() < max_rows);
    if (!fits) close();
    current.push_back(i);
    current_max = std::max(current_max, lengths[i]);
  }
  close();
  return grouping;
}

Grouping plan_groups(std::span<const std::size_t> lengths, std::size_t token_budget,
                     std::size_t max_rows) {
  std::vector<std::size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });
  return plan_groups_in_order(lengths, order, token_budget, max_rows);
}

GroupedBatches group_by_length(std::span<const PackedSample> samples, std::size_t token_budget,
                               std::size_t max_rows) {
  std::vector<std::size_t> lengths;
  lengths.reserve(samples.size());
  for (const auto& s : samples) lengths.push_back(s.length());
  const Grouping plan = plan_groups(lengths, token_budget, max_rows);
  GroupedBatches out;
  out.pad_count = plan.pad_count;
  out.slot_count = plan.slot_count;
  for (const auto& group : plan.groups) out.batches.push_back(collate(samples, group));
  return out;
}

namespace {

constexpr std::array<char, 4> kBatchMagic{'P', 'C', 'B', 'T'};
constexpr std::uint32_t kBatchVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> bytes{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                                  static_cast<char>((v >> 16) & 0xFF),
                                  static_cast<char>((v >> 24) & 0xFF)};
  out.write(bytes.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw std::runtime_error("batch dump: truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_batches(std::ostream& out, std::span<const Batch> batches) {
  out.write(kBatchMagic.data(), 4);
  put_u32(out, kBatchVersion);
  put_u32(out, static_cast<std::uint32_t>(batches.size()));
  for (const Batch& batch : batches) {
    put_u32(out, static_cast<std::uint32_t>(batch.rows()));
    put_u32(out, static_cast<std::uint32_t>(batch.max_len()));
    for (const IdMatrix* m : {&batch.token_ids, &batch.position_ids, &batch.type_ids,
                              &batch.role_ids, &batch.loss_mask}) {
      for (Eigen::Index i = 0; i < m->size(); ++i) {
        put_u32(out, static_cast<std::uint32_t>(m->data()[i]));
      }
    }
    for (const MaskMatrix& mask : batch.attention_mask) {
      for (Eigen::Index i = 0; i < mask.size(); ++i) put_u32(out, mask.data()[i]);
    }
    for (const auto& [c, r] : batch.lengths) {
      put_u32(out, static_cast<std::uint32_t>(c));
      put_u32(out, static_cast<std::uint32_t>(r));
    }
  }
}

std::vector<Batch> read_batches(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kBatchMagic) throw std::runtime_error("batch dump: bad magic");
  if (get_u32(in) != kBatchVersion) throw std::runtime_error("batch dump: unsupported version");
  const std::uint32_t count = get_u32(in);
  std::vector<Batch> batches;
  for (std::uint32_t b = 0; b < count; ++b) {
    Batch batch;
    const Eigen::Index rows = get_u32(in);
    const Eigen::Index cols = get_u32(in);
    for (IdMatrix* m : {&batch.token_ids, &batch.position_ids, &batch.type_ids, &batch.role_ids,
                        &batch.loss_mask}) {
      m->resize(rows, cols);
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = static_cast<std::int32_t>(get_u32(in));
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
      MaskMatrix mask(cols, cols);
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = static_cast<std::uint8_t>(get_u32(in));
      batch.attention_mask.push_back(std::move(mask));
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
      const std::size_t c = get_u32(in);
      const std::size_t len = get_u32(in);
      batch.lengths.emplace_back(c, len);
      batch.row_lengths.push_back(c + len + 2);
      if (batch.row_lengths.back() > static_cast<std::size_t>(cols)) {
        throw std::runtime_error("batch dump: row longer than batch width");
      }
      batch.sample_index.push_back(static_cast<std::size_t>(r));
      batch.pad_count += static_cast<std::size_t>(cols) - batch.row_length(static_cast<std::size_t>(r));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

void print_masks(std::ostream& out, const Batch& batch) {
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    out << "row " << r << " (context " << batch.lengths[r].first << ", response "
        << batch.lengths[r].second << ")\n";
    const MaskMatrix& mask = batch.attention_mask[r];
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
      for (Eigen::Index j = 0; j < mask.cols(); ++j) out << static_cast<int>(mask(i, j));
      out << '\n';
    }
  }
}

}  // namespace prefixchat
