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

#ifndef PREFIXCHAT_INFERENCE_HPP_
#define PREFIXCHAT_INFERENCE_HPP_

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "prefixchat/batching.hpp"
#include "prefixchat/corpus.hpp"
#include "prefixchat/model.hpp"
#include "prefixchat/tokenizer.hpp"

namespace prefixchat {

enum class DecodeStrategy { kGreedy, kTopK, kTopP };

std::string to_string(DecodeStrategy strategy);
DecodeStrategy parse_strategy(const std::string& name);

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::kTopP;
  std::size_t top_k = 50;
  double top_p = 0.9;
  double temperature = 0.9;
  std::size_t max_new_tokens = 31;
  std::uint64_t seed = 0;

  /// `max_resp` is the packing cap the tokens must fit under.
  void validate(std::size_t max_resp) const;
  nlohmann::json to_json() const;
  /// 16 hex digits of FNV-1a over the canonical JSON.
  std::string digest() const;
};

/// Picks the next token. Greedy takes the arg max (lowest id on ties).
/// Sampling sorts candidates by descending probability (ties by id), keeps
/// the top-k or the smallest nucleus reaching p, renormalizes and inverts
/// the CDF at one uniform draw.
TokenId sample_token(std::span<const double> logits, const DecodeConfig& cfg, std::mt19937_64& rng);

struct Generation {
  std::string text;
  std::vector<TokenId> tokens;
  bool stopped_at_eos = false;
};

/// Autoregressive decoding; the responder takes role 0. PAD, BOS and UNK are
/// never emitted. Each step re-runs the full prefix.
template <typename Scalar>
Generation generate(std::span<const Turn> context, const std::string& responder,
                    const ModelParameters<Scalar>& params, const Vocabulary& vocab,
                    const DecodeConfig& cfg, const PackLimits& limits, std::mt19937_64& rng);

/// Convenience overload seeding a fresh generator from cfg.seed.
template <typename Scalar>
Generation generate(std::span<const Turn> context, const std::string& responder,
                    const ModelParameters<Scalar>& params, const Vocabulary& vocab,
                    const DecodeConfig& cfg, const PackLimits& limits);

struct Perplexity {
  double nats_per_token = 0;
  double ppl = 0;
  std::size_t tokens = 0;
};

/// Token-weighted NLL over response tokens (and closing EOS) of every sample.
template <typename Scalar>
Perplexity perplexity(std::span<const DialogueSample> corpus, const ModelParameters<Scalar>& params,
                      const Vocabulary& vocab, const PackLimits& limits,
                      std::size_t token_budget = 8192);

/// Same over already packed samples.
template <typename Scalar>
Perplexity perplexity(std::span<const PackedSample> packed, const ModelParameters<Scalar>& params,
                      std::size_t token_budget = 8192);

struct ChatTurn {
  std::size_t round = 0;
  std::string speaker;
  std::string text;

  bool operator==(const ChatTurn&) const = default;
};

/// Seed turn (round 0, speaker P1) followed by generated turns that
/// alternate P2, P1, ...
struct ChatState {
  std::vector<ChatTurn> turns;
  std::size_t rounds = 0;

  std::size_t generated_turns() const { return turns.empty() ? 0 : turns.size() - 1; }
};

inline constexpr std::size_t kDefaultSelfChatRounds = 5;

template <typename Scalar>
ChatState self_chat(const std::string& seed_topic, std::size_t rounds,
                    const ModelParameters<Scalar>& params, const Vocabulary& vocab,
                    const DecodeConfig& cfg, const PackLimits& limits);

/// One JSON object per turn: {round, speaker, text, decode_config_digest}.
std::string transcript_jsonl(const ChatState& chat, const DecodeConfig& cfg);

/// Unique / total whitespace n-grams (n in {1, 2}) over all turns; n-grams
/// do not span turns.
double distinct_n(std::span<const std::string> turns, int n);

}  // namespace prefixchat

#endif  // PREFIXCHAT_INFERENCE_HPP_
