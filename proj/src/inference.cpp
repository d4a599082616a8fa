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

#include "prefixchat/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace prefixchat {

std::string to_string(DecodeStrategy strategy) {
  switch (strategy) {
    case DecodeStrategy::kGreedy: return "greedy";
    case DecodeStrategy::kTopK: return "top_k";
    case DecodeStrategy::kTopP: return "top_p";
  }
  return "unknown";
}

DecodeStrategy parse_strategy(const std::string& name) {
  if (name == "greedy") return DecodeStrategy::kGreedy;
  if (name == "top_k") return DecodeStrategy::kTopK;
  if (name == "top_p") return DecodeStrategy::kTopP;
  throw std::invalid_argument("unknown decoding strategy '" + name + "' (greedy|top_k|top_p)");
}

void DecodeConfig::validate(std::size_t max_resp) const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("decode config: " + what); };
  if (!(top_p > 0 && top_p <= 1)) fail("top_p must lie in (0, 1]");
  if (top_k < 1) fail("top_k must be >= 1");
  if (!(temperature > 0)) fail("temperature must be positive");
  if (max_new_tokens < 1) fail("max_new_tokens must be >= 1");
  if (max_new_tokens > max_resp) {
    fail("max_new_tokens " + std::to_string(max_new_tokens) + " exceeds the response cap " +
         std::to_string(max_resp));
  }
}

nlohmann::json DecodeConfig::to_json() const {
  return {{"strategy", to_string(strategy)}, {"top_k", top_k},
          {"top_p", top_p},                  {"temperature", temperature},
          {"max_new_tokens", max_new_tokens}, {"seed", seed}};
}

std::string DecodeConfig::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json().dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TokenId sample_token(std::span<const double> logits, const DecodeConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = logits.size();
  if (n == 0) throw std::invalid_argument("sample_token: empty logits");
  if (cfg.strategy == DecodeStrategy::kGreedy) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }

  const double max = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(n);
  for (std::size_t i = 0; i < n; ++i) probs[i] = std::exp((logits[i] - max) / cfg.temperature);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });

  std::size_t keep = n;
  if (cfg.strategy == DecodeStrategy::kTopK) keep = std::min(cfg.top_k, n);
  if (cfg.strategy == DecodeStrategy::kTopP && cfg.top_p < 1.0) {
    const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
    double cumulative = 0;
    for (std::size_t i = 0; i < n; ++i) {
      cumulative += probs[order[i]] / total;
      if (cumulative >= cfg.top_p) {
        keep = i + 1;
        break;
      }
    }
  }

  double kept = 0;
  for (std::size_t i = 0; i < keep; ++i) kept += probs[order[i]];
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * kept;
  double cumulative = 0;
  for (std::size_t i = 0; i < keep; ++i) {
    cumulative += probs[order[i]];
    if (u < cumulative) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order[keep - 1]);
}

template <typename Scalar>
Generation generate(std::span<const Turn> context, const std::string& responder,
                    const ModelParameters<Scalar>& params, const Vocabulary& vocab,
                    const DecodeConfig& cfg, const PackLimits& limits, std::mt19937_64& rng) {
  cfg.validate(limits.max_resp);
  if (context.empty()) throw std::invalid_argument("generate: empty context");
  DialogueSample sample{{context.begin(), context.end()}, Turn{"", responder}, {}};
  sample = assign_roles(std::move(sample), params.config.n_roles - 1);

  std::vector<std::vector<TokenId>> turns;
  for (const auto& turn : sample.context) turns.push_back(encode(turn.text, vocab));
  const std::span<const int> roles = std::span(sample.role_ids).first(sample.context.size());

  Generation out;
  const auto vocab_size = static_cast<std::size_t>(params.config.vocab_size);
  std::vector<double> logits(vocab_size);
  while (out.tokens.size() < cfg.max_new_tokens) {
    // The closing EOS placeholder sits after the read position and is
    // invisible to it under the causal response mask.
    const PackedSample packed = pack_tokens(turns, roles, out.tokens, limits);
    const Batch batch = collate(std::span(&packed, 1));
    const auto trace = forward(batch, params);
    const auto position = static_cast<Eigen::Index>(packed.context_len + packed.response_len);
    const auto& row = trace.rows[0].logits;
    for (std::size_t v = 0; v < vocab_size; ++v) {
      logits[v] = static_cast<double>(row(position, static_cast<Eigen::Index>(v)));
    }
    for (TokenId banned : {Vocabulary::kPad, Vocabulary::kBos, Vocabulary::kUnk}) {
      logits[static_cast<std::size_t>(banned)] = -std::numeric_limits<double>::infinity();
    }
    // Ids beyond the vocabulary have no surface form.
    for (std::size_t v = vocab.size(); v < vocab_size; ++v) {
      logits[v] = -std::numeric_limits<double>::infinity();
    }
    const TokenId next = sample_token(logits, cfg, rng);
    if (next == Vocabulary::kEos) {
      out.stopped_at_eos = true;
      break;
    }
    out.tokens.push_back(next);
  }
  out.text = decode(out.tokens, vocab);
  return out;
}

template <typename Scalar>
Generation generate(std::span<const Turn> context, const std::string& responder,
                    const ModelParameters<Scalar>& params, const Vocabulary& vocab,
                    const DecodeConfig& cfg, const PackLimits& limits) {
  std::mt19937_64 rng(cfg.seed);
  return generate(context, responder, params, vocab, cfg, limits, rng);
}

template <typename Scalar>
Perplexity perplexity(std::span<const PackedSample> packed, const ModelParameters<Scalar>& params,
                      std::size_t token_budget) {
  if (packed.empty()) throw std::invalid_argument("perplexity: empty corpus");
  std::size_t longest = 0;
  for (const auto& s : packed) longest = std::max(longest, s.length());
  const GroupedBatches grouped = group_by_length(packed, std::max(token_budget, longest));
  double total = 0;
  std::size_t count = 0;
  for (const Batch& batch : grouped.batches) {
    const auto loss = nll_loss(forward(batch, params), batch);
    total += static_cast<double>(loss.total);
    count += loss.count;
  }
  Perplexity out;
  out.tokens = count;
  out.nats_per_token = total / static_cast<double>(count);
  out.ppl = std::exp(out.nats_per_token);
  return out;
}

template <typename Scalar>
Perplexity perplexity(std::span<const DialogueSample> corpus, const ModelParameters<Scalar>& params,
                      const Vocabulary& vocab, const PackLimits& limits, std::size_t token_budget) {
  if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
  const int role_cap = params.config.n_roles - 1;
  std::vector<PackedSample> packed;
  for (const auto& sample : corpus) {
    const DialogueSample roled = sample.role_ids.size() == sample.context.size() + 1
                                     ? sample
                                     : assign_roles(sample, role_cap);
    PackedSample p = pack(roled, vocab, limits);
    for (auto& role : p.role_ids) role = std::min(role, role_cap);
    packed.push_back(std::move(p));
  }
  return perplexity(std::span<const PackedSample>(packed), params, token_budget);
}

template <typename Scalar>
ChatState self_chat(const std::string& seed_topic, std::size_t rounds,
                    const ModelParameters<Scalar>& params, const Vocabulary& vocab,
                    const DecodeConfig& cfg, const PackLimits& limits) {
  if (rounds < 1) throw std::invalid_argument("self_chat: rounds must be >= 1");
  ChatState chat;
  chat.turns.push_back({0, "P1", seed_topic});
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t round = 1; round <= rounds; ++round) {
    for (const char* speaker : {"P2", "P1"}) {
      std::vector<Turn> context;
      for (const auto& turn : chat.turns) context.push_back({turn.text, turn.speaker});
      Generation g = generate(std::span<const Turn>(context), speaker, params, vocab, cfg, limits, rng);
      chat.turns.push_back({round, speaker, std::move(g.text)});
    }
    chat.rounds = round;
  }
  return chat;
}

std::string transcript_jsonl(const ChatState& chat, const DecodeConfig& cfg) {
  const std::string digest = cfg.digest();
  std::string out;
  for (const auto& turn : chat.turns) {
    out += nlohmann::json{{"round", turn.round},
                          {"speaker", turn.speaker},
                          {"text", turn.text},
                          {"decode_config_digest", digest}}
               .dump();
    out += '\n';
  }
  return out;
}

double distinct_n(std::span<const std::string> turns, int n) {
  if (n != 1 && n != 2) throw std::invalid_argument("distinct_n: n must be 1 or 2");
  std::set<std::string> unique;
  std::size_t total = 0;
  for (const auto& text : turns) {
    std::istringstream in(text);
    std::vector<std::string> words{std::istream_iterator<std::string>(in), {}};
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i) {
      std::string gram = words[i];
      if (n == 2) gram += '\x1f' + words[i + 1];
      unique.insert(std::move(gram));
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("distinct_n: empty input");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

#define PREFIXCHAT_INSTANTIATE(S)                                                                   \
  template Generation generate<S>(std::span<const Turn>, const std::string&,                        \
                                  const ModelParameters<S>&, const Vocabulary&,                     \
                                  const DecodeConfig&, const PackLimits&, std::mt19937_64&);        \
  template Generation generate<S>(std::span<const Turn>, const std::string&,                        \
                                  const ModelParameters<S>&, const Vocabulary&,                     \
                                  const DecodeConfig&, const PackLimits&);                          \
  template Perplexity perplexity<S>(std::span<const PackedSample>, const ModelParameters<S>&,       \
                                    std::size_t);                                                   \
  template Perplexity perplexity<S>(std::span<const DialogueSample>, const ModelParameters<S>&,     \
                                    const Vocabulary&, const PackLimits&, std::size_t);             \
  template ChatState self_chat<S>(const std::string&, std::size_t, const ModelParameters<S>&,       \
                                  const Vocabulary&, const DecodeConfig&, const PackLimits&);

PREFIXCHAT_INSTANTIATE(float)
PREFIXCHAT_INSTANTIATE(double)

#undef PREFIXCHAT_INSTANTIATE

}  // namespace prefixchat
