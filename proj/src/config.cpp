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

#include "prefixchat/config.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace prefixchat {

namespace {

using nlohmann::json;

template <typename T>
void take(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

AppConfig::AppConfig() {
  model.vocab_size = 0;
  run.schedule.peak_lr = 1e-3;
}

const std::vector<std::string>& AppConfig::known_keys() {
  static const std::vector<std::string> keys = {
      // model
      "n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "n_types", "max_positions",
      "tie_embeddings",
      // training
      "token_budget", "total_train_tokens", "steps", "eval_interval", "checkpoint_interval", "seed",
      "max_ctx", "max_resp", "peak_lr", "warmup_steps", "total_steps", "beta1", "beta2", "eps",
      "grad_clip",
      // corpus
      "min_len", "max_turn_len", "strip_urls", "max_non_text_ratio", "blocklist", "role_cap",
      // decoding
      "strategy", "top_k", "top_p", "temperature", "max_new_tokens", "decode_seed",
      // paths
      "corpus", "vocab", "out"};
  return keys;
}

void AppConfig::merge_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a flat JSON object");
  const auto& keys = known_keys();
  for (const auto& [key, value] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw std::invalid_argument("unknown config key '" + key + "'");
    }
    if (value.is_object() || value.is_array()) {
      throw std::invalid_argument("config key '" + key + "' must be a scalar");
    }
  }
  try {
    take(j, "n_layers", model.n_layers);
    take(j, "n_heads", model.n_heads);
    take(j, "d_model", model.d_model);
    take(j, "d_ff", model.d_ff);
    take(j, "vocab_size", model.vocab_size);
    take(j, "n_types", model.n_types);
    take(j, "max_positions", model.max_positions);
    take(j, "tie_embeddings", model.tie_embeddings);

    take(j, "token_budget", run.token_budget);
    take(j, "total_train_tokens", run.total_train_tokens);
    take(j, "steps", run.steps);
    take(j, "eval_interval", run.eval_interval);
    take(j, "checkpoint_interval", run.checkpoint_interval);
    take(j, "seed", run.seed);
    take(j, "max_ctx", run.limits.max_ctx);
    take(j, "max_resp", run.limits.max_resp);
    take(j, "peak_lr", run.schedule.peak_lr);
    if (j.contains("warmup_steps")) warmup_steps = j.at("warmup_steps").get<std::size_t>();
    if (j.contains("total_steps")) total_steps = j.at("total_steps").get<std::size_t>();
    take(j, "beta1", run.adam.beta1);
    take(j, "beta2", run.adam.beta2);
    take(j, "eps", run.adam.eps);
    take(j, "grad_clip", run.adam.grad_clip);

    take(j, "min_len", cleaning.min_len);
    take(j, "max_turn_len", cleaning.max_turn_len);
    take(j, "strip_urls", cleaning.strip_urls);
    take(j, "max_non_text_ratio", cleaning.max_non_text_ratio);
    take(j, "blocklist", blocklist_path);
    take(j, "role_cap", role_cap);

    if (j.contains("strategy")) decode.strategy = parse_strategy(j.at("strategy").get<std::string>());
    take(j, "top_k", decode.top_k);
    take(j, "top_p", decode.top_p);
    take(j, "temperature", decode.temperature);
    take(j, "max_new_tokens", decode.max_new_tokens);
    take(j, "decode_seed", decode.seed);

    take(j, "corpus", corpus_path);
    take(j, "vocab", vocab_path);
    take(j, "out", out_dir);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: wrong value type: ") + e.what());
  }
}

AppConfig AppConfig::from_json(const json& j) {
  AppConfig config;
  config.merge_json(j);
  return config;
}

AppConfig AppConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config '" + path + "': " + e.what());
  }
  return from_json(j);
}

void AppConfig::resolve(std::size_t vocabulary_size) {
  if (model.vocab_size <= 0) model.vocab_size = static_cast<int>(vocabulary_size);
  model.n_roles = role_cap + 1;
  model.init_seed = run.seed;
  run.schedule.total_steps = total_steps.value_or(run.steps);
  run.schedule.warmup_steps =
      warmup_steps.value_or(std::min<std::size_t>(200, run.schedule.total_steps / 10));
  total_steps = run.schedule.total_steps;
  warmup_steps = run.schedule.warmup_steps;
}

void AppConfig::validate() const {
  if (role_cap < 1) throw std::invalid_argument("role_cap must be >= 1");
  model.validate();
  run.validate();
  decode.validate(run.limits.max_resp);
  if (!(cleaning.max_non_text_ratio >= 0)) throw std::invalid_argument("max_non_text_ratio must be >= 0");
}

json AppConfig::to_json() const {
  json j{{"n_layers", model.n_layers},
         {"n_heads", model.n_heads},
         {"d_model", model.d_model},
         {"d_ff", model.d_ff},
         {"vocab_size", model.vocab_size},
         {"n_types", model.n_types},
         {"max_positions", model.max_positions},
         {"tie_embeddings", model.tie_embeddings},
         {"token_budget", run.token_budget},
         {"total_train_tokens", run.total_train_tokens},
         {"steps", run.steps},
         {"eval_interval", run.eval_interval},
         {"checkpoint_interval", run.checkpoint_interval},
         {"seed", run.seed},
         {"max_ctx", run.limits.max_ctx},
         {"max_resp", run.limits.max_resp},
         {"peak_lr", run.schedule.peak_lr},
         {"beta1", run.adam.beta1},
         {"beta2", run.adam.beta2},
         {"eps", run.adam.eps},
         {"grad_clip", run.adam.grad_clip},
         {"min_len", cleaning.min_len},
         {"max_turn_len", cleaning.max_turn_len},
         {"strip_urls", cleaning.strip_urls},
         {"max_non_text_ratio", cleaning.max_non_text_ratio},
         {"blocklist", blocklist_path},
         {"role_cap", role_cap},
         {"strategy", to_string(decode.strategy)},
         {"top_k", decode.top_k},
         {"top_p", decode.top_p},
         {"temperature", decode.temperature},
         {"max_new_tokens", decode.max_new_tokens},
         {"decode_seed", decode.seed},
         {"corpus", corpus_path},
         {"vocab", vocab_path},
         {"out", out_dir}};
  if (warmup_steps) j["warmup_steps"] = *warmup_steps;
  if (total_steps) j["total_steps"] = *total_steps;
  return j;
}

}  // namespace prefixchat
