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

#ifndef PREFIXCHAT_CONFIG_HPP_
#define PREFIXCHAT_CONFIG_HPP_

#include <cstddef>
#include <optional>
#include <string>

#include "json.hpp"
#include "prefixchat/corpus.hpp"
#include "prefixchat/inference.hpp"
#include "prefixchat/model.hpp"
#include "prefixchat/training.hpp"

namespace prefixchat {

/// Flat run configuration. Every key of the JSON form is listed in
/// known_keys(); anything else is rejected.
struct AppConfig {
  ModelConfig model;
  TrainRunConfig run;
  CleaningConfig cleaning;
  std::string blocklist_path;
  int role_cap = kDefaultRoleCap;
  DecodeConfig decode;
  std::string corpus_path;
  std::string vocab_path;
  std::string out_dir;
  /// Unset: min(200, total_steps / 10).
  std::optional<std::size_t> warmup_steps;
  /// Unset: equal to run.steps.
  std::optional<std::size_t> total_steps;

  AppConfig();

  /// Applies a flat JSON object on top of the current values.
  void merge_json(const nlohmann::json& j);
  static AppConfig from_json(const nlohmann::json& j);
  static AppConfig load(const std::string& path);

  /// Fills derived values: schedule length and warmup, model vocab size
  /// (when `vocab_size` <= 0) and role table size.
  void resolve(std::size_t vocabulary_size);
  void validate() const;
  /// Resolved view, suitable for re-running.
  nlohmann::json to_json() const;

  static const std::vector<std::string>& known_keys();
};

}  // namespace prefixchat

#endif  // PREFIXCHAT_CONFIG_HPP_
