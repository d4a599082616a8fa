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

// Shared fixtures for the unit tests and the acceptance runner.

#ifndef PREFIXCHAT_TESTS_SUPPORT_HPP_
#define PREFIXCHAT_TESTS_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "prefixchat/batching.hpp"
#include "prefixchat/corpus.hpp"
#include "prefixchat/model.hpp"
#include "prefixchat/tokenizer.hpp"
#include "prefixchat/training.hpp"

namespace prefixchat::testing {

inline std::string data_path(const std::string& name) {
  return std::string(PREFIXCHAT_DATA_DIR) + "/" + name;
}

inline PackedSample random_packed(const ModelConfig& config, std::mt19937_64& rng,
                                  std::size_t max_turns, std::size_t max_turn_len,
                                  std::size_t max_resp_len) {
  const auto token = [&] {
    return static_cast<TokenId>(Vocabulary::kNumSpecials +
                                rng() % static_cast<std::uint64_t>(config.vocab_size - 4));
  };
  const std::size_t turns = 1 + rng() % max_turns;
  std::vector<std::vector<TokenId>> context(turns);
  std::vector<int> roles(turns);
  for (std::size_t t = 0; t < turns; ++t) {
    context[t].resize(1 + rng() % max_turn_len);
    for (auto& id : context[t]) id = token();
    roles[t] = static_cast<int>(rng() % static_cast<std::uint64_t>(config.n_roles));
  }
  std::vector<TokenId> response(1 + rng() % max_resp_len);
  for (auto& id : response) id = token();
  return pack_tokens(context, roles, response, PackLimits{1024, 1024});
}

inline Batch random_batch(const ModelConfig& config, std::mt19937_64& rng, std::size_t rows,
                          std::size_t max_turns = 3, std::size_t max_turn_len = 4,
                          std::size_t max_resp_len = 5) {
  std::vector<PackedSample> samples;
  for (std::size_t r = 0; r < rows; ++r) {
    samples.push_back(random_packed(config, rng, max_turns, max_turn_len, max_resp_len));
  }
  return collate(samples);
}

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  double max_abs_diff = 0;
  double scale = 0;
  double relative_error = 0;
};

// Central differences on a deterministic subset of entries per tensor: the
// entries with the largest analytic gradient plus a random spread. The
// relative error of a tensor is max|analytic - numeric| / max|numeric|.
inline std::vector<TensorCheck> gradient_check(const ModelParameters<double>& params,
                                               const Batch& batch, double h,
                                               std::size_t entries_per_tensor, std::uint64_t seed) {
  const auto trace = forward(batch, params);
  const auto grads = backward(trace, batch, params);
  ModelParameters<double> probe = params;
  auto probe_tensors = probe.tensors();
  const auto grad_tensors = grads.tensors();
  std::mt19937_64 rng(seed);
  std::vector<TensorCheck> out;
  for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
    Matrix<double>& w = *probe_tensors[t].second;
    const Matrix<double>& g = *grad_tensors[t].second;
    const auto n = static_cast<std::size_t>(w.size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::set<std::size_t> chosen;
    if (n <= entries_per_tensor) {
      chosen.insert(order.begin(), order.end());
    } else {
      const std::size_t top = entries_per_tensor / 2;
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                        [&](std::size_t a, std::size_t b) {
                          return std::abs(g.data()[a]) > std::abs(g.data()[b]);
                        });
      chosen.insert(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top));
      while (chosen.size() < entries_per_tensor) chosen.insert(rng() % n);
    }
    TensorCheck check;
    check.name = probe_tensors[t].first;
    for (std::size_t i : chosen) {
      const double saved = w.data()[i];
      w.data()[i] = saved + h;
      const double up = nll_loss(forward(batch, probe), batch).loss;
      w.data()[i] = saved - h;
      const double down = nll_loss(forward(batch, probe), batch).loss;
      w.data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      check.max_abs_diff = std::max(check.max_abs_diff, std::abs(numeric - g.data()[i]));
      check.scale = std::max(check.scale, std::abs(numeric));
      ++check.checked;
    }
    check.relative_error = check.scale > 0 ? check.max_abs_diff / check.scale : check.max_abs_diff;
    out.push_back(check);
  }
  return out;
}

// Eight five-comment threads: 32 samples, every context distinct.
inline std::vector<DialogueSample> toy_samples() {
  const auto records = read_comments(data_path("toy_comments.jsonl"));
  std::vector<DialogueSample> samples;
  for (const auto& tree : build_trees(records).trees) {
    for (auto& s : extract_samples(tree)) samples.push_back(std::move(s));
  }
  return samples;
}

inline Vocabulary toy_vocab(const std::vector<DialogueSample>& samples, std::size_t size = 256) {
  std::vector<std::string> texts;
  for (const auto& s : samples) {
    for (const auto& t : s.context) texts.push_back(t.text);
    texts.push_back(s.response.text);
  }
  return train_bpe(texts, size);
}

// Memorization run on the toy corpus: whole corpus in one batch per step.
inline TrainRunConfig overfit_run(std::size_t steps) {
  TrainRunConfig run;
  run.steps = steps;
  run.token_budget = 8192;
  run.eval_interval = 0;
  run.seed = 7;
  run.limits = PackLimits{96, 32};
  run.schedule.peak_lr = 3e-3;
  run.schedule.warmup_steps = std::min<std::size_t>(100, steps / 10);
  run.schedule.total_steps = steps;
  return run;
}

inline ModelConfig overfit_model(const Vocabulary& vocab) {
  ModelConfig model = desk_config();
  model.vocab_size = static_cast<int>(vocab.size());
  return model;
}

}  // namespace prefixchat::testing

#endif  // PREFIXCHAT_TESTS_SUPPORT_HPP_
