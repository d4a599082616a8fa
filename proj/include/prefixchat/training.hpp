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

#ifndef PREFIXCHAT_TRAINING_HPP_
#define PREFIXCHAT_TRAINING_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prefixchat/batching.hpp"
#include "prefixchat/checkpoint.hpp"
#include "prefixchat/corpus.hpp"
#include "prefixchat/model.hpp"
#include "prefixchat/tokenizer.hpp"

namespace prefixchat {

/// Linear warmup from 0 to peak over warmup_steps, then linear decay to 0
/// at total_steps.
struct Schedule {
  double peak_lr = 8e-5;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 2000;

  void validate() const;
};

double lr_at(std::size_t step, const Schedule& schedule);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global L2 norm cap; 0 disables clipping.
  double grad_clip = 1.0;
};

template <typename Scalar>
struct OptimizerState {
  ModelParameters<Scalar> first_moment;
  ModelParameters<Scalar> second_moment;
  /// Applied updates so far.
  std::size_t step = 0;
  /// Updates skipped because of non-finite gradients.
  std::size_t skipped = 0;
  AdamConfig adam;
  Schedule schedule;

  static OptimizerState create(const ModelParameters<Scalar>& params, const AdamConfig& adam,
                               const Schedule& schedule);
};

struct StepOutcome {
  bool applied = false;
  double lr = 0;
  /// Global gradient norm before clipping.
  double grad_norm = 0;
};

/// Bias-corrected Adam update at an explicit learning rate. Non-finite
/// gradients skip the update and bump `skipped`.
template <typename Scalar>
StepOutcome adam_step(ModelParameters<Scalar>& params, const ModelParameters<Scalar>& grads,
                      OptimizerState<Scalar>& state, double lr);

/// Same, with lr_at(state.step + 1).
template <typename Scalar>
StepOutcome adam_step(ModelParameters<Scalar>& params, const ModelParameters<Scalar>& grads,
                      OptimizerState<Scalar>& state);

struct TrainRunConfig {
  std::size_t token_budget = 8192;
  /// Stop once this many batch tokens were consumed; 0 means no limit.
  std::uint64_t total_train_tokens = 0;
  std::size_t steps = 2000;
  std::size_t eval_interval = 100;
  /// 0 writes only the final checkpoint.
  std::size_t checkpoint_interval = 0;
  std::uint64_t seed = 1;
  std::string checkpoint_dir;
  PackLimits limits;
  AdamConfig adam;
  Schedule schedule;

  void validate() const;
};

struct MetricsRow {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double tokens_per_s = 0;
  double pad_ratio = 0;
};

std::string metrics_csv_header();
std::string format_metrics_row(const MetricsRow& row);

/// Single-process training loop over length-grouped batches. Step s uses
/// batch (s mod B) of the permutation drawn for epoch s / B, so the data
/// order depends only on the seed and the step count.
class Trainer {
 public:
  Trainer(TrainRunConfig run, ModelConfig model, Vocabulary vocab,
          std::span<const DialogueSample> corpus);

  /// One optimizer step on the next batch; returns its telemetry.
  MetricsRow step();

  /// Token-weighted mean NLL over every packed sample at the current
  /// parameters.
  double evaluate() const;

  std::size_t steps_done() const { return optimizer_.step + optimizer_.skipped; }
  std::uint64_t tokens_seen() const { return tokens_seen_; }
  const ModelParameters<float>& params() const { return params_; }
  const OptimizerState<float>& optimizer() const { return optimizer_; }
  const GroupedBatches& batches() const { return grouped_; }
  const std::vector<PackedSample>& packed() const { return packed_; }
  std::size_t dropped_samples() const { return dropped_; }
  const Vocabulary& vocab() const { return vocab_; }

  /// Parameters, moments, counters and the vocabulary.
  Checkpoint checkpoint() const;
  /// Restores state saved by checkpoint(); configs must match.
  void restore(const Checkpoint& checkpoint);

 private:
  const Batch& batch_for_step(std::size_t step);

  TrainRunConfig run_;
  Vocabulary vocab_;
  ModelParameters<float> params_;
  OptimizerState<float> optimizer_;
  std::vector<PackedSample> packed_;
  GroupedBatches grouped_;
  std::size_t dropped_ = 0;
  std::uint64_t tokens_seen_ = 0;
  std::size_t order_epoch_ = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order_;
};

struct TrainResult {
  std::vector<MetricsRow> log;
  std::string final_checkpoint;
  double final_eval_loss = 0;
};

/// Runs until run.steps (or the token limit), writing metrics.csv,
/// eval.csv, periodic step_<n>.ckpt files and final.ckpt to
/// run.checkpoint_dir. `on_step` sees each logged row.
TrainResult train(const TrainRunConfig& run, const ModelConfig& model, const Vocabulary& vocab,
                  std::span<const DialogueSample> corpus, const std::string& resume_from = "",
                  const std::function<void(const MetricsRow&)>& on_step = {});

}  // namespace prefixchat

#endif  // PREFIXCHAT_TRAINING_HPP_
