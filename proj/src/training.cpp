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

#include "prefixchat/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace prefixchat {

void Schedule::validate() const {
  if (!(peak_lr > 0)) throw std::invalid_argument("schedule: peak_lr must be positive");
  if (warmup_steps >= total_steps) {
    throw std::invalid_argument("schedule: warmup_steps (" + std::to_string(warmup_steps) +
                                ") must be smaller than total_steps (" +
                                std::to_string(total_steps) + ")");
  }
}

double lr_at(std::size_t step, const Schedule& schedule) {
  schedule.validate();
  if (step <= schedule.warmup_steps) {
    if (schedule.warmup_steps == 0) return schedule.peak_lr;
    return schedule.peak_lr *
           (static_cast<double>(step) / static_cast<double>(schedule.warmup_steps));
  }
  if (step >= schedule.total_steps) return 0.0;
  return schedule.peak_lr * (static_cast<double>(schedule.total_steps - step) /
                             static_cast<double>(schedule.total_steps - schedule.warmup_steps));
}

template <typename Scalar>
OptimizerState<Scalar> OptimizerState<Scalar>::create(const ModelParameters<Scalar>& params,
                                                       const AdamConfig& adam,
                                                       const Schedule& schedule) {
  OptimizerState state;
  state.first_moment = ModelParameters<Scalar>::zeros(params.config);
  state.second_moment = ModelParameters<Scalar>::zeros(params.config);
  state.adam = adam;
  state.schedule = schedule;
  return state;
}

template <typename Scalar>
StepOutcome adam_step(ModelParameters<Scalar>& params, const ModelParameters<Scalar>& grads,
                      OptimizerState<Scalar>& state, double lr) {
  auto p = params.tensors();
  const auto g = grads.tensors();
  auto m = state.first_moment.tensors();
  auto v = state.second_moment.tensors();
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    throw std::invalid_argument("adam_step: tensor count mismatch");
  }
  double sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& pi = *p[i].second;
    for (const auto* other : {g[i].second, static_cast<const Matrix<Scalar>*>(m[i].second),
                              static_cast<const Matrix<Scalar>*>(v[i].second)}) {
      if (other->rows() != pi.rows() || other->cols() != pi.cols()) {
        throw std::invalid_argument("adam_step: shape mismatch for " + p[i].first);
      }
    }
    sq += g[i].second->template cast<double>().squaredNorm();
  }
  StepOutcome outcome;
  outcome.lr = lr;
  outcome.grad_norm = std::sqrt(sq);
  if (!std::isfinite(outcome.grad_norm)) {
    ++state.skipped;
    return outcome;
  }

  const AdamConfig& h = state.adam;
  const double clip = (h.grad_clip > 0 && outcome.grad_norm > h.grad_clip)
                          ? h.grad_clip / outcome.grad_norm
                          : 1.0;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const auto b1 = static_cast<Scalar>(h.beta1);
  const auto b2 = static_cast<Scalar>(h.beta2);
  const auto step_size = static_cast<Scalar>(lr / (1.0 - std::pow(h.beta1, t)));
  const auto bias2 = static_cast<Scalar>(1.0 / (1.0 - std::pow(h.beta2, t)));
  const auto eps = static_cast<Scalar>(h.eps);
  const auto scale = static_cast<Scalar>(clip);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto grad = (g[i].second->array() * scale);
    auto mi = m[i].second->array();
    auto vi = v[i].second->array();
    mi = b1 * mi + (static_cast<Scalar>(1) - b1) * grad;
    vi = b2 * vi + (static_cast<Scalar>(1) - b2) * grad.square();
    p[i].second->array() -= step_size * mi / ((vi * bias2).sqrt() + eps);
  }
  outcome.applied = true;
  return outcome;
}

template <typename Scalar>
StepOutcome adam_step(ModelParameters<Scalar>& params, const ModelParameters<Scalar>& grads,
                      OptimizerState<Scalar>& state) {
  return adam_step(params, grads, state, lr_at(state.step + 1, state.schedule));
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template StepOutcome adam_step<float>(ModelParameters<float>&, const ModelParameters<float>&,
                                      OptimizerState<float>&, double);
template StepOutcome adam_step<double>(ModelParameters<double>&, const ModelParameters<double>&,
                                       OptimizerState<double>&, double);
template StepOutcome adam_step<float>(ModelParameters<float>&, const ModelParameters<float>&,
                                      OptimizerState<float>&);
template StepOutcome adam_step<double>(ModelParameters<double>&, const ModelParameters<double>&,
                                       OptimizerState<double>&);

void TrainRunConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (token_budget == 0) fail("token_budget must be positive");
  if (steps == 0) fail("steps must be positive");
  if (limits.max_ctx == 0 || limits.max_resp == 0) fail("max_ctx and max_resp must be positive");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1)) fail("beta1 must lie in [0, 1)");
  if (!(adam.beta2 >= 0 && adam.beta2 < 1)) fail("beta2 must lie in [0, 1)");
  if (!(adam.eps > 0)) fail("eps must be positive");
  if (!(adam.grad_clip >= 0)) fail("grad_clip must be >= 0");
  schedule.validate();
}

std::string metrics_csv_header() { return "step,lr,loss,tokens_per_s,pad_ratio"; }

std::string format_metrics_row(const MetricsRow& row) {
  std::ostringstream out;
  out << row.step << ',' << std::setprecision(9) << row.lr << ',' << std::setprecision(9)
      << row.loss << ',' << std::fixed << std::setprecision(1) << row.tokens_per_s << ','
      << std::setprecision(6) << row.pad_ratio;
  return out.str();
}

Trainer::Trainer(TrainRunConfig run, ModelConfig model, Vocabulary vocab,
                 std::span<const DialogueSample> corpus)
    : run_(std::move(run)), vocab_(std::move(vocab)) {
  run_.validate();
  if (model.vocab_size < static_cast<int>(vocab_.size())) {
    throw std::invalid_argument("model vocab_size " + std::to_string(model.vocab_size) +
                                " is smaller than the vocabulary (" +
                                std::to_string(vocab_.size()) + ")");
  }
  if (run_.limits.max_ctx + run_.limits.max_resp + 1 > static_cast<std::size_t>(model.max_positions)) {
    throw std::invalid_argument("max_ctx + max_resp + 1 exceeds max_positions");
  }
  model.init_seed = run_.seed;
  model.validate();

  for (const auto& sample : corpus) {
    try {
      const DialogueSample roled = sample.role_ids.size() == sample.context.size() + 1
                                       ? sample
                                       : assign_roles(sample, model.n_roles - 1);
      PackedSample packed = pack(roled, vocab_, run_.limits);
      for (auto& role : packed.role_ids) role = std::min(role, model.n_roles - 1);
      packed_.push_back(std::move(packed));
    } catch (const std::invalid_argument&) {
      ++dropped_;
    }
  }
  if (packed_.empty()) throw std::invalid_argument("empty corpus: no sample survived packing");
  grouped_ = group_by_length(packed_, run_.token_budget);
  params_ = init_params<float>(model, run_.seed);
  optimizer_ = OptimizerState<float>::create(params_, run_.adam, run_.schedule);
}

const Batch& Trainer::batch_for_step(std::size_t step) {
  const std::size_t count = grouped_.batches.size();
  const std::size_t epoch = step / count;
  if (epoch != order_epoch_) {
    order_.resize(count);
    std::iota(order_.begin(), order_.end(), 0);
    std::mt19937_64 rng(run_.seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
    std::shuffle(order_.begin(), order_.end(), rng);
    order_epoch_ = epoch;
  }
  return grouped_.batches[order_[step % count]];
}

MetricsRow Trainer::step() {
  const Batch& batch = batch_for_step(steps_done());
  const auto start = std::chrono::steady_clock::now();
  const auto trace = forward(batch, params_);
  const auto loss = nll_loss(trace, batch);
  const auto grads = backward(trace, batch, params_);
  const StepOutcome outcome = adam_step(params_, grads, optimizer_);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const std::size_t slots = batch.rows() * batch.max_len();
  const std::size_t tokens = slots - batch.pad_count;
  tokens_seen_ += tokens;
  MetricsRow row;
  row.step = steps_done();
  row.lr = outcome.lr;
  row.loss = static_cast<double>(loss.loss);
  row.tokens_per_s = seconds > 0 ? static_cast<double>(tokens) / seconds : 0.0;
  row.pad_ratio = slots == 0 ? 0.0 : static_cast<double>(batch.pad_count) / static_cast<double>(slots);
  return row;
}

double Trainer::evaluate() const {
  double total = 0;
  std::size_t count = 0;
  for (const Batch& batch : grouped_.batches) {
    const auto loss = nll_loss(forward(batch, params_), batch);
    total += static_cast<double>(loss.total);
    count += loss.count;
  }
  return total / static_cast<double>(count);
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint checkpoint = make_model_checkpoint(params_, vocab_);
  checkpoint.header["train"] = {{"step", optimizer_.step},
                                {"skipped", optimizer_.skipped},
                                {"tokens_seen", tokens_seen_},
                                {"seed", run_.seed}};
  checkpoint.header["limits"] = {{"max_ctx", run_.limits.max_ctx}, {"max_resp", run_.limits.max_resp}};
  append_tensors(checkpoint, optimizer_.first_moment, "adam.m.");
  append_tensors(checkpoint, optimizer_.second_moment, "adam.v.");
  return checkpoint;
}

void Trainer::restore(const Checkpoint& checkpoint) {
  const ModelConfig saved = ModelConfig::from_json(checkpoint.header.at("model"));
  if (!(saved == params_.config)) throw std::invalid_argument("checkpoint model config differs from run");
  if (!checkpoint.header.contains("train")) throw std::invalid_argument("checkpoint has no training state");
  const auto& state = checkpoint.header.at("train");
  if (state.at("seed").get<std::uint64_t>() != run_.seed) {
    throw std::invalid_argument("checkpoint seed differs from run seed");
  }
  load_tensors(checkpoint, params_);
  load_tensors(checkpoint, optimizer_.first_moment, "adam.m.");
  load_tensors(checkpoint, optimizer_.second_moment, "adam.v.");
  optimizer_.step = state.at("step").get<std::size_t>();
  optimizer_.skipped = state.at("skipped").get<std::size_t>();
  tokens_seen_ = state.at("tokens_seen").get<std::uint64_t>();
}

TrainResult train(const TrainRunConfig& run, const ModelConfig& model, const Vocabulary& vocab,
                  std::span<const DialogueSample> corpus, const std::string& resume_from,
                  const std::function<void(const MetricsRow&)>& on_step) {
  namespace fs = std::filesystem;
  if (run.checkpoint_dir.empty()) throw std::invalid_argument("train: checkpoint directory not set");
  std::error_code ec;
  fs::create_directories(run.checkpoint_dir, ec);
  const fs::path dir(run.checkpoint_dir);
  const bool resuming = !resume_from.empty();
  std::ofstream metrics(dir / "metrics.csv", resuming ? std::ios::app : std::ios::trunc);
  std::ofstream evals(dir / "eval.csv", resuming ? std::ios::app : std::ios::trunc);
  if (!metrics || !evals) {
    throw std::runtime_error("checkpoint directory '" + run.checkpoint_dir + "' is not writable");
  }

  Trainer trainer(run, model, vocab, corpus);
  if (resuming) trainer.restore(read_checkpoint(resume_from));
  if (!resuming) {
    metrics << metrics_csv_header() << '\n';
    evals << "step,eval_loss\n";
  }

  TrainResult result;
  while (trainer.steps_done() < run.steps &&
         (run.total_train_tokens == 0 || trainer.tokens_seen() < run.total_train_tokens)) {
    const MetricsRow row = trainer.step();
    metrics << format_metrics_row(row) << '\n';
    result.log.push_back(row);
    if (on_step) on_step(row);
    if (run.eval_interval > 0 && row.step % run.eval_interval == 0) {
      evals << row.step << ',' << std::setprecision(9) << trainer.evaluate() << '\n';
    }
    if (run.checkpoint_interval > 0 && row.step % run.checkpoint_interval == 0) {
      write_checkpoint((dir / ("step_" + std::to_string(row.step) + ".ckpt")).string(),
                       trainer.checkpoint());
    }
  }
  metrics.flush();
  result.final_checkpoint = (dir / "final.ckpt").string();
  write_checkpoint(result.final_checkpoint, trainer.checkpoint());
  result.final_eval_loss = trainer.evaluate();
  return result;
}

}  // namespace prefixchat
