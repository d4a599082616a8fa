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

#ifndef PREFIXCHAT_MODEL_HPP_
#define PREFIXCHAT_MODEL_HPP_

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "prefixchat/batching.hpp"

namespace prefixchat {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 512;
  int n_types = 3;
  /// Role cap 8 plus role 0.
  int n_roles = kDefaultRoleCap + 1;
  int max_positions = 256;
  /// Output projection reuses the token embedding table when set.
  bool tie_embeddings = true;
  std::uint64_t init_seed = 0;

  /// Throws std::invalid_argument describing the first violation.
  void validate() const;
  int d_head() const { return d_model / n_heads; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Desk-scale architecture used by the tests.
ModelConfig desk_config();

/// Biases and norm parameters are stored as 1 x n matrices so every tensor
/// shares one type.
template <typename Scalar>
struct LayerParameters {
  Matrix<Scalar> ln1_gain, ln1_bias;
  Matrix<Scalar> qkv_weight, qkv_bias;  // d x 3d, 1 x 3d; columns are [Q | K | V]
  Matrix<Scalar> attn_out_weight, attn_out_bias;
  Matrix<Scalar> ln2_gain, ln2_bias;
  Matrix<Scalar> ff_in_weight, ff_in_bias;
  Matrix<Scalar> ff_out_weight, ff_out_bias;
};

template <typename Scalar>
struct ModelParameters {
  ModelConfig config;
  Matrix<Scalar> token_embedding;     // vocab x d
  Matrix<Scalar> position_embedding;  // max_positions x d
  Matrix<Scalar> type_embedding;      // n_types x d
  Matrix<Scalar> role_embedding;      // n_roles x d
  std::vector<LayerParameters<Scalar>> layers;
  Matrix<Scalar> final_norm_gain, final_norm_bias;
  /// d x vocab; empty when embeddings are tied.
  Matrix<Scalar> output_weight;

  /// All-zero tensors shaped for `config` (the gradient and moment layout).
  static ModelParameters zeros(const ModelConfig& config);

  /// Calls fn(name, tensor) for every tensor in a fixed order.
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  std::vector<std::pair<std::string, Matrix<Scalar>*>> tensors();
  std::vector<std::pair<std::string, const Matrix<Scalar>*>> tensors() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  /// FNV-1a over every tensor's bytes.
  std::uint64_t digest() const;

  template <typename Other>
  ModelParameters<Other> cast() const;

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn(std::string("token_embedding"), self.token_embedding);
    fn(std::string("position_embedding"), self.position_embedding);
    fn(std::string("type_embedding"), self.type_embedding);
    fn(std::string("role_embedding"), self.role_embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& layer = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      fn(p + "ln1_gain", layer.ln1_gain);
      fn(p + "ln1_bias", layer.ln1_bias);
      fn(p + "qkv_weight", layer.qkv_weight);
      fn(p + "qkv_bias", layer.qkv_bias);
      fn(p + "attn_out_weight", layer.attn_out_weight);
      fn(p + "attn_out_bias", layer.attn_out_bias);
      fn(p + "ln2_gain", layer.ln2_gain);
      fn(p + "ln2_bias", layer.ln2_bias);
      fn(p + "ff_in_weight", layer.ff_in_weight);
      fn(p + "ff_in_bias", layer.ff_in_bias);
      fn(p + "ff_out_weight", layer.ff_out_weight);
      fn(p + "ff_out_bias", layer.ff_out_bias);
    }
    fn(std::string("final_norm_gain"), self.final_norm_gain);
    fn(std::string("final_norm_bias"), self.final_norm_bias);
    if (!self.config.tie_embeddings) fn(std::string("output_weight"), self.output_weight);
  }
};

/// Gaussian init with std 0.02; attention-output and feedforward-output
/// projections use 0.02 / sqrt(2 * n_layers). Norm gains 1, biases 0.
template <typename Scalar>
ModelParameters<Scalar> init_params(const ModelConfig& config, std::uint64_t seed);

/// Sum of token, position, type and role embeddings for the valid positions
/// of one batch row (L_row x d). Throws std::out_of_range on a bad id.
template <typename Scalar>
Matrix<Scalar> embed(const Batch& batch, std::size_t row, const ModelParameters<Scalar>& params);

template <typename Scalar>
struct LayerCache {
  Matrix<Scalar> input;
  Matrix<Scalar> ln1_hat, ln1_out;
  ColVector<Scalar> ln1_rstd;
  Matrix<Scalar> qkv;
  std::vector<Matrix<Scalar>> attn_probs;  // per head, L x L
  Matrix<Scalar> attn_concat;
  Matrix<Scalar> mid;  // residual stream after attention
  Matrix<Scalar> ln2_hat, ln2_out;
  ColVector<Scalar> ln2_rstd;
  Matrix<Scalar> ff_pre, ff_act;
};

template <typename Scalar>
struct RowTrace {
  std::vector<LayerCache<Scalar>> layers;
  Matrix<Scalar> final_input;
  Matrix<Scalar> final_hat, final_out;
  ColVector<Scalar> final_rstd;
  /// L_row x vocab; positions past the row length are padding and absent.
  Matrix<Scalar> logits;
};

template <typename Scalar>
struct ForwardTrace {
  std::vector<RowTrace<Scalar>> rows;
  std::size_t max_len = 0;
  std::uint64_t params_digest = 0;
  std::uint64_t batch_digest = 0;

  /// Logit at (row, position, token); zero on padding positions.
  Scalar logit(std::size_t row, std::size_t position, TokenId token) const;
};

/// FNV-1a over the batch's id matrices and masks.
std::uint64_t batch_digest(const Batch& batch);

/// Pre-norm transformer with prefix-LM masking. Throws std::runtime_error
/// ("non-finite activation in layer k") on NaN/Inf.
template <typename Scalar>
ForwardTrace<Scalar> forward(const Batch& batch, const ModelParameters<Scalar>& params);

template <typename Scalar>
struct LossResult {
  /// Mean NLL in nats over loss-mask positions.
  Scalar loss = 0;
  Scalar total = 0;
  std::size_t count = 0;
  /// B x L_max; nonzero only where loss_mask is 1.
  Matrix<Scalar> per_token;
};

/// Each loss-mask position p is predicted from the logits at p - 1.
template <typename Scalar>
LossResult<Scalar> nll_loss(const ForwardTrace<Scalar>& trace, const Batch& batch);

/// Exact gradients of loss_scale * nll_loss. Throws std::logic_error when
/// the trace was produced from different parameters or a different batch.
template <typename Scalar>
ModelParameters<Scalar> backward(const ForwardTrace<Scalar>& trace, const Batch& batch,
                                 const ModelParameters<Scalar>& params, Scalar loss_scale = 1);

}  // namespace prefixchat

#endif  // PREFIXCHAT_MODEL_HPP_
