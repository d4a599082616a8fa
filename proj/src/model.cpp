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

#include "prefixchat/model.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <stdexcept>

namespace prefixchat {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (d_model < 1) fail("d_model must be >= 1");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (d_ff < 1) fail("d_ff must be >= 1");
  if (vocab_size <= static_cast<int>(Vocabulary::kNumSpecials)) fail("vocab_size must exceed the 4 specials");
  if (n_types < 2) fail("n_types must be >= 2");
  if (n_roles < 2) fail("n_roles must be >= 2");
  if (max_positions < 2) fail("max_positions must be >= 2");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},         {"n_heads", n_heads},     {"d_model", d_model},
          {"d_ff", d_ff},                 {"vocab_size", vocab_size}, {"n_types", n_types},
          {"n_roles", n_roles},           {"max_positions", max_positions},
          {"tie_embeddings", tie_embeddings}, {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.n_types = j.at("n_types").get<int>();
  c.n_roles = j.at("n_roles").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  c.init_seed = j.value("init_seed", std::uint64_t{0});
  c.validate();
  return c;
}

ModelConfig desk_config() { return ModelConfig{}; }

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kInitStd = 0.02;

std::uint64_t fnv_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Word-at-a-time variant for large tensors.
std::uint64_t fnv_words(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    std::uint64_t w;
    std::memcpy(&w, p + i, 8);
    h ^= w;
    h *= 0x100000001b3ULL;
  }
  return fnv_bytes(h, p + i, n - i);
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

template <typename Scalar>
Matrix<Scalar> row_vector(int n, Scalar value) {
  return Matrix<Scalar>::Constant(1, n, value);
}

template <typename Scalar>
void layer_norm(const Matrix<Scalar>& x, const Matrix<Scalar>& gain, const Matrix<Scalar>& bias,
                Matrix<Scalar>& hat, ColVector<Scalar>& rstd, Matrix<Scalar>& out) {
  const Eigen::Index d = x.cols();
  const ColVector<Scalar> mean = x.rowwise().mean();
  hat = x.colwise() - mean;
  rstd = ((hat.array().square().rowwise().sum() / static_cast<Scalar>(d)) + static_cast<Scalar>(kNormEps))
             .rsqrt()
             .matrix();
  hat = rstd.asDiagonal() * hat;
  out = (hat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

// Accumulates gain/bias gradients and returns dL/dx.
template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& dout, const Matrix<Scalar>& hat,
                                   const ColVector<Scalar>& rstd, const Matrix<Scalar>& gain,
                                   Matrix<Scalar>& dgain, Matrix<Scalar>& dbias) {
  dgain += (dout.array() * hat.array()).colwise().sum().matrix();
  dbias += dout.colwise().sum();
  const Matrix<Scalar> dhat = (dout.array().rowwise() * gain.row(0).array()).matrix();
  const ColVector<Scalar> mean_dhat = dhat.rowwise().mean();
  const ColVector<Scalar> mean_dhat_hat = (dhat.array() * hat.array()).rowwise().mean().matrix();
  Matrix<Scalar> dx = dhat;
  dx.colwise() -= mean_dhat;
  dx -= mean_dhat_hat.asDiagonal() * hat;
  return rstd.asDiagonal() * dx;
}

template <typename Scalar>
constexpr Scalar kGeluC = static_cast<Scalar>(0.7978845608028654);  // sqrt(2 / pi)
template <typename Scalar>
constexpr Scalar kGeluA = static_cast<Scalar>(0.044715);

template <typename Scalar>
Scalar gelu(Scalar x) {
  const Scalar u = kGeluC<Scalar> * (x + kGeluA<Scalar> * x * x * x);
  return static_cast<Scalar>(0.5) * x * (static_cast<Scalar>(1) + std::tanh(u));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar u = kGeluC<Scalar> * (x + kGeluA<Scalar> * x * x * x);
  const Scalar t = std::tanh(u);
  const Scalar du = kGeluC<Scalar> * (static_cast<Scalar>(1) + 3 * kGeluA<Scalar> * x * x);
  return static_cast<Scalar>(0.5) * (static_cast<Scalar>(1) + t) +
         static_cast<Scalar>(0.5) * x * (static_cast<Scalar>(1) - t * t) * du;
}

template <typename Scalar>
void check_finite(const Matrix<Scalar>& m, const std::string& where) {
  if (!m.allFinite()) throw std::runtime_error("non-finite activation in " + where);
}

template <typename Scalar>
RowTrace<Scalar> forward_row(const Batch& batch, std::size_t row,
                             const ModelParameters<Scalar>& params) {
  const ModelConfig& cfg = params.config;
  const Eigen::Index length = static_cast<Eigen::Index>(batch.row_length(row));
  const Eigen::Index d = cfg.d_model;
  const Eigen::Index dh = cfg.d_head();
  const Scalar scale = static_cast<Scalar>(1) / std::sqrt(static_cast<Scalar>(dh));
  const MaskMatrix mask = batch.attention_mask[row].topLeftCorner(length, length);

  RowTrace<Scalar> trace;
  Matrix<Scalar> x = embed(batch, row, params);
  check_finite(x, "embedding");

  trace.layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& p = params.layers[l];
    auto& c = trace.layers[l];
    c.input = x;
    layer_norm(x, p.ln1_gain, p.ln1_bias, c.ln1_hat, c.ln1_rstd, c.ln1_out);
    c.qkv = c.ln1_out * p.qkv_weight;
    c.qkv.rowwise() += p.qkv_bias.row(0);

    c.attn_concat.resize(length, d);
    c.attn_probs.resize(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto q = c.qkv.middleCols(h * dh, dh);
      const auto k = c.qkv.middleCols(d + h * dh, dh);
      const auto v = c.qkv.middleCols(2 * d + h * dh, dh);
      Matrix<Scalar> probs = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < length; ++i) {
        Scalar max = -std::numeric_limits<Scalar>::infinity();
        for (Eigen::Index j = 0; j < length; ++j) {
          if (mask(i, j)) max = std::max(max, probs(i, j));
        }
        Scalar sum = 0;
        for (Eigen::Index j = 0; j < length; ++j) {
          const Scalar e = mask(i, j) ? std::exp(probs(i, j) - max) : static_cast<Scalar>(0);
          probs(i, j) = e;
          sum += e;
        }
        if (sum > 0) probs.row(i) /= sum;
      }
      c.attn_concat.middleCols(h * dh, dh).noalias() = probs * v;
      c.attn_probs[static_cast<std::size_t>(h)] = std::move(probs);
    }
    c.mid = x + c.attn_concat * p.attn_out_weight;
    c.mid.rowwise() += p.attn_out_bias.row(0);

    layer_norm(c.mid, p.ln2_gain, p.ln2_bias, c.ln2_hat, c.ln2_rstd, c.ln2_out);
    c.ff_pre = c.ln2_out * p.ff_in_weight;
    c.ff_pre.rowwise() += p.ff_in_bias.row(0);
    c.ff_act = c.ff_pre.unaryExpr([](Scalar v) { return gelu(v); });
    x = c.mid + c.ff_act * p.ff_out_weight;
    x.rowwise() += p.ff_out_bias.row(0);
    check_finite(x, "layer " + std::to_string(l));
  }

  trace.final_input = x;
  layer_norm(x, params.final_norm_gain, params.final_norm_bias, trace.final_hat, trace.final_rstd,
             trace.final_out);
  if (cfg.tie_embeddings) {
    trace.logits.noalias() = trace.final_out * params.token_embedding.transpose();
  } else {
    trace.logits.noalias() = trace.final_out * params.output_weight;
  }
  check_finite(trace.logits, "output layer");
  return trace;
}

template <typename Scalar>
Scalar log_sum_exp(const Eigen::Ref<const Matrix<Scalar>>& row) {
  const Scalar max = row.maxCoeff();
  return max + std::log((row.array() - max).exp().sum());
}

}  // namespace

template <typename Scalar>
ModelParameters<Scalar> ModelParameters<Scalar>::zeros(const ModelConfig& config) {
  config.validate();
  const int d = config.d_model;
  ModelParameters p;
  p.config = config;
  p.token_embedding = Matrix<Scalar>::Zero(config.vocab_size, d);
  p.position_embedding = Matrix<Scalar>::Zero(config.max_positions, d);
  p.type_embedding = Matrix<Scalar>::Zero(config.n_types, d);
  p.role_embedding = Matrix<Scalar>::Zero(config.n_roles, d);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : p.layers) {
    layer.ln1_gain = row_vector<Scalar>(d, 0);
    layer.ln1_bias = row_vector<Scalar>(d, 0);
    layer.qkv_weight = Matrix<Scalar>::Zero(d, 3 * d);
    layer.qkv_bias = row_vector<Scalar>(3 * d, 0);
    layer.attn_out_weight = Matrix<Scalar>::Zero(d, d);
    layer.attn_out_bias = row_vector<Scalar>(d, 0);
    layer.ln2_gain = row_vector<Scalar>(d, 0);
    layer.ln2_bias = row_vector<Scalar>(d, 0);
    layer.ff_in_weight = Matrix<Scalar>::Zero(d, config.d_ff);
    layer.ff_in_bias = row_vector<Scalar>(config.d_ff, 0);
    layer.ff_out_weight = Matrix<Scalar>::Zero(config.d_ff, d);
    layer.ff_out_bias = row_vector<Scalar>(d, 0);
  }
  p.final_norm_gain = row_vector<Scalar>(d, 0);
  p.final_norm_bias = row_vector<Scalar>(d, 0);
  if (!config.tie_embeddings) p.output_weight = Matrix<Scalar>::Zero(d, config.vocab_size);
  return p;
}

template <typename Scalar>
std::vector<std::pair<std::string, Matrix<Scalar>*>> ModelParameters<Scalar>::tensors() {
  std::vector<std::pair<std::string, Matrix<Scalar>*>> out;
  for_each([&](const std::string& name, Matrix<Scalar>& t) { out.emplace_back(name, &t); });
  return out;
}

template <typename Scalar>
std::vector<std::pair<std::string, const Matrix<Scalar>*>> ModelParameters<Scalar>::tensors() const {
  std::vector<std::pair<std::string, const Matrix<Scalar>*>> out;
  for_each([&](const std::string& name, const Matrix<Scalar>& t) { out.emplace_back(name, &t); });
  return out;
}

template <typename Scalar>
std::size_t ModelParameters<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix<Scalar>& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

template <typename Scalar>
bool ModelParameters<Scalar>::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Matrix<Scalar>& t) { ok = ok && t.allFinite(); });
  return ok;
}

template <typename Scalar>
std::uint64_t ModelParameters<Scalar>::digest() const {
  std::uint64_t h = kFnvOffset;
  for_each([&](const std::string&, const Matrix<Scalar>& t) {
    h = fnv_words(h, t.data(), static_cast<std::size_t>(t.size()) * sizeof(Scalar));
  });
  return h;
}

template <typename Scalar>
template <typename Other>
ModelParameters<Other> ModelParameters<Scalar>::cast() const {
  ModelParameters<Other> out = ModelParameters<Other>::zeros(config);
  auto dst = out.tensors();
  auto src = tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<Other>();
  return out;
}

template <typename Scalar>
ModelParameters<Scalar> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParameters<Scalar> p = ModelParameters<Scalar>::zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_std = kInitStd / std::sqrt(2.0 * config.n_layers);
  auto fill = [&](Matrix<Scalar>& m, double std) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(std * normal(rng));
  };
  fill(p.token_embedding, kInitStd);
  fill(p.position_embedding, kInitStd);
  fill(p.type_embedding, kInitStd);
  fill(p.role_embedding, kInitStd);
  for (auto& layer : p.layers) {
    layer.ln1_gain.setOnes();
    layer.ln2_gain.setOnes();
    fill(layer.qkv_weight, kInitStd);
    fill(layer.attn_out_weight, residual_std);
    fill(layer.ff_in_weight, kInitStd);
    fill(layer.ff_out_weight, residual_std);
  }
  p.final_norm_gain.setOnes();
  if (!config.tie_embeddings) fill(p.output_weight, kInitStd);
  return p;
}

template <typename Scalar>
Matrix<Scalar> embed(const Batch& batch, std::size_t row, const ModelParameters<Scalar>& params) {
  const ModelConfig& cfg = params.config;
  const auto length = static_cast<Eigen::Index>(batch.row_length(row));
  const auto r = static_cast<Eigen::Index>(row);
  auto checked = [](std::int32_t id, int bound, const char* table) {
    if (id < 0 || id >= bound) {
      throw std::out_of_range(std::string(table) + " id " + std::to_string(id) +
                              " out of range [0, " + std::to_string(bound) + ")");
    }
    return static_cast<Eigen::Index>(id);
  };
  Matrix<Scalar> out(length, cfg.d_model);
  for (Eigen::Index l = 0; l < length; ++l) {
    out.row(l) = params.token_embedding.row(checked(batch.token_ids(r, l), cfg.vocab_size, "token")) +
                 params.position_embedding.row(
                     checked(batch.position_ids(r, l), cfg.max_positions, "position")) +
                 params.type_embedding.row(checked(batch.type_ids(r, l), cfg.n_types, "type")) +
                 params.role_embedding.row(checked(batch.role_ids(r, l), cfg.n_roles, "role"));
  }
  return out;
}

template <typename Scalar>
Scalar ForwardTrace<Scalar>::logit(std::size_t row, std::size_t position, TokenId token) const {
  const auto& logits = rows.at(row).logits;
  if (static_cast<Eigen::Index>(position) >= logits.rows()) return 0;
  return logits(static_cast<Eigen::Index>(position), token);
}

std::uint64_t batch_digest(const Batch& batch) {
  std::uint64_t h = kFnvOffset;
  for (const IdMatrix* m : {&batch.token_ids, &batch.position_ids, &batch.type_ids, &batch.role_ids,
                            &batch.loss_mask}) {
    h = fnv_words(h, m->data(), static_cast<std::size_t>(m->size()) * sizeof(std::int32_t));
  }
  for (const auto& mask : batch.attention_mask) {
    h = fnv_words(h, mask.data(), static_cast<std::size_t>(mask.size()));
  }
  for (const auto& [c, r] : batch.lengths) {
    h = fnv_bytes(h, &c, sizeof(c));
    h = fnv_bytes(h, &r, sizeof(r));
  }
  for (std::size_t n : batch.row_lengths) h = fnv_bytes(h, &n, sizeof(n));
  return h;
}

template <typename Scalar>
ForwardTrace<Scalar> forward(const Batch& batch, const ModelParameters<Scalar>& params) {
  if (batch.row_lengths.size() != batch.rows() || batch.attention_mask.size() != batch.rows()) {
    throw std::invalid_argument("batch: one length and one attention mask per row required");
  }
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    if (batch.row_lengths[r] > batch.max_len()) throw std::invalid_argument("batch: row longer than batch");
  }
  ForwardTrace<Scalar> trace;
  trace.max_len = batch.max_len();
  trace.params_digest = params.digest();
  trace.batch_digest = batch_digest(batch);
  trace.rows.reserve(batch.rows());
  for (std::size_t r = 0; r < batch.rows(); ++r) trace.rows.push_back(forward_row(batch, r, params));
  return trace;
}

template <typename Scalar>
LossResult<Scalar> nll_loss(const ForwardTrace<Scalar>& trace, const Batch& batch) {
  if (trace.rows.size() != batch.rows()) throw std::invalid_argument("trace does not match batch");
  LossResult<Scalar> result;
  result.per_token = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(batch.rows()),
                                          static_cast<Eigen::Index>(batch.max_len()));
  for (std::size_t b = 0; b < batch.rows(); ++b) {
    const auto row = static_cast<Eigen::Index>(b);
    const auto& logits = trace.rows[b].logits;
    const auto length = static_cast<Eigen::Index>(batch.row_length(b));
    for (Eigen::Index p = 0; p < length; ++p) {
      if (batch.loss_mask(row, p) == 0) continue;
      if (p == 0) throw std::invalid_argument("loss mask set on the first position");
      const Scalar nll = log_sum_exp<Scalar>(logits.row(p - 1)) - logits(p - 1, batch.token_ids(row, p));
      result.per_token(row, p) = nll;
      result.total += nll;
      ++result.count;
    }
  }
  if (result.count == 0) throw std::invalid_argument("loss mask is empty");
  result.loss = result.total / static_cast<Scalar>(result.count);
  return result;
}

template <typename Scalar>
ModelParameters<Scalar> backward(const ForwardTrace<Scalar>& trace, const Batch& batch,
                                 const ModelParameters<Scalar>& params, Scalar loss_scale) {
  if (trace.params_digest != params.digest() || trace.batch_digest != batch_digest(batch)) {
    throw std::logic_error("stale trace: forward was run on different parameters or batch");
  }
  const ModelConfig& cfg = params.config;
  const Eigen::Index d = cfg.d_model;
  const Eigen::Index dh = cfg.d_head();
  const Scalar scale = static_cast<Scalar>(1) / std::sqrt(static_cast<Scalar>(dh));

  std::size_t count = 0;
  for (std::size_t b = 0; b < batch.rows(); ++b) {
    for (std::size_t p = 0; p < batch.row_length(b); ++p) {
      count += batch.loss_mask(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(p)) != 0;
    }
  }
  if (count == 0) throw std::invalid_argument("loss mask is empty");
  const Scalar weight = loss_scale / static_cast<Scalar>(count);

  ModelParameters<Scalar> g = ModelParameters<Scalar>::zeros(cfg);
  for (std::size_t b = 0; b < batch.rows(); ++b) {
    const auto row = static_cast<Eigen::Index>(b);
    const RowTrace<Scalar>& t = trace.rows[b];
    const auto length = static_cast<Eigen::Index>(batch.row_length(b));

    Matrix<Scalar> dlogits = Matrix<Scalar>::Zero(length, t.logits.cols());
    bool any = false;
    for (Eigen::Index p = 1; p < length; ++p) {
      if (batch.loss_mask(row, p) == 0) continue;
      any = true;
      const auto logits = t.logits.row(p - 1);
      const Scalar lse = log_sum_exp<Scalar>(logits);
      dlogits.row(p - 1) = ((logits.array() - lse).exp() * weight).matrix();
      dlogits(p - 1, batch.token_ids(row, p)) -= weight;
    }
    if (!any) continue;

    Matrix<Scalar> dfinal;
    if (cfg.tie_embeddings) {
      dfinal.noalias() = dlogits * params.token_embedding;
      g.token_embedding.noalias() += dlogits.transpose() * t.final_out;
    } else {
      dfinal.noalias() = dlogits * params.output_weight.transpose();
      g.output_weight.noalias() += t.final_out.transpose() * dlogits;
    }
    Matrix<Scalar> dx = layer_norm_backward(dfinal, t.final_hat, t.final_rstd, params.final_norm_gain,
                                            g.final_norm_gain, g.final_norm_bias);

    for (std::size_t li = params.layers.size(); li-- > 0;) {
      const auto& p = params.layers[li];
      auto& gp = g.layers[li];
      const auto& c = t.layers[li];

      // Feedforward branch: x = mid + gelu(ln2(mid) W1 + b1) W2 + b2.
      gp.ff_out_weight.noalias() += c.ff_act.transpose() * dx;
      gp.ff_out_bias += dx.colwise().sum();
      Matrix<Scalar> dact = dx * p.ff_out_weight.transpose();
      const Matrix<Scalar> dpre =
          (dact.array() * c.ff_pre.unaryExpr([](Scalar v) { return gelu_grad(v); }).array()).matrix();
      gp.ff_in_weight.noalias() += c.ln2_out.transpose() * dpre;
      gp.ff_in_bias += dpre.colwise().sum();
      const Matrix<Scalar> dln2 = dpre * p.ff_in_weight.transpose();
      Matrix<Scalar> dmid = dx + layer_norm_backward(dln2, c.ln2_hat, c.ln2_rstd, p.ln2_gain,
                                                     gp.ln2_gain, gp.ln2_bias);

      // Attention branch: mid = x + attn(ln1(x)) Wo + bo.
      gp.attn_out_weight.noalias() += c.attn_concat.transpose() * dmid;
      gp.attn_out_bias += dmid.colwise().sum();
      const Matrix<Scalar> dconcat = dmid * p.attn_out_weight.transpose();
      Matrix<Scalar> dqkv(length, 3 * d);
      for (int h = 0; h < cfg.n_heads; ++h) {
        const auto q = c.qkv.middleCols(h * dh, dh);
        const auto k = c.qkv.middleCols(d + h * dh, dh);
        const auto v = c.qkv.middleCols(2 * d + h * dh, dh);
        const Matrix<Scalar>& probs = c.attn_probs[static_cast<std::size_t>(h)];
        const auto dout = dconcat.middleCols(h * dh, dh);
        const Matrix<Scalar> dprobs = dout * v.transpose();
        dqkv.middleCols(2 * d + h * dh, dh).noalias() = probs.transpose() * dout;
        const ColVector<Scalar> inner = (dprobs.array() * probs.array()).rowwise().sum().matrix();
        Matrix<Scalar> dscores = (probs.array() * (dprobs.colwise() - inner).array()).matrix() * scale;
        dqkv.middleCols(h * dh, dh).noalias() = dscores * k;
        dqkv.middleCols(d + h * dh, dh).noalias() = dscores.transpose() * q;
      }
      gp.qkv_weight.noalias() += c.ln1_out.transpose() * dqkv;
      gp.qkv_bias += dqkv.colwise().sum();
      const Matrix<Scalar> dln1 = dqkv * p.qkv_weight.transpose();
      dx = dmid + layer_norm_backward(dln1, c.ln1_hat, c.ln1_rstd, p.ln1_gain, gp.ln1_gain, gp.ln1_bias);
    }

    for (Eigen::Index l = 0; l < length; ++l) {
      g.token_embedding.row(batch.token_ids(row, l)) += dx.row(l);
      g.position_embedding.row(batch.position_ids(row, l)) += dx.row(l);
      g.type_embedding.row(batch.type_ids(row, l)) += dx.row(l);
      g.role_embedding.row(batch.role_ids(row, l)) += dx.row(l);
    }
  }
  return g;
}

#define PREFIXCHAT_INSTANTIATE(S)                                                                  \
  template struct ModelParameters<S>;                                                              \
  template ModelParameters<S> init_params<S>(const ModelConfig&, std::uint64_t);                   \
  template Matrix<S> embed<S>(const Batch&, std::size_t, const ModelParameters<S>&);               \
  template struct ForwardTrace<S>;                                                                 \
  template ForwardTrace<S> forward<S>(const Batch&, const ModelParameters<S>&);                    \
  template LossResult<S> nll_loss<S>(const ForwardTrace<S>&, const Batch&);                        \
  template ModelParameters<S> backward<S>(const ForwardTrace<S>&, const Batch&,                    \
                                          const ModelParameters<S>&, S);

PREFIXCHAT_INSTANTIATE(float)
PREFIXCHAT_INSTANTIATE(double)

#undef PREFIXCHAT_INSTANTIATE

template ModelParameters<double> ModelParameters<float>::cast<double>() const;
template ModelParameters<float> ModelParameters<double>::cast<float>() const;
template ModelParameters<float> ModelParameters<float>::cast<float>() const;
template ModelParameters<double> ModelParameters<double>::cast<double>() const;

}  // namespace prefixchat
