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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "prefixchat/checkpoint.hpp"
#include "support.hpp"

namespace prefixchat {
namespace {

using testing::random_batch;

double max_abs_diff(const Matrix<double>& a, const Matrix<double>& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

double sample_std(const std::vector<const Matrix<double>*>& tensors) {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto* t : tensors) {
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      sum += t->data()[i];
      sq += t->data()[i] * t->data()[i];
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  return std::sqrt(sq / static_cast<double>(n) - mean * mean);
}

TEST(ModelConfig, Validation) {
  EXPECT_NO_THROW(desk_config().validate());
  ModelConfig bad = desk_config();
  bad.d_model = 65;
  try {
    bad.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos);
  }
  ModelConfig one_role = desk_config();
  one_role.n_roles = 1;
  EXPECT_THROW(one_role.validate(), std::invalid_argument);

  ModelConfig large;
  large.n_layers = 72;
  large.n_heads = 32;
  large.d_model = 3072;
  large.d_ff = 18432;
  large.vocab_size = 30000;
  large.max_positions = 1024;
  EXPECT_NO_THROW(large.validate());
  EXPECT_EQ(ModelConfig::from_json(large.to_json()), large);
  EXPECT_THROW(init_params<float>(bad, 1), std::invalid_argument);
}

TEST(InitParams, DeterministicAndSeedSensitive) {
  const auto a = init_params<double>(desk_config(), 42);
  const auto b = init_params<double>(desk_config(), 42);
  const auto c = init_params<double>(desk_config(), 43);
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_EQ(a.token_embedding, b.token_embedding);
  EXPECT_NE(a.digest(), c.digest());
}

TEST(InitParams, ScaledResidualProjections) {
  ModelConfig config = desk_config();
  config.d_model = 128;
  config.d_ff = 512;
  const auto p = init_params<double>(config, 5);
  std::vector<const Matrix<double>*> residual, plain;
  std::size_t residual_draws = 0;
  for (const auto& layer : p.layers) {
    residual.push_back(&layer.attn_out_weight);
    residual.push_back(&layer.ff_out_weight);
    residual_draws += static_cast<std::size_t>(layer.attn_out_weight.size() + layer.ff_out_weight.size());
    plain.push_back(&layer.qkv_weight);
    plain.push_back(&layer.ff_in_weight);
    EXPECT_TRUE((layer.ln1_gain.array() == 1).all());
    EXPECT_TRUE((layer.ln2_bias.array() == 0).all());
    EXPECT_TRUE((layer.qkv_bias.array() == 0).all());
  }
  plain.push_back(&p.token_embedding);
  ASSERT_GE(residual_draws, 100000u);
  const double expected = 0.02 / std::sqrt(2.0 * config.n_layers);
  EXPECT_NEAR(expected, 0.01, 1e-15);
  EXPECT_NEAR(sample_std(residual), expected, 0.05 * expected);
  EXPECT_NEAR(sample_std(plain), 0.02, 0.05 * 0.02);
}

TEST(Embed, Additivity) {
  std::mt19937_64 rng(1);
  const ModelConfig config = desk_config();
  const Batch batch = random_batch(config, rng, 1);
  const auto zero = ModelParameters<double>::zeros(config);
  EXPECT_EQ(embed(batch, 0, zero).cwiseAbs().maxCoeff(), 0.0);

  const auto p = init_params<double>(config, 3);
  const Matrix<double> x = embed(batch, 0, p);
  for (Eigen::Index l = 0; l < x.rows(); ++l) {
    const Matrix<double> want = p.token_embedding.row(batch.token_ids(0, l)) +
                                p.position_embedding.row(batch.position_ids(0, l)) +
                                p.type_embedding.row(batch.type_ids(0, l)) +
                                p.role_embedding.row(batch.role_ids(0, l));
    EXPECT_LT(max_abs_diff(x.row(l), want), 1e-15);
  }
}

TEST(Embed, RoleProbes) {
  std::mt19937_64 rng(2);
  const ModelConfig config = desk_config();
  const Batch batch = random_batch(config, rng, 1, 4, 3, 4);
  auto only_role = ModelParameters<double>::zeros(config);
  only_role.role_embedding = init_params<double>(config, 9).role_embedding;
  const Matrix<double> x = embed(batch, 0, only_role);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      if (batch.role_ids(0, i) == batch.role_ids(0, j)) EXPECT_EQ(x.row(i), x.row(j));
    }
  }

  // Nudging the role-0 vector moves exactly the role-0 positions, by the nudge.
  const auto p = init_params<double>(config, 4);
  auto nudged = p;
  nudged.role_embedding(0, 5) += 1e-3;
  const Matrix<double> delta = (embed(batch, 0, nudged) - embed(batch, 0, p)) / 1e-3;
  for (Eigen::Index l = 0; l < delta.rows(); ++l) {
    const bool role0 = batch.role_ids(0, l) == 0;
    for (Eigen::Index k = 0; k < delta.cols(); ++k) {
      EXPECT_NEAR(delta(l, k), role0 && k == 5 ? 1.0 : 0.0, 1e-9);
    }
  }
}

TEST(Embed, OutOfRangeIds) {
  std::mt19937_64 rng(3);
  const ModelConfig config = desk_config();
  Batch batch = random_batch(config, rng, 1);
  const auto p = init_params<double>(config, 1);
  batch.role_ids(0, 0) = config.n_roles;
  EXPECT_THROW(embed(batch, 0, p), std::out_of_range);
  batch.role_ids(0, 0) = 0;
  batch.token_ids(0, 0) = config.vocab_size;
  EXPECT_THROW(forward(batch, p), std::out_of_range);
}

TEST(Forward, SingleContextToken) {
  const ModelConfig config = desk_config();
  Batch batch;
  batch.token_ids = IdMatrix::Constant(1, 1, 7);
  batch.position_ids = IdMatrix::Zero(1, 1);
  batch.type_ids = IdMatrix::Zero(1, 1);
  batch.role_ids = IdMatrix::Constant(1, 1, 1);
  batch.loss_mask = IdMatrix::Zero(1, 1);
  batch.attention_mask = {build_prefix_mask(1, 0)};
  batch.lengths = {{1, 0}};
  batch.row_lengths = {1};
  batch.sample_index = {0};
  const auto trace = forward(batch, init_params<double>(config, 1));
  ASSERT_EQ(trace.rows.size(), 1u);
  EXPECT_EQ(trace.rows[0].logits.rows(), 1);
  EXPECT_EQ(trace.rows[0].logits.cols(), config.vocab_size);
}

TEST(Forward, BitReproducible) {
  std::mt19937_64 rng(4);
  const Batch batch = random_batch(desk_config(), rng, 3);
  const auto p = init_params<float>(desk_config(), 2);
  const auto a = forward(batch, p);
  const auto b = forward(batch, p);
  for (std::size_t r = 0; r < batch.rows(); ++r) EXPECT_EQ(a.rows[r].logits, b.rows[r].logits);
}

TEST(Forward, PrefixCausality) {
  std::mt19937_64 rng(5);
  const ModelConfig config = desk_config();
  const auto p = init_params<double>(config, 6);
  for (int trial = 0; trial < 4; ++trial) {
    const Batch batch = random_batch(config, rng, 1, 3, 4, 6);
    const auto base = forward(batch, p);
    const std::size_t c = batch.lengths[0].first;
    const std::size_t length = batch.row_length(0);
    for (std::size_t t = 0; t < length; ++t) {
      Batch changed = batch;
      const auto col = static_cast<Eigen::Index>(t);
      changed.token_ids(0, col) = 4 + (batch.token_ids(0, col) + 1 - 4) % (config.vocab_size - 4);
      const auto probe = forward(changed, p);
      const Matrix<double> diff = (probe.rows[0].logits - base.rows[0].logits).cwiseAbs();
      if (t >= c) {
        // A response-span token is invisible to every earlier position.
        for (std::size_t q = 0; q < t; ++q) {
          EXPECT_EQ(diff.row(static_cast<Eigen::Index>(q)).maxCoeff(), 0.0) << "t=" << t << " q=" << q;
        }
        EXPECT_GT(diff.row(col).maxCoeff(), 0.0);
      } else {
        // Context tokens reach every position, including earlier context ones.
        for (std::size_t q = 0; q < length; ++q) {
          EXPECT_GT(diff.row(static_cast<Eigen::Index>(q)).maxCoeff(), 0.0) << "t=" << t << " q=" << q;
        }
      }
    }
  }
}

TEST(Forward, PadInertness) {
  std::mt19937_64 rng(7);
  const ModelConfig config = desk_config();
  const auto p = init_params<double>(config, 8);
  const Batch batch = random_batch(config, rng, 4, 3, 5, 6);
  const auto base_trace = forward(batch, p);
  const auto base_loss = nll_loss(base_trace, batch);
  const auto base_grad = backward(base_trace, batch, p);
  Batch changed = batch;
  std::size_t touched = 0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    for (std::size_t l = batch.row_length(r); l < batch.max_len(); ++l) {
      changed.token_ids(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(l)) = 100 + static_cast<int>(l);
      ++touched;
    }
  }
  ASSERT_GT(touched, 0u);
  const auto trace = forward(changed, p);
  EXPECT_EQ(nll_loss(trace, changed).loss, base_loss.loss);
  const auto grad = backward(trace, changed, p);
  const auto a = grad.tensors();
  const auto b = base_grad.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second) << a[i].first;
}

TEST(Forward, NonFiniteActivationNamesTheLayer) {
  std::mt19937_64 rng(8);
  const Batch batch = random_batch(desk_config(), rng, 1);
  auto p = init_params<double>(desk_config(), 1);
  p.layers[1].ff_in_bias(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    forward(batch, p);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite activation in layer 1"), std::string::npos) << e.what();
  }
}

TEST(NllLoss, UniformLogits) {
  std::mt19937_64 rng(9);
  const ModelConfig config = desk_config();
  const Batch batch = random_batch(config, rng, 3);
  const auto zero = ModelParameters<double>::zeros(config);
  const auto loss = nll_loss(forward(batch, zero), batch);
  EXPECT_NEAR(loss.loss, std::log(512.0), 1e-12);
  EXPECT_NEAR(std::log(512.0), 6.238, 1e-3);
  EXPECT_EQ(loss.count, batch.loss_tokens());
}

TEST(NllLoss, SpikeOnTargetsGivesZero) {
  std::mt19937_64 rng(10);
  const ModelConfig config = desk_config();
  const Batch batch = random_batch(config, rng, 2);
  auto trace = forward(batch, init_params<double>(config, 1));
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto& logits = trace.rows[r].logits;
    logits.setZero();
    for (std::size_t l = 1; l < batch.row_length(r); ++l) {
      logits(static_cast<Eigen::Index>(l - 1), batch.token_ids(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(l))) = 1e4;
    }
  }
  EXPECT_LT(nll_loss(trace, batch).loss, 1e-12);
}

TEST(NllLoss, MatchesIndependentOracle) {
  std::mt19937_64 rng(11);
  const ModelConfig config = desk_config();
  const Batch batch = random_batch(config, rng, 4, 3, 5, 7);
  const auto trace = forward(batch, init_params<double>(config, 12));
  const auto loss = nll_loss(trace, batch);

  long double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const std::size_t c = batch.lengths[r].first;
    // Targets: every response token and the closing EOS, each read from
    // the logits one position earlier.
    for (std::size_t target = c + 1; target < batch.row_length(r); ++target) {
      const auto& row = trace.rows[r].logits;
      const auto prev = static_cast<Eigen::Index>(target - 1);
      long double m = -1e300L;
      for (Eigen::Index v = 0; v < row.cols(); ++v) m = std::max<long double>(m, row(prev, v));
      long double z = 0;
      for (Eigen::Index v = 0; v < row.cols(); ++v) z += std::exp(static_cast<long double>(row(prev, v)) - m);
      const auto id = batch.token_ids(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(target));
      total += -(static_cast<long double>(row(prev, id)) - m - std::log(z));
      ++count;
    }
  }
  EXPECT_EQ(count, loss.count);
  EXPECT_NEAR(loss.loss, static_cast<double>(total / count), 1e-6);
  // Context positions never carry a loss term.
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    for (std::size_t l = 0; l <= batch.lengths[r].first; ++l) {
      EXPECT_EQ(loss.per_token(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(l)), 0.0);
    }
  }
  Batch empty = batch;
  empty.loss_mask.setZero();
  EXPECT_THROW(nll_loss(trace, empty), std::invalid_argument);
}

TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  for (const bool tied : {true, false}) {
    ModelConfig config = desk_config();
    config.tie_embeddings = tied;
    const Batch batch = random_batch(config, rng, 2, 2, 4, 5);
    const auto p = init_params<double>(config, 14);
    for (const auto& check : testing::gradient_check(p, batch, 1e-3, 24, 15)) {
      EXPECT_LT(check.relative_error, 1e-4) << check.name << (tied ? " (tied)" : " (untied)");
    }
  }
}

TEST(Backward, MaskedRowContributesNothing) {
  std::mt19937_64 rng(16);
  const ModelConfig config = desk_config();
  const auto p = init_params<double>(config, 17);
  const PackedSample a = testing::random_packed(config, rng, 2, 4, 5);
  PackedSample b = testing::random_packed(config, rng, 2, 4, 5);
  std::fill(b.loss_mask.begin(), b.loss_mask.end(), 0);
  const std::vector<PackedSample> both = {a, b};
  const std::vector<PackedSample> alone = {a};
  const Batch batch_both = collate(both);
  const Batch batch_alone = collate(alone);
  const auto g_both = backward(forward(batch_both, p), batch_both, p);
  const auto g_alone = backward(forward(batch_alone, p), batch_alone, p);
  const auto x = g_both.tensors();
  const auto y = g_alone.tensors();
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LT(max_abs_diff(*x[i].second, *y[i].second), 1e-12) << x[i].first;
  }
}

TEST(Backward, LinearInLossScaleAndStaleTraceRejected) {
  std::mt19937_64 rng(18);
  const ModelConfig config = desk_config();
  const Batch batch = random_batch(config, rng, 2);
  const auto p = init_params<double>(config, 19);
  const auto trace = forward(batch, p);
  const auto g1 = backward(trace, batch, p);
  const auto g2 = backward(trace, batch, p, 2.0);
  const auto x = g1.tensors();
  const auto y = g2.tensors();
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LT(max_abs_diff(2.0 * *x[i].second, *y[i].second), 1e-14) << x[i].first;
  }

  auto moved = p;
  moved.token_embedding(5, 5) += 0.1;
  EXPECT_THROW(backward(trace, batch, moved), std::logic_error);
  Batch other = batch;
  other.token_ids(0, 0) = 9;
  EXPECT_THROW(backward(trace, other, p), std::logic_error);
}

TEST(Roles, LiveAndRelabelingSymmetric) {
  std::mt19937_64 rng(20);
  const ModelConfig config = desk_config();
  const auto p = init_params<double>(config, 21);
  const Batch batch = random_batch(config, rng, 1, 3, 4, 4);
  Batch other_roles = batch;
  for (Eigen::Index l = 0; l < static_cast<Eigen::Index>(batch.row_length(0)); ++l) {
    other_roles.role_ids(0, l) = (batch.role_ids(0, l) + 1) % config.n_roles;
  }
  const auto base = forward(batch, p);
  EXPECT_GT(max_abs_diff(forward(other_roles, p).rows[0].logits, base.rows[0].logits), 1e-6);

  // Permute table rows and ids together: role i moves to slot perm[i].
  std::vector<int> perm(static_cast<std::size_t>(config.n_roles));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto relabeled = p;
  Batch relabeled_batch = batch;
  for (int i = 0; i < config.n_roles; ++i) {
    relabeled.role_embedding.row(perm[static_cast<std::size_t>(i)]) = p.role_embedding.row(i);
  }
  for (Eigen::Index l = 0; l < relabeled_batch.role_ids.cols(); ++l) {
    relabeled_batch.role_ids(0, l) = perm[static_cast<std::size_t>(batch.role_ids(0, l))];
  }
  EXPECT_LT(max_abs_diff(forward(relabeled_batch, relabeled).rows[0].logits, base.rows[0].logits), 1e-12);
}

TEST(Parameters, CastAndCount) {
  const auto p = init_params<float>(desk_config(), 1);
  const auto d = p.cast<double>();
  EXPECT_EQ(d.parameter_count(), p.parameter_count());
  EXPECT_EQ(d.cast<float>().digest(), p.digest());
  EXPECT_TRUE(p.all_finite());
  const auto& cfg = p.config;
  const std::size_t d_model = static_cast<std::size_t>(cfg.d_model);
  const std::size_t per_layer = 4 * d_model + (d_model * 3 * d_model + 3 * d_model) +
                                (d_model * d_model + d_model) +
                                (d_model * static_cast<std::size_t>(cfg.d_ff) + static_cast<std::size_t>(cfg.d_ff)) +
                                (static_cast<std::size_t>(cfg.d_ff) * d_model + d_model);
  const std::size_t tables = (static_cast<std::size_t>(cfg.vocab_size + cfg.max_positions + cfg.n_types + cfg.n_roles)) * d_model;
  EXPECT_EQ(p.parameter_count(), tables + 2 * per_layer + 2 * d_model);
}

TEST(Checkpoint, RoundTripIsExact) {
  std::vector<std::string> corpus = {"hello there", "general chat"};
  const Vocabulary vocab = train_bpe(corpus, 30);
  ModelConfig config = desk_config();
  config.tie_embeddings = false;
  const auto p = init_params<float>(config, 3);
  const Checkpoint ck = make_model_checkpoint(p, vocab);
  const std::string bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 8), std::string("PCHKPT\0\1", 8));
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  const auto q = params_from_checkpoint<float>(back);
  EXPECT_EQ(q.digest(), p.digest());
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(vocab_from_checkpoint(back), vocab);

  const auto path = std::filesystem::temp_directory_path() / "prefixchat_model.ckpt";
  write_checkpoint(path.string(), ck);
  EXPECT_EQ(params_from_checkpoint<float>(read_checkpoint(path.string())).digest(), p.digest());
  std::filesystem::remove(path);

  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
  std::string wrong = bytes;
  wrong[0] = 'X';
  EXPECT_THROW(parse_checkpoint(wrong), std::runtime_error);
  EXPECT_THROW(parse_checkpoint(bytes + "x"), std::runtime_error);
}

}  // namespace
}  // namespace prefixchat
