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

#ifndef PREFIXCHAT_CHECKPOINT_HPP_
#define PREFIXCHAT_CHECKPOINT_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "prefixchat/model.hpp"
#include "prefixchat/tokenizer.hpp"

namespace prefixchat {

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

/// On disk: 8-byte magic "PCHKPT\0\1", u32 format version, u32 header
/// length, header JSON (UTF-8), u32 tensor count, then per tensor u32 name
/// length, name bytes, u32 rank, u32 dims, and little-endian float32 data.
struct Checkpoint {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;

  const NamedTensor& find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(const std::string& bytes);
void write_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::string& path);

/// Adds every parameter tensor under `prefix` + name. Values are narrowed
/// to float32.
template <typename Scalar>
void append_tensors(Checkpoint& checkpoint, const ModelParameters<Scalar>& params,
                    const std::string& prefix = "");

/// Fills `params` (already shaped) from tensors named `prefix` + name.
template <typename Scalar>
void load_tensors(const Checkpoint& checkpoint, ModelParameters<Scalar>& params,
                  const std::string& prefix = "");

/// Model-only checkpoint: header carries the model config and the vocabulary.
template <typename Scalar>
Checkpoint make_model_checkpoint(const ModelParameters<Scalar>& params, const Vocabulary& vocab);

template <typename Scalar>
ModelParameters<Scalar> params_from_checkpoint(const Checkpoint& checkpoint);
Vocabulary vocab_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace prefixchat

#endif  // PREFIXCHAT_CHECKPOINT_HPP_
