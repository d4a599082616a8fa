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

#include "prefixchat/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace prefixchat {

namespace {

constexpr char kMagic[8] = {'P', 'C', 'H', 'K', 'P', 'T', '\0', '\1'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedTensor& Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  std::string out(kMagic, sizeof(kMagic));
  put_u32(out, kFormatVersion);
  const std::string header = checkpoint.header.dump();
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put_u32(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& t : checkpoint.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto dim : t.shape) put_u32(out, dim);
    for (float v : t.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  if (const auto version = in.u32(); version != kFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint checkpoint;
  checkpoint.header = nlohmann::json::parse(in.bytes(in.u32()));
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = in.bytes(in.u32());
    const std::uint32_t rank = in.u32();
    std::size_t elements = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(in.u32());
      elements *= t.shape.back();
    }
    t.data.resize(elements);
    for (auto& v : t.data) v = std::bit_cast<float>(in.u32());
    checkpoint.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return checkpoint;
}

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    const std::string bytes = serialize_checkpoint(checkpoint);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for checkpoint '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot move checkpoint into place at '" + path + "'");
  }
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_checkpoint(buffer.str());
}

template <typename Scalar>
void append_tensors(Checkpoint& checkpoint, const ModelParameters<Scalar>& params,
                    const std::string& prefix) {
  params.for_each([&](const std::string& name, const Matrix<Scalar>& m) {
    NamedTensor t;
    t.name = prefix + name;
    t.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    t.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    checkpoint.tensors.push_back(std::move(t));
  });
}

template <typename Scalar>
void load_tensors(const Checkpoint& checkpoint, ModelParameters<Scalar>& params,
                  const std::string& prefix) {
  params.for_each([&](const std::string& name, Matrix<Scalar>& m) {
    const NamedTensor& t = checkpoint.find(prefix + name);
    if (t.shape.size() != 2 || t.shape[0] != m.rows() || t.shape[1] != m.cols()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + t.name + "'");
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(t.data[static_cast<std::size_t>(i)]);
  });
}

template <typename Scalar>
Checkpoint make_model_checkpoint(const ModelParameters<Scalar>& params, const Vocabulary& vocab) {
  Checkpoint checkpoint;
  checkpoint.header = {{"model", params.config.to_json()}, {"vocab", vocab.serialize()}};
  append_tensors(checkpoint, params);
  return checkpoint;
}

template <typename Scalar>
ModelParameters<Scalar> params_from_checkpoint(const Checkpoint& checkpoint) {
  auto params = ModelParameters<Scalar>::zeros(ModelConfig::from_json(checkpoint.header.at("model")));
  load_tensors(checkpoint, params);
  return params;
}

Vocabulary vocab_from_checkpoint(const Checkpoint& checkpoint) {
  if (!checkpoint.header.contains("vocab")) throw std::runtime_error("checkpoint carries no vocabulary");
  return Vocabulary::parse(checkpoint.header.at("vocab").get<std::string>());
}

template void append_tensors<float>(Checkpoint&, const ModelParameters<float>&, const std::string&);
template void append_tensors<double>(Checkpoint&, const ModelParameters<double>&, const std::string&);
template void load_tensors<float>(const Checkpoint&, ModelParameters<float>&, const std::string&);
template void load_tensors<double>(const Checkpoint&, ModelParameters<double>&, const std::string&);
template Checkpoint make_model_checkpoint<float>(const ModelParameters<float>&, const Vocabulary&);
template Checkpoint make_model_checkpoint<double>(const ModelParameters<double>&, const Vocabulary&);
template ModelParameters<float> params_from_checkpoint<float>(const Checkpoint&);
template ModelParameters<double> params_from_checkpoint<double>(const Checkpoint&);

}  // namespace prefixchat
