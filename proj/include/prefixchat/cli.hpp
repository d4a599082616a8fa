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

#ifndef PREFIXCHAT_CLI_HPP_
#define PREFIXCHAT_CLI_HPP_

#include <iosfwd>

namespace prefixchat {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point for `prefixchat <corpus|tokenizer|batch|train|eval|chat>`.
/// Returns 0 on success, 1 on usage errors and 2 on runtime errors.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace prefixchat

#endif  // PREFIXCHAT_CLI_HPP_
