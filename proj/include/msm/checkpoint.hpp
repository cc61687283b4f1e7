// Copyright 2026 The MSM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Tensor container on disk: <dir>/manifest.json lists every array (name,
// shape, dtype, byte offset, byte length) and <dir>/tensors.bin holds the
// arrays back to back as little-endian IEEE-754 doubles.

#ifndef MSM_CHECKPOINT_HPP_
#define MSM_CHECKPOINT_HPP_

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "msm/tensor.hpp"

namespace msm {

struct TensorArchive {
  std::map<std::string, Tensor> tensors;
  // Free-form metadata stored under "meta" in the manifest.
  nlohmann::json meta = nlohmann::json::object();
};

void save_archive(const std::filesystem::path& dir, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& dir);

}  // namespace msm

#endif  // MSM_CHECKPOINT_HPP_
