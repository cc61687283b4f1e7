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

#include "msm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace msm {

static_assert(std::endian::native == std::endian::little,
              "tensor archives are written as raw little-endian doubles");

void save_archive(const std::filesystem::path& dir, const TensorArchive& archive) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "msm-tensors-v1";
  manifest["meta"] = archive.meta;
  manifest["tensors"] = nlohmann::json::array();

  std::ofstream blob(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("cannot write " + (dir / "tensors.bin").string());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    const std::uint64_t nbytes = t.size() * sizeof(double);
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", t.shape()},
                                   {"dtype", "f64"},
                                   {"offset", offset},
                                   {"nbytes", nbytes}});
    blob.write(reinterpret_cast<const char*>(t.data().data()),
               static_cast<std::streamsize>(nbytes));
    offset += nbytes;
  }
  if (!blob) throw std::runtime_error("short write to " + (dir / "tensors.bin").string());

  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

TensorArchive load_archive(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing checkpoint manifest: " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "msm-tensors-v1") {
    throw std::runtime_error("unrecognized checkpoint format in " + dir.string());
  }
  std::ifstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("missing tensor blob: " + (dir / "tensors.bin").string());

  TensorArchive archive;
  archive.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    if (entry.at("dtype") != "f64") {
      throw std::runtime_error("unsupported dtype " + entry.at("dtype").get<std::string>());
    }
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != shape_size(shape) * sizeof(double)) {
      throw std::runtime_error("byte length disagrees with shape for " +
                               entry.at("name").get<std::string>());
    }
    Tensor t(shape);
    blob.seekg(static_cast<std::streamoff>(offset));
    blob.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(nbytes));
    if (!blob) {
      throw std::runtime_error("truncated tensor blob reading " +
                               entry.at("name").get<std::string>());
    }
    archive.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return archive;
}

}  // namespace msm
