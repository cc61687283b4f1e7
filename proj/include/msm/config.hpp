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

// Flat key=value run configuration and the run manifest.
//
// A config file holds one `key = value` per line; `#` starts a comment.
// Every key has a default, so an empty file is a valid configuration.

#ifndef MSM_CONFIG_HPP_
#define MSM_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msm/corpus.hpp"
#include "msm/pretrain.hpp"
#include "msm/retriever.hpp"

namespace msm {

inline constexpr const char* kVersion = "0.1.0";

// Everything one pretrain -> fine-tune -> evaluate run depends on.
struct RunConfig {
  SyntheticCorpusSpec corpus;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  std::size_t max_vocab = 100000;
  // Fraction of latent documents kept out of pretraining and fine-tuning.
  double heldout_fraction = 0.2;
  std::size_t eval_queries = 300;
  std::size_t eval_k = 10;
  std::string train_lang = "L0";

  RunConfig();
  void validate() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown for a key no entry defines; the message lists the valid keys.
class UnknownKeyError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct ConfigKey {
  std::string key;
  std::string help;
};

const std::vector<ConfigKey>& config_keys();
bool is_config_key(const std::string& key);

void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);

// "key=value"; surrounding whitespace is ignored.
std::pair<std::string, std::string> split_assignment(const std::string& text);
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin);
// Throws ConfigError naming the path when the file is missing.
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

// Every key in config_keys() order, one `key = value` per line.
std::string format_config(const RunConfig& config);
std::map<std::string, std::string> config_map(const RunConfig& config);

// 64-bit FNV-1a over the bytes of a file, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);
std::string text_digest(const std::string& text);

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::string version = kVersion;
  std::string started;
  std::string finished;  // empty until the run completes
  std::map<std::string, std::string> inputs;  // file name -> digest

  bool complete() const { return !finished.empty(); }
  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& path);
// UTC, ISO-8601 to the second.
std::string utc_timestamp();

}  // namespace msm

#endif  // MSM_CONFIG_HPP_
