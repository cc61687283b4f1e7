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

#include "msm/config.hpp"

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <sstream>

namespace msm {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

int parse_int(const std::string& key, const std::string& v) {
  const std::uint64_t x = parse_uint(key, v);
  if (x > 1000000000ULL) throw ConfigError(key + ": value out of range");
  return static_cast<int>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(x)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  // Prefer the shortest form that reads back to the same value.
  for (int p = 1; p <= 17; ++p) {
    char s[64];
    std::snprintf(s, sizeof(s), "%.*g", p, x);
    if (std::strtod(s, nullptr) == x) return s;
  }
  return buf;
}

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MSM_UINT(NAME, FIELD, HELP)                                                        \
  Entry {                                                                                  \
    {NAME, HELP}, [](RunConfig& c, const std::string& v) { c.FIELD = parse_uint(NAME, v); }, \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                         \
  }
#define MSM_INT(NAME, FIELD, HELP)                                                         \
  Entry {                                                                                  \
    {NAME, HELP}, [](RunConfig& c, const std::string& v) { c.FIELD = parse_int(NAME, v); }, \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                         \
  }
#define MSM_DOUBLE(NAME, FIELD, HELP)                                                         \
  Entry {                                                                                     \
    {NAME, HELP}, [](RunConfig& c, const std::string& v) { c.FIELD = parse_double(NAME, v); }, \
        [](const RunConfig& c) { return fmt_double(c.FIELD); }                                \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      MSM_INT("corpus.languages", corpus.num_languages, "number of synthetic languages"),
      MSM_INT("corpus.latent_vocab", corpus.latent_vocab_size, "latent token types per language"),
      MSM_INT("corpus.topics", corpus.num_topics, "latent topics"),
      MSM_DOUBLE("corpus.stickiness", corpus.topic_transition_stickiness,
                 "probability of keeping the topic between sentences, in (0, 1]"),
      MSM_INT("corpus.min_sentences", corpus.sentences_per_doc.min, "sentences per document, lower bound"),
      MSM_INT("corpus.max_sentences", corpus.sentences_per_doc.max, "sentences per document, upper bound"),
      MSM_INT("corpus.min_tokens", corpus.tokens_per_sentence.min, "tokens per sentence, lower bound"),
      MSM_INT("corpus.max_tokens", corpus.tokens_per_sentence.max, "tokens per sentence, upper bound"),
      MSM_INT("corpus.docs", corpus.num_docs, "latent documents, each rendered in every language"),
      MSM_UINT("corpus.seed", corpus.seed, "corpus generator seed"),
      MSM_DOUBLE("corpus.zipf", corpus.zipf_exponent, "rank-frequency exponent of topic token draws"),
      MSM_UINT("corpus.max_vocab", max_vocab, "vocabulary cap including reserved tokens"),

      MSM_UINT("model.hidden", pretrain.model.hidden, "hidden size"),
      MSM_UINT("model.sentence_layers", pretrain.model.sentence_layers, "sentence encoder layers"),
      MSM_UINT("model.document_layers", pretrain.model.document_layers, "document encoder layers"),
      MSM_UINT("model.heads", pretrain.model.heads, "attention heads"),
      MSM_UINT("model.ffn_multiplier", pretrain.model.ffn_multiplier, "feed-forward width over hidden"),
      Entry{{"model.projector", "projection heads: none, shared or asymmetric"},
            [](RunConfig& c, const std::string& v) {
              try {
                c.pretrain.model.projector = parse_projector_mode(v);
              } catch (const std::exception& e) {
                throw ConfigError(std::string("model.projector: ") + e.what());
              }
            },
            [](const RunConfig& c) { return to_string(c.pretrain.model.projector); }},
      Entry{{"model.sharing", "document encoder sharing: share_all, sep_doc or sep_doc_head"},
            [](RunConfig& c, const std::string& v) {
              try {
                c.pretrain.model.sharing = parse_doc_sharing(v);
              } catch (const std::exception& e) {
                throw ConfigError(std::string("model.sharing: ") + e.what());
              }
            },
            [](const RunConfig& c) { return to_string(c.pretrain.model.sharing); }},
      Entry{{"model.partition", "language groups for separate encoders, e.g. L0|L1"},
            [](RunConfig& c, const std::string& v) {
              try {
                LanguagePartition::parse(v);
              } catch (const std::exception& e) {
                throw ConfigError(std::string("model.partition: ") + e.what());
              }
              c.pretrain.model.language_partition = v;
            },
            [](const RunConfig& c) { return c.pretrain.model.language_partition; }},
      MSM_DOUBLE("model.init_std", pretrain.model.init_std, "weight init standard deviation"),

      MSM_DOUBLE("loss.mu", pretrain.loss.mu, "intra-document bias scale"),
      Entry{{"loss.similarity", "dot or cosine"},
            [](RunConfig& c, const std::string& v) {
              try {
                c.pretrain.loss.similarity = parse_similarity(v);
              } catch (const std::exception& e) {
                throw ConfigError(std::string("loss.similarity: ") + e.what());
              }
            },
            [](const RunConfig& c) { return to_string(c.pretrain.loss.similarity); }},
      Entry{{"loss.intra_negatives", "use same-document negatives (false: cross-only)"},
            [](RunConfig& c, const std::string& v) {
              c.pretrain.intra_negatives = parse_bool("loss.intra_negatives", v);
            },
            [](const RunConfig& c) { return std::string(c.pretrain.intra_negatives ? "true" : "false"); }},
      MSM_DOUBLE("loss.msm_weight", pretrain.msm_weight, "weight of the sentence-level term; 0 = MLM only"),
      MSM_DOUBLE("loss.mlm_rate", pretrain.mlm_rate, "token masking rate"),

      MSM_UINT("pretrain.batch_docs", pretrain.batch_docs, "documents per batch"),
      MSM_UINT("pretrain.cross_negative_cap", pretrain.cross_negative_cap, "cross-document negatives per instance"),
      Entry{{"pretrain.single_language_batches", "draw each batch from one language"},
            [](RunConfig& c, const std::string& v) {
              c.pretrain.single_language_batches = parse_bool("pretrain.single_language_batches", v);
            },
            [](const RunConfig& c) {
              return std::string(c.pretrain.single_language_batches ? "true" : "false");
            }},
      MSM_DOUBLE("pretrain.lr", pretrain.learning_rate, "peak learning rate"),
      MSM_UINT("pretrain.warmup", pretrain.warmup_steps, "linear warmup steps"),
      MSM_UINT("pretrain.steps", pretrain.total_steps, "total steps"),
      MSM_DOUBLE("pretrain.grad_clip", pretrain.grad_clip, "global gradient norm cap, 0 disables"),
      MSM_UINT("pretrain.log_every", pretrain.log_every, "log one line every this many steps"),

      MSM_UINT("finetune.batch", finetune.batch_size, "query/passage pairs per step"),
      MSM_DOUBLE("finetune.lr", finetune.learning_rate, "peak learning rate"),
      MSM_UINT("finetune.warmup", finetune.warmup_steps, "linear warmup steps"),
      MSM_UINT("finetune.steps", finetune.total_steps, "total steps"),
      MSM_DOUBLE("finetune.grad_clip", finetune.grad_clip, "global gradient norm cap, 0 disables"),

      MSM_DOUBLE("eval.heldout_fraction", heldout_fraction, "latent documents held out for evaluation"),
      MSM_UINT("eval.queries", eval_queries, "queries per language"),
      MSM_UINT("eval.k", eval_k, "cutoff for MRR and recall"),
      Entry{{"eval.train_lang", "language whose pairs are used for fine-tuning"},
            [](RunConfig& c, const std::string& v) { c.train_lang = v; },
            [](const RunConfig& c) { return c.train_lang; }},

      Entry{{"seed", "seed of pretraining and fine-tuning"},
            [](RunConfig& c, const std::string& v) {
              c.pretrain.seed = parse_uint("seed", v);
              c.finetune.seed = c.pretrain.seed;
            },
            [](const RunConfig& c) { return std::to_string(c.pretrain.seed); }},
  };
  return table;
}

#undef MSM_UINT
#undef MSM_INT
#undef MSM_DOUBLE

const Entry* find_entry(const std::string& key) {
  for (const Entry& e : entries()) {
    if (e.key.key == key) return &e;
  }
  return nullptr;
}

[[noreturn]] void unknown_key(const std::string& key) {
  std::string msg = "unknown config key '" + key + "'; valid keys:";
  for (const Entry& e : entries()) msg += "\n  " + e.key.key;
  throw UnknownKeyError(msg);
}

}  // namespace

RunConfig::RunConfig() {
  // Desk-scale experiment defaults; library structs keep their own.
  pretrain.model.hidden = 32;
  pretrain.model.heads = 4;
  pretrain.model.language_partition = "L0|L1";
  pretrain.learning_rate = 5e-3;
  pretrain.log_every = 10;
  finetune.learning_rate = 1e-2;
  finetune.warmup_steps = 50;
  finetune.total_steps = 500;
}

void RunConfig::validate() const {
  corpus.validate();
  PretrainConfig p = pretrain;
  if (p.model.vocab_size == 0) p.model.vocab_size = kNumReserved + 1;
  p.validate();
  finetune.validate();
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) {
    throw ConfigError("eval.heldout_fraction must lie in (0, 1)");
  }
  if (eval_queries == 0) throw ConfigError("eval.queries must be >= 1");
  if (eval_k == 0) throw ConfigError("eval.k must be >= 1");
  if (max_vocab <= kNumReserved) throw ConfigError("corpus.max_vocab too small");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const Entry& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

bool is_config_key(const std::string& key) { return find_entry(key) != nullptr; }

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const Entry* e = find_entry(key);
  if (e == nullptr) unknown_key(key);
  e->set(config, value);
}

std::string get_config_value(const RunConfig& config, const std::string& key) {
  const Entry* e = find_entry(key);
  if (e == nullptr) unknown_key(key);
  return e->get(config);
}

std::pair<std::string, std::string> split_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + text + "'");
  std::string key = trim(text.substr(0, eq));
  if (key.empty()) throw ConfigError("empty key in '" + text + "'");
  return {key, trim(text.substr(eq + 1))};
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    try {
      auto [k, v] = split_assignment(line);
      set_config_value(config, k, v);
    } catch (const UnknownKeyError& e) {
      throw UnknownKeyError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(config, ss.str(), path.string());
}

std::string format_config(const RunConfig& config) {
  std::string out;
  for (const Entry& e : entries()) out += e.key.key + " = " + e.get(config) + "\n";
  return out;
}

std::map<std::string, std::string> config_map(const RunConfig& config) {
  std::map<std::string, std::string> out;
  for (const Entry& e : entries()) out[e.key.key] = e.get(config);
  return out;
}

std::string text_digest(const std::string& text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return text_digest(ss.str());
}

nlohmann::json RunManifest::to_json() const {
  return {{"command", command}, {"config", config},     {"seed", seed},    {"version", version},
          {"started", started}, {"finished", finished}, {"inputs", inputs}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config").get<std::map<std::string, std::string>>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.version = j.at("version").get<std::string>();
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").get<std::string>();
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  return m;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << manifest.to_json().dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return RunManifest::from_json(nlohmann::json::parse(in));
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace msm
