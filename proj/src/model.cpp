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

#include "msm/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace msm {
namespace {

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void add_linear(ParamStore& p, const std::string& prefix, std::size_t in, std::size_t out) {
  p.add(prefix + ".w", Tensor::matrix(in, out));
  p.add(prefix + ".b", Tensor::matrix(1, out));
}

void add_layer_norm(ParamStore& p, const std::string& prefix, std::size_t d) {
  p.add(prefix + ".g", Tensor::matrix(1, d));
  p.add(prefix + ".b", Tensor::matrix(1, d));
}

void add_block(ParamStore& p, const std::string& prefix, std::size_t d, std::size_t ffn) {
  add_layer_norm(p, prefix + ".ln1", d);
  add_linear(p, prefix + ".attn.q", d, d);
  add_linear(p, prefix + ".attn.k", d, d);
  add_linear(p, prefix + ".attn.v", d, d);
  add_linear(p, prefix + ".attn.o", d, d);
  add_layer_norm(p, prefix + ".ln2", d);
  add_linear(p, prefix + ".ffn.in", d, ffn);
  add_linear(p, prefix + ".ffn.out", ffn, d);
}

Var linear(Graph& g, Model& m, const std::string& prefix, Var x) {
  return add(matmul(x, g.param(m.params, prefix + ".w")), g.param(m.params, prefix + ".b"));
}

Var norm(Graph& g, Model& m, const std::string& prefix, Var x) {
  return layer_norm(x, g.param(m.params, prefix + ".g"), g.param(m.params, prefix + ".b"));
}

// Pre-norm transformer layer with attention confined to each segment.
Var block(Graph& g, Model& m, const std::string& prefix, Var x, std::span<const Segment> segs) {
  Var h = norm(g, m, prefix + ".ln1", x);
  Var q = linear(g, m, prefix + ".attn.q", h);
  Var k = linear(g, m, prefix + ".attn.k", h);
  Var v = linear(g, m, prefix + ".attn.v", h);
  Var a = segment_attention(q, k, v, segs, m.config.heads);
  x = add(x, linear(g, m, prefix + ".attn.o", a));
  h = norm(g, m, prefix + ".ln2", x);
  h = linear(g, m, prefix + ".ffn.out", gelu(linear(g, m, prefix + ".ffn.in", h)));
  return add(x, h);
}

Var row_of(Graph& g, std::span<const double> v) {
  return g.constant(Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end())));
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"hidden", c.hidden},
          {"sentence_layers", c.sentence_layers},
          {"document_layers", c.document_layers},
          {"heads", c.heads},
          {"ffn_multiplier", c.ffn_multiplier},
          {"max_positions", c.max_positions},
          {"max_sentences", c.max_sentences},
          {"projector", to_string(c.projector)},
          {"sharing", to_string(c.sharing)},
          {"language_partition", c.language_partition},
          {"init_std", c.init_std},
          {"has_document_encoder", c.has_document_encoder}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size");
  c.hidden = j.at("hidden");
  c.sentence_layers = j.at("sentence_layers");
  c.document_layers = j.at("document_layers");
  c.heads = j.at("heads");
  c.ffn_multiplier = j.at("ffn_multiplier");
  c.max_positions = j.at("max_positions");
  c.max_sentences = j.at("max_sentences");
  c.projector = parse_projector_mode(j.at("projector"));
  c.sharing = parse_doc_sharing(j.at("sharing"));
  c.language_partition = j.at("language_partition");
  c.init_std = j.at("init_std");
  c.has_document_encoder = j.at("has_document_encoder");
  return c;
}

constexpr const char* kOptimPrefix = "optim/";

}  // namespace

std::string to_string(ProjectorMode m) {
  switch (m) {
    case ProjectorMode::kNone: return "none";
    case ProjectorMode::kShared: return "shared";
    case ProjectorMode::kAsymmetric: return "asymmetric";
  }
  return "?";
}

std::string to_string(DocEncoderSharing s) {
  switch (s) {
    case DocEncoderSharing::kShareAll: return "share_all";
    case DocEncoderSharing::kSepDoc: return "sep_doc";
    case DocEncoderSharing::kSepDocHead: return "sep_doc_head";
  }
  return "?";
}

ProjectorMode parse_projector_mode(const std::string& s) {
  if (s == "none") return ProjectorMode::kNone;
  if (s == "shared") return ProjectorMode::kShared;
  if (s == "asymmetric") return ProjectorMode::kAsymmetric;
  throw std::invalid_argument("unknown projector mode '" + s + "' (none|shared|asymmetric)");
}

DocEncoderSharing parse_doc_sharing(const std::string& s) {
  if (s == "share_all") return DocEncoderSharing::kShareAll;
  if (s == "sep_doc") return DocEncoderSharing::kSepDoc;
  if (s == "sep_doc_head") return DocEncoderSharing::kSepDocHead;
  throw std::invalid_argument("unknown document encoder sharing '" + s +
                              "' (share_all|sep_doc|sep_doc_head)");
}

LanguagePartition LanguagePartition::parse(const std::string& spec) {
  LanguagePartition p;
  std::size_t start = 0;
  for (;;) {
    const std::size_t bar = spec.find('|', start);
    std::string group = spec.substr(start, bar == std::string::npos ? bar : bar - start);
    std::vector<std::string> langs;
    std::size_t s = 0;
    for (;;) {
      const std::size_t comma = group.find(',', s);
      auto toks = split_whitespace(group.substr(s, comma == std::string::npos ? comma : comma - s));
      if (toks.size() != 1) throw std::invalid_argument("malformed language partition: " + spec);
      langs.push_back(toks[0]);
      if (comma == std::string::npos) break;
      s = comma + 1;
    }
    p.groups_.push_back(std::move(langs));
    if (bar == std::string::npos) break;
    start = bar + 1;
  }
  return p;
}

std::size_t LanguagePartition::index_of(const std::string& lang) const {
  std::optional<std::size_t> wildcard;
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    for (const std::string& l : groups_[i]) {
      if (l == lang) return i;
      if (l == "*") wildcard = i;
    }
  }
  if (wildcard) return *wildcard;
  throw std::invalid_argument("language '" + lang + "' is not in partition " + str());
}

std::string LanguagePartition::str() const {
  std::string out;
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    if (i) out += '|';
    for (std::size_t j = 0; j < groups_[i].size(); ++j) {
      if (j) out += ',';
      out += groups_[i][j];
    }
  }
  return out;
}

void ModelConfig::validate() const {
  if (vocab_size <= kNumReserved) throw std::invalid_argument("vocab_size too small");
  if (hidden == 0 || heads == 0 || hidden % heads != 0) {
    throw std::invalid_argument("hidden size must be a positive multiple of heads");
  }
  if (sentence_layers == 0) throw std::invalid_argument("sentence_layers must be >= 1");
  if (has_document_encoder && document_layers == 0) {
    throw std::invalid_argument("document_layers must be >= 1");
  }
  if (max_positions < 3) throw std::invalid_argument("max_positions must be >= 3");
  LanguagePartition::parse(language_partition);
}

std::size_t ModelConfig::num_doc_encoders() const {
  if (!has_document_encoder) return 0;
  return sharing == DocEncoderSharing::kShareAll ? 1
                                                 : LanguagePartition::parse(language_partition).size();
}

std::size_t ModelConfig::num_head_sets() const {
  if (!has_document_encoder || projector == ProjectorMode::kNone) return 0;
  return sharing == DocEncoderSharing::kSepDocHead
             ? LanguagePartition::parse(language_partition).size()
             : 1;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  const std::size_t d = config.hidden;
  const std::size_t ffn = d * config.ffn_multiplier;
  ParamStore& p = m.params;
  p.add("sent.tok_emb", Tensor::matrix(config.vocab_size, d));
  p.add("sent.pos_emb", Tensor::matrix(config.max_positions, d));
  add_layer_norm(p, "sent.emb_ln", d);
  for (std::size_t l = 0; l < config.sentence_layers; ++l) {
    add_block(p, "sent.L" + std::to_string(l), d, ffn);
  }
  add_layer_norm(p, "sent.final_ln", d);
  if (config.has_document_encoder) {
    p.add("mlm.bias", Tensor::matrix(1, config.vocab_size));
    for (std::size_t k = 0; k < config.num_doc_encoders(); ++k) {
      const std::string prefix = "doc" + std::to_string(k);
      p.add(prefix + ".pos_emb", Tensor::matrix(config.max_sentences, d));
      p.add(prefix + ".mask", Tensor::matrix(1, d));
      for (std::size_t l = 0; l < config.document_layers; ++l) {
        add_block(p, prefix + ".L" + std::to_string(l), d, ffn);
      }
      add_layer_norm(p, prefix + ".final_ln", d);
    }
    for (std::size_t k = 0; k < config.num_head_sets(); ++k) {
      const std::string prefix = "head" + std::to_string(k);
      if (config.projector == ProjectorMode::kShared) {
        add_linear(p, prefix + ".shared", d, d);
      } else {
        add_linear(p, prefix + ".p", d, d);
        add_linear(p, prefix + ".h", d, d);
      }
    }
  }

  // Each tensor draws from its own stream, so the sentence encoder starts
  // identical across sharing modes for one seed.
  for (const std::string& name : p.names()) {
    Tensor& t = p.value(name);
    if (ends_with(name, ".g")) {
      t.fill(1.0);
      continue;
    }
    if (ends_with(name, ".b") || name == "mlm.bias") continue;
    const bool head = name.rfind("head", 0) == 0;
    const double std = head ? 1.0 / std::sqrt(static_cast<double>(d)) : config.init_std;
    std::mt19937_64 rng(derive_seed(seed, name_hash(name)));
    std::normal_distribution<double> normal(0.0, std);
    for (double& v : t.storage()) v = normal(rng);
  }
  return m;
}

EncoderHandle select_doc_encoder(const ModelConfig& config, const std::string& lang) {
  const std::size_t part = LanguagePartition::parse(config.language_partition).index_of(lang);
  EncoderHandle h;
  h.partition = part;
  const std::size_t doc = config.sharing == DocEncoderSharing::kShareAll ? 0 : part;
  const std::size_t head = config.sharing == DocEncoderSharing::kSepDocHead ? part : 0;
  h.doc_prefix = "doc" + std::to_string(doc);
  h.head_prefix = "head" + std::to_string(head);
  return h;
}

void SequenceBatch::append(std::span<const TokenId> tokens) {
  segments.push_back({ids.size(), tokens.size()});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    ids.push_back(tokens[i]);
    positions.push_back(static_cast<std::int32_t>(i));
  }
}

std::vector<std::size_t> SequenceBatch::first_rows() const {
  std::vector<std::size_t> rows;
  rows.reserve(segments.size());
  for (const Segment& s : segments) rows.push_back(s.start);
  return rows;
}

Var sentence_hidden(Graph& g, Model& model, const SequenceBatch& batch) {
  for (const Segment& s : batch.segments) {
    if (s.length > model.config.max_positions) {
      throw std::invalid_argument("sequence of " + std::to_string(s.length) +
                                  " tokens exceeds the position table (" +
                                  std::to_string(model.config.max_positions) + ")");
    }
  }
  Var x = add(embedding_lookup(g.param(model.params, "sent.tok_emb"), batch.ids),
              embedding_lookup(g.param(model.params, "sent.pos_emb"), batch.positions));
  x = norm(g, model, "sent.emb_ln", x);
  for (std::size_t l = 0; l < model.config.sentence_layers; ++l) {
    x = block(g, model, "sent.L" + std::to_string(l), x, batch.segments);
  }
  return norm(g, model, "sent.final_ln", x);
}

Var sentence_vectors(Graph& g, Model& model, const SequenceBatch& batch) {
  return gather_rows(sentence_hidden(g, model, batch), batch.first_rows());
}

Var document_context(Graph& g, Model& model, const EncoderHandle& handle, Var sentence_vecs,
                     std::span<const DocumentInstance> instances) {
  if (!model.config.has_document_encoder) {
    throw std::logic_error("model has no document encoder (exported checkpoint?)");
  }
  const std::size_t mask_row = sentence_vecs.rows();
  std::vector<std::size_t> rows;
  std::vector<std::int32_t> positions;
  std::vector<Segment> segments;
  for (const DocumentInstance& inst : instances) {
    const std::size_t n = inst.rows.size();
    if (n == 0 || n > model.config.max_sentences) {
      throw std::invalid_argument("document of " + std::to_string(n) +
                                  " sentences outside [1, " +
                                  std::to_string(model.config.max_sentences) + "]");
    }
    if (inst.masked && *inst.masked >= n) {
      throw std::out_of_range("mask position " + std::to_string(*inst.masked) +
                              " outside document of " + std::to_string(n) + " sentences");
    }
    segments.push_back({rows.size(), n});
    for (std::size_t j = 0; j < n; ++j) {
      rows.push_back(inst.masked == j ? mask_row : inst.rows[j]);
      positions.push_back(static_cast<std::int32_t>(j));
    }
  }
  const std::string& prefix = handle.doc_prefix;
  Var parts[] = {sentence_vecs, g.param(model.params, prefix + ".mask")};
  Var x = add(gather_rows(concat(parts, 0), rows),
              embedding_lookup(g.param(model.params, prefix + ".pos_emb"), positions));
  for (std::size_t l = 0; l < model.config.document_layers; ++l) {
    x = block(g, model, prefix + ".L" + std::to_string(l), x, segments);
  }
  return norm(g, model, prefix + ".final_ln", x);
}

Var project(Graph& g, Model& model, const EncoderHandle& handle, Var v, ProjectionSide side) {
  switch (model.config.projector) {
    case ProjectorMode::kNone:
      return v;
    case ProjectorMode::kShared:
      return linear(g, model, handle.head_prefix + ".shared", v);
    case ProjectorMode::kAsymmetric:
      return linear(g, model, handle.head_prefix + (side == ProjectionSide::kP ? ".p" : ".h"), v);
  }
  return v;
}

Var mlm_logits(Graph& g, Model& model, Var hidden, std::span<const std::size_t> rows) {
  Var h = gather_rows(hidden, rows);
  return add(matmul_nt(h, g.param(model.params, "sent.tok_emb")),
             g.param(model.params, "mlm.bias"));
}

std::vector<double> encode_sentence(Model& model, const Sentence& sentence) {
  Graph g(false);
  SequenceBatch batch;
  batch.append(sentence.token_ids);
  Var h = sentence_vectors(g, model, batch);
  const auto& v = h.value().storage();
  return std::vector<double>(v.begin(), v.end());
}

Tensor encode_document(Model& model, const Tensor& sentence_vecs, std::optional<std::size_t> masked,
                       const std::string& lang) {
  Graph g(false);
  Var h = g.constant(sentence_vecs);
  DocumentInstance inst;
  for (std::size_t i = 0; i < sentence_vecs.rows(); ++i) inst.rows.push_back(i);
  inst.masked = masked;
  return document_context(g, model, select_doc_encoder(model.config, lang), h,
                          std::span<const DocumentInstance>(&inst, 1))
      .value();
}

std::vector<double> project(Model& model, const std::string& lang, std::span<const double> v,
                            ProjectionSide side) {
  Graph g(false);
  Var out = project(g, model, select_doc_encoder(model.config, lang), row_of(g, v), side);
  const auto& s = out.value().storage();
  return std::vector<double>(s.begin(), s.end());
}

Tensor mlm_forward(Model& model, const MlmMaskedBatch& masked) {
  if (masked.mask_positions.empty()) return Tensor::matrix(0, model.config.vocab_size);
  Graph g(false);
  SequenceBatch batch;
  batch.append(masked.input_ids);
  Var hidden = sentence_hidden(g, model, batch);
  return mlm_logits(g, model, hidden, masked.mask_positions).value();
}

void save_model(const std::filesystem::path& dir, const Model& model, const Vocab& vocab,
                const std::string& kind, const ParamStore* extra,
                const nlohmann::json& extra_meta) {
  TensorArchive archive;
  for (const auto& [name, t] : model.params.values()) archive.tensors.emplace(name, t);
  if (extra != nullptr) {
    for (const auto& [name, t] : extra->values()) archive.tensors.emplace(kOptimPrefix + name, t);
  }
  archive.meta["model"] = config_to_json(model.config);
  archive.meta["kind"] = kind;
  if (!extra_meta.is_null()) archive.meta["extra"] = extra_meta;
  save_archive(dir, archive);
  vocab.save(dir / "vocab.txt");
}

LoadedModel load_model(const std::filesystem::path& dir) {
  TensorArchive archive = load_archive(dir);
  LoadedModel out;
  out.model.config = config_from_json(archive.meta.at("model"));
  out.kind = archive.meta.value("kind", "");
  out.meta = archive.meta.value("extra", nlohmann::json());
  const std::string prefix = kOptimPrefix;
  for (auto& [name, t] : archive.tensors) {
    if (name.rfind(prefix, 0) == 0) {
      out.extra.add(name.substr(prefix.size()), std::move(t));
    } else {
      out.model.params.add(name, std::move(t));
    }
  }
  out.vocab = Vocab::load(dir / "vocab.txt");
  if (out.vocab.size() != out.model.config.vocab_size) {
    throw std::runtime_error("vocab.txt size disagrees with the model manifest in " + dir.string());
  }
  return out;
}

Model export_sentence_encoder(const Model& model) {
  Model out;
  out.config = model.config;
  out.config.has_document_encoder = false;
  for (const auto& [name, t] : model.params.values()) {
    if (name.rfind("sent.", 0) == 0) out.params.add(name, t);
  }
  return out;
}

}  // namespace msm
