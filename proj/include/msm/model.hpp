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

// Hierarchical encoder: a token-level transformer pooled at [CLS] yields one
// vector per sentence; a shallow transformer over the sentence vectors of a
// document, with one position replaced by a learned mask vector, predicts
// the vector at that position. Affine heads map both sides into the space
// where the contrastive loss is computed.
//
// Parameter names:
//   sent.*        sentence encoder (token/position tables, layers, final LN)
//   mlm.bias      output bias of the MLM head (weights tied to sent.tok_emb)
//   doc<k>.*      document encoder copy k
//   head<k>.*     projection heads copy k (p, h, or shared)

#ifndef MSM_MODEL_HPP_
#define MSM_MODEL_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msm/autograd.hpp"
#include "msm/checkpoint.hpp"
#include "msm/corpus.hpp"
#include "msm/tensor.hpp"

namespace msm {

enum class ProjectorMode { kNone, kShared, kAsymmetric };
enum class DocEncoderSharing { kShareAll, kSepDoc, kSepDocHead };
enum class ProjectionSide { kP, kH };

std::string to_string(ProjectorMode m);
std::string to_string(DocEncoderSharing s);
ProjectorMode parse_projector_mode(const std::string& s);
DocEncoderSharing parse_doc_sharing(const std::string& s);

// Languages grouped into partitions, written "L0|L1,L2"; "*" in a group
// claims every language not listed elsewhere.
class LanguagePartition {
 public:
  LanguagePartition() = default;
  static LanguagePartition parse(const std::string& spec);

  // Throws std::invalid_argument for a language no group covers.
  std::size_t index_of(const std::string& lang) const;
  std::size_t size() const { return groups_.size(); }
  std::string str() const;

 private:
  std::vector<std::vector<std::string>> groups_;
};

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 64;
  std::size_t sentence_layers = 2;
  std::size_t document_layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_multiplier = 4;
  std::size_t max_positions = kMaxSentenceTokens + 2;
  std::size_t max_sentences = kMaxDocumentSentences;
  ProjectorMode projector = ProjectorMode::kAsymmetric;
  DocEncoderSharing sharing = DocEncoderSharing::kShareAll;
  std::string language_partition = "L0|*";
  double init_std = 0.02;
  bool has_document_encoder = true;

  void validate() const;
  std::size_t num_doc_encoders() const;
  std::size_t num_head_sets() const;
};

struct Model {
  ModelConfig config;
  ParamStore params;
};

Model init_model(const ModelConfig& config, std::uint64_t seed);

// Parameter prefixes serving one language.
struct EncoderHandle {
  std::string doc_prefix;   // "doc<k>"
  std::string head_prefix;  // "head<k>"
  std::size_t partition = 0;
};

EncoderHandle select_doc_encoder(const ModelConfig& config, const std::string& lang);

// Token sequences stacked row-wise for one batched encoder pass.
struct SequenceBatch {
  std::vector<TokenId> ids;
  std::vector<std::int32_t> positions;
  std::vector<Segment> segments;

  void append(std::span<const TokenId> tokens);
  std::vector<std::size_t> first_rows() const;
};

// Final hidden states (rows of the stacked batch) of the sentence encoder.
Var sentence_hidden(Graph& g, Model& model, const SequenceBatch& batch);
// [CLS] rows of sentence_hidden, one per sequence.
Var sentence_vectors(Graph& g, Model& model, const SequenceBatch& batch);

// One document-encoder input: rows of a sentence-vector matrix, in document
// order, with an optional masked position.
struct DocumentInstance {
  std::vector<std::size_t> rows;
  std::optional<std::size_t> masked;
};

// Stacked outputs of every instance (sum of instance lengths x d). All
// instances run through the encoder copy named by `handle`.
Var document_context(Graph& g, Model& model, const EncoderHandle& handle, Var sentence_vecs,
                     std::span<const DocumentInstance> instances);

Var project(Graph& g, Model& model, const EncoderHandle& handle, Var v, ProjectionSide side);

// MLM logits (rows x V) for selected rows of sentence_hidden.
Var mlm_logits(Graph& g, Model& model, Var hidden, std::span<const std::size_t> rows);

// Value-level conveniences over the graph functions above.
std::vector<double> encode_sentence(Model& model, const Sentence& sentence);
Tensor encode_document(Model& model, const Tensor& sentence_vecs, std::optional<std::size_t> masked,
                       const std::string& lang);
std::vector<double> project(Model& model, const std::string& lang, std::span<const double> v,
                            ProjectionSide side);
Tensor mlm_forward(Model& model, const MlmMaskedBatch& masked);

// Checkpoint directory: tensor archive plus vocab.txt. `kind` is recorded in
// the manifest ("pretrain", "export", "finetuned").
void save_model(const std::filesystem::path& dir, const Model& model, const Vocab& vocab,
                const std::string& kind, const ParamStore* extra = nullptr,
                const nlohmann::json& extra_meta = {});
struct LoadedModel {
  Model model;
  Vocab vocab;
  std::string kind;
  ParamStore extra;
  nlohmann::json meta;
};
LoadedModel load_model(const std::filesystem::path& dir);

// Copy of the model without document encoders or projection heads.
Model export_sentence_encoder(const Model& model);

}  // namespace msm

#endif  // MSM_MODEL_HPP_
