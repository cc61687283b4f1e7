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

// Bi-encoder retrieval: one shared sentence-encoder tower for queries and
// passages ([CLS] pooling, dot product), in-batch negative fine-tuning,
// exhaustive search and ranking metrics.

#ifndef MSM_RETRIEVER_HPP_
#define MSM_RETRIEVER_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msm/corpus.hpp"
#include "msm/model.hpp"

namespace msm {

struct FinetuneConfig {
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;
  std::uint64_t warmup_steps = 50;
  std::uint64_t total_steps = 500;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
};

// Loss of one batch: B x B query/passage scores, cross-entropy on the diagonal.
Var in_batch_loss(Graph& g, Model& model, std::span<const Sentence> queries,
                  std::span<const Sentence> passages);

// Rows of `pairs` for one step: distinct passages, seeded by (seed, step).
std::vector<std::size_t> sample_pair_batch(std::span<const RetrievalPair> pairs,
                                           const FinetuneConfig& config, std::uint64_t step);

// Fine-tunes a copy of the sentence encoder. Throws std::invalid_argument for
// batch_size < 2 or a model that still carries pretraining heads.
Model finetune_biencoder(const Model& encoder, const Vocab& vocab,
                         std::span<const RetrievalPair> pairs, const FinetuneConfig& config,
                         const std::function<void(std::uint64_t, double)>& on_step = {});

struct EncodedCorpus {
  std::vector<std::string> doc_ids;
  Tensor embeddings;  // M x d
  std::vector<std::size_t> token_lengths;
};

// Token sequence of a text: [CLS] content (<= 64 tokens) [SEP].
Sentence to_sentence(const Vocab& vocab, const std::string& text);
Tensor encode_texts(Model& model, const Vocab& vocab, std::span<const std::string> texts);
EncodedCorpus encode_corpus(Model& model, const Vocab& vocab, std::span<const Passage> passages);
void save_encoded(const std::filesystem::path& dir, const EncodedCorpus& corpus);
EncodedCorpus load_encoded(const std::filesystem::path& dir);

struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;
};
using Ranking = std::vector<ScoredDoc>;
// qid -> ranked list.
using RunResult = std::map<std::string, Ranking>;

// Exact top-k by dot product; equal scores are ordered by doc_id.
Ranking search(const EncodedCorpus& corpus, std::span<const double> query, std::size_t k);
RunResult search_all(const EncodedCorpus& corpus, const std::vector<std::string>& qids,
                     const Tensor& query_vecs, std::size_t k);

void write_run(const std::filesystem::path& path, const RunResult& run,
               const std::string& tag = "msm");
RunResult read_run(const std::filesystem::path& path);

// Metrics average over every query of `qrels` with a nonempty relevant set;
// queries absent from the run score 0.
double mrr_at_k(const RunResult& run, const Qrels& qrels, std::size_t k);
double recall_at_k(const RunResult& run, const Qrels& qrels, std::size_t k);
double map_at_k(const RunResult& run, const Qrels& qrels, std::size_t k);
// Walks each ranking summing passage lengths; the passage that crosses the
// budget is still inside the prefix.
double recall_at_kilotokens(const RunResult& run, const Qrels& qrels,
                            const std::map<std::string, std::size_t>& token_lengths,
                            std::size_t budget_tokens);

// "mrr@10", "recall@100", "map@20", "r@2kt".
struct MetricSpec {
  enum class Kind { kMrr, kRecall, kMap, kKiloTokens } kind = Kind::kMrr;
  std::size_t k = 10;  // cutoff, or token budget for kKiloTokens
  std::string name;
};
MetricSpec parse_metric(const std::string& s);
std::vector<MetricSpec> parse_metrics(const std::string& comma_list);
double evaluate_metric(const MetricSpec& m, const RunResult& run, const Qrels& qrels,
                       const std::map<std::string, std::size_t>& token_lengths);

struct RetrievalScores {
  double mrr = 0.0;
  double recall = 0.0;
};
// Encodes the passages and queries of `set`, searches, and scores @k.
RetrievalScores evaluate_retrieval(Model& model, const Vocab& vocab, const RetrievalSet& set,
                                   std::size_t k, RunResult* run_out = nullptr);

}  // namespace msm

#endif  // MSM_RETRIEVER_HPP_
