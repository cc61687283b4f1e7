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

#ifndef MSM_PRETRAIN_HPP_
#define MSM_PRETRAIN_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msm/corpus.hpp"
#include "msm/gradcheck.hpp"
#include "msm/loss.hpp"
#include "msm/model.hpp"
#include "msm/optim.hpp"

namespace msm {

struct PretrainConfig {
  ModelConfig model;
  LossConfig loss;
  std::size_t batch_docs = 16;
  std::size_t cross_negative_cap = 512;
  // false drops intra-document negatives (cross-only setting).
  bool intra_negatives = true;
  // Draw each batch from a single language, chosen per step. Off by default:
  // batches mix languages so cross pools are multilingual.
  bool single_language_batches = false;
  // Weight of the sentence-level term; 0 gives the MLM-only baseline.
  double msm_weight = 1.0;
  double mlm_rate = 0.15;
  double learning_rate = 1e-3;
  std::uint64_t warmup_steps = 100;
  std::uint64_t total_steps = 2000;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  std::uint64_t log_every = 1;

  void validate() const;
};

// One masked-prediction instance: document `doc` of the batch with sentence
// `masked` replaced by the mask vector.
struct MaskedInstance {
  std::size_t doc = 0;
  std::size_t masked = 0;
  std::vector<std::size_t> cross;  // sentence rows of other documents, ascending
};

struct PretrainBatch {
  std::vector<std::size_t> doc_indices;   // into the corpus
  std::vector<std::string> langs;         // per batch document
  std::vector<std::size_t> doc_offset;    // first sentence row per document
  std::vector<std::size_t> doc_length;
  SequenceBatch clean;                    // every sentence, unmasked
  SequenceBatch masked_tokens;            // same sentences with MLM masking
  std::vector<std::size_t> mlm_rows;      // rows of masked_tokens
  std::vector<TokenId> mlm_targets;
  std::vector<MaskedInstance> instances;

  std::size_t num_sentences() const { return clean.segments.size(); }
};

// Samples batch_docs distinct documents (all of them if the corpus is
// smaller) with a stream derived from (seed, step).
PretrainBatch build_batch(std::span<const Document> corpus, const PretrainConfig& config,
                          std::uint64_t step);
// Batch over the given documents, in order.
PretrainBatch build_batch_from(std::span<const Document> corpus,
                               std::span<const std::size_t> doc_indices,
                               const PretrainConfig& config, std::uint64_t step);

// Loss graph of one batch. `frozen_alpha`, when set, replaces the computed
// per-instance alpha; `alpha_out` receives the values used.
struct PretrainForward {
  Var total;
  Var msm;
  Var mlm;
  std::vector<double> alpha;
  double score_min = 0.0;
  double score_max = 0.0;
};
PretrainForward pretrain_forward(Graph& g, Model& model, const PretrainBatch& batch,
                                 const PretrainConfig& config, bool detach_alpha = true,
                                 const std::vector<double>* frozen_alpha = nullptr);

struct PretrainState {
  Model model;
  Adam adam;
  std::uint64_t step = 0;
};

PretrainState init_pretrain(const PretrainConfig& config);

// Forward, backward, clipping, one Adam update at the scheduled rate.
// Throws std::runtime_error on a non-finite loss.
LossBreakdown train_step(PretrainState& state, const PretrainBatch& batch,
                         const PretrainConfig& config);

// Full checkpoint (weights, optimizer moments, step).
void save_pretrain_checkpoint(const std::filesystem::path& dir, const PretrainState& state,
                              const Vocab& vocab);
PretrainState load_pretrain_checkpoint(const std::filesystem::path& dir, Vocab* vocab = nullptr);
// Sentence encoder only, for fine-tuning.
void save_export(const std::filesystem::path& dir, const Model& model, const Vocab& vocab);

std::string log_header();
std::string log_line(std::uint64_t step, const LossBreakdown& b);

// Trains from scratch to total_steps. Writes log.tsv and checkpoint/ plus
// export/ under run_dir.
struct PretrainRun {
  PretrainState state;
  std::vector<LossBreakdown> history;
};
PretrainRun run_pretrain(std::span<const Document> corpus, const Vocab& vocab,
                         const PretrainConfig& config, const std::filesystem::path& run_dir,
                         const std::function<void(std::uint64_t, const LossBreakdown&)>& on_step = {});

// Finite-difference check of the whole pretraining loss (clean pass, masked
// document encoding, projections, contrastive + MLM terms) on a tiny
// two-language corpus with L_s = L_d = 2. alpha is frozen at its
// base-point value for the numeric side; with detach_alpha false the
// analytic side differentiates through alpha and the check should fail.
struct PipelineCheckOptions {
  std::size_t dim = 8;
  std::uint64_t seed = 1;
  bool detach_alpha = true;
  std::size_t max_coords_per_param = 8;
  double tolerance = 1e-4;
};
GradCheckReport pipeline_grad_check(const PipelineCheckOptions& options);

}  // namespace msm

#endif  // MSM_PRETRAIN_HPP_
