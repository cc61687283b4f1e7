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

// Seeded grids of pretrain -> export -> fine-tune -> evaluate runs.
//
// Each run owns runs/<experiment>/<setting>/<seed>/ with a manifest, the
// resolved config, the pretraining log, checkpoint/, export/ and
// metrics.tsv. A run whose manifest is complete is loaded, not recomputed.

#ifndef MSM_EXPERIMENTS_HPP_
#define MSM_EXPERIMENTS_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "msm/config.hpp"
#include "msm/corpus.hpp"

namespace msm {

// Synthetic corpus on disk: documents.jsonl, alignment.tsv, corpus.txt.
void write_corpus_dir(const std::filesystem::path& dir, const SyntheticCorpus& corpus);

struct ExperimentData {
  Vocab vocab;
  std::vector<Document> train;    // segmented, latent ids outside the held-out set
  std::vector<Document> heldout;
  std::vector<std::string> languages;
  std::map<std::string, std::string> digests;  // input file -> digest
};

// Throws std::runtime_error when the directory lacks the corpus files.
ExperimentData load_experiment_data(const std::filesystem::path& corpus_dir, const RunConfig& config);

struct LanguageScore {
  std::string language;
  double mrr = 0.0;
  double recall = 0.0;
};

// One full run into run_dir; reuses a completed run with matching inputs.
std::vector<LanguageScore> run_single(const RunConfig& config, const ExperimentData& data,
                                      const std::filesystem::path& run_dir,
                                      const std::function<void(const std::string&)>& log = {});

struct ExperimentSetting {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;  // config key, value
};

struct ExperimentPlan {
  std::string name;
  std::vector<ExperimentSetting> settings;
  std::vector<std::uint64_t> seeds;
};

// transfer, objective, mu, negatives, projector, layers.
const std::vector<std::string>& plan_names();
ExperimentPlan make_plan(const std::string& name, std::size_t num_seeds);

struct ResultRow {
  std::string setting;
  std::string language;
  double mrr = 0.0;
  double recall = 0.0;
  std::string seed;     // "median" on summary rows
  bool median = false;
};

struct ResultTable {
  std::string experiment;
  std::size_t k = 10;
  std::vector<ResultRow> rows;
};

ResultTable run_experiment(const ExperimentPlan& plan, const RunConfig& base,
                           const std::filesystem::path& corpus_dir,
                           const std::filesystem::path& runs_root,
                           const std::function<void(const std::string&)>& log = {});

double median(std::vector<double> values);
// Raw rows plus one median row per (setting, language), settings in first-seen order.
ResultTable with_medians(const ResultTable& table);
// Median row of (setting, language); throws std::out_of_range when absent.
const ResultRow& median_row(const ResultTable& table, const std::string& setting,
                            const std::string& language);

std::string format_tsv(const ResultTable& table);
ResultTable parse_tsv(const std::string& text);
std::string format_markdown(const ResultTable& table);

// Collects metrics.tsv of every completed run under runs_root/<experiment>.
ResultTable collect_results(const std::filesystem::path& runs_root, const std::string& experiment);

}  // namespace msm

#endif  // MSM_EXPERIMENTS_HPP_
