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

#include "msm/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "msm/pretrain.hpp"
#include "msm/retriever.hpp"

namespace msm {
namespace {

namespace fs = std::filesystem;

constexpr const char* kDocumentsFile = "documents.jsonl";
constexpr const char* kAlignmentFile = "alignment.tsv";
// Evaluation queries are drawn from this stream so every run of a corpus
// scores against the same queries.
constexpr std::uint64_t kEvalStream = 0x65766131;
constexpr std::uint64_t kPairStream = 0x70616972;

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_number(const std::string& s) {
  std::size_t pos = 0;
  double x = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return x;
}

std::string metrics_header(std::size_t k) {
  return "language\tmrr@" + std::to_string(k) + "\trecall@" + std::to_string(k);
}

void write_metrics(const fs::path& path, std::size_t k, const std::vector<LanguageScore>& scores) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << metrics_header(k) << '\n';
  for (const LanguageScore& s : scores) out << s.language << '\t' << fmt(s.mrr) << '\t' << fmt(s.recall) << '\n';
}

std::vector<LanguageScore> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<LanguageScore> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 3) throw std::runtime_error("malformed metrics line in " + path.string());
    out.push_back({f[0], parse_number(f[1]), parse_number(f[2])});
  }
  return out;
}

std::size_t metrics_k(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  auto f = split_tabs(line);
  if (f.size() != 3 || f[1].rfind("mrr@", 0) != 0) throw std::runtime_error("malformed " + path.string());
  return std::stoul(f[1].substr(4));
}

}  // namespace

void write_corpus_dir(const fs::path& dir, const SyntheticCorpus& corpus) {
  fs::create_directories(dir);
  write_documents(dir / kDocumentsFile, corpus.documents);
  write_alignment(dir / kAlignmentFile, corpus.alignment);
}

ExperimentData load_experiment_data(const fs::path& corpus_dir, const RunConfig& config) {
  const fs::path docs_path = corpus_dir / kDocumentsFile;
  const fs::path align_path = corpus_dir / kAlignmentFile;
  for (const fs::path& p : {docs_path, align_path}) {
    if (!fs::exists(p)) throw std::runtime_error("missing corpus file " + p.string());
  }
  ExperimentData data;
  const std::vector<RawDocument> raw = read_documents(docs_path);
  const std::vector<AlignmentRow> alignment = read_alignment(align_path);
  data.digests[kDocumentsFile] = file_digest(docs_path);
  data.digests[kAlignmentFile] = file_digest(align_path);

  std::map<std::string, std::size_t> latent_of;
  std::size_t num_latent = 0;
  for (const AlignmentRow& r : alignment) {
    latent_of[r.doc_id] = r.latent_id;
    num_latent = std::max(num_latent, r.latent_id + 1);
  }
  // The tail of the latent id range is held out in every language.
  const auto cut = static_cast<std::size_t>(
      std::llround(static_cast<double>(num_latent) * (1.0 - config.heldout_fraction)));

  std::vector<std::string> text;
  std::set<std::string> langs;
  for (const RawDocument& d : raw) {
    text.push_back(d.text);
    langs.insert(d.lang);
  }
  data.vocab = Vocab::build(text, config.max_vocab);
  data.languages.assign(langs.begin(), langs.end());
  for (const RawDocument& d : raw) {
    auto it = latent_of.find(d.doc_id);
    if (it == latent_of.end()) throw std::runtime_error("document " + d.doc_id + " missing from alignment");
    std::vector<Document> parts = segment_and_split(d, data.vocab);
    auto& dst = it->second >= cut ? data.heldout : data.train;
    for (Document& p : parts) dst.push_back(std::move(p));
  }
  if (data.train.empty() || data.heldout.empty()) {
    throw std::runtime_error("held-out split leaves an empty side; adjust eval.heldout_fraction");
  }
  return data;
}

std::vector<LanguageScore> run_single(const RunConfig& base, const ExperimentData& data,
                                      const fs::path& run_dir,
                                      const std::function<void(const std::string&)>& log) {
  RunConfig config = base;
  config.pretrain.model.vocab_size = data.vocab.size();
  config.validate();
  const fs::path manifest_path = run_dir / "manifest.json";
  const auto cmap = config_map(config);

  if (fs::exists(manifest_path)) {
    RunManifest old = read_manifest(manifest_path);
    if (old.complete() && fs::exists(run_dir / "metrics.tsv")) {
      if (old.config != cmap) {
        throw std::runtime_error("run directory " + run_dir.string() +
                                 " holds a different configuration; remove it to rerun");
      }
      if (old.inputs != data.digests) {
        throw std::runtime_error("inputs changed since " + run_dir.string() + " was produced");
      }
      if (log) log("skip " + run_dir.string() + " (complete)");
      return read_metrics(run_dir / "metrics.tsv");
    }
  }

  RunManifest manifest;
  manifest.command = "experiment-run";
  manifest.config = cmap;
  manifest.seed = config.pretrain.seed;
  manifest.started = utc_timestamp();
  manifest.inputs = data.digests;
  fs::create_directories(run_dir);
  write_manifest(manifest_path, manifest);
  {
    std::ofstream out(run_dir / "config.txt");
    out << format_config(config);
  }

  if (log) log("pretrain " + run_dir.string());
  PretrainRun pre = run_pretrain(data.train, data.vocab, config.pretrain, run_dir);
  const Model encoder = export_sentence_encoder(pre.state.model);

  const std::vector<RetrievalPair> pairs = make_retrieval_pairs(
      data.train, data.vocab, config.train_lang, derive_seed(config.finetune.seed, kPairStream));
  if (pairs.size() < config.finetune.batch_size) {
    throw std::runtime_error("too few fine-tuning pairs in " + config.train_lang);
  }
  if (log) log("finetune " + run_dir.string());
  Model tuned = finetune_biencoder(encoder, data.vocab, pairs, config.finetune);
  save_model(run_dir / "finetuned", tuned, data.vocab, "finetuned");

  std::vector<LanguageScore> scores;
  for (const std::string& lang : data.languages) {
    RetrievalSet set = make_retrieval_set(data.heldout, data.vocab, lang,
                                          derive_seed(config.corpus.seed, kEvalStream),
                                          config.eval_queries);
    RunResult run;
    RetrievalScores s = evaluate_retrieval(tuned, data.vocab, set, config.eval_k, &run);
    write_run(run_dir / ("run." + lang + ".trec"), run, "msm");
    scores.push_back({lang, s.mrr, s.recall});
  }
  write_metrics(run_dir / "metrics.tsv", config.eval_k, scores);
  manifest.finished = utc_timestamp();
  write_manifest(manifest_path, manifest);
  return scores;
}

const std::vector<std::string>& plan_names() {
  static const std::vector<std::string> names = {"transfer", "objective", "mu",
                                                 "negatives", "projector", "layers"};
  return names;
}

ExperimentPlan make_plan(const std::string& name, std::size_t num_seeds) {
  if (num_seeds == 0) throw std::invalid_argument("need at least one seed");
  ExperimentPlan plan;
  plan.name = name;
  for (std::size_t s = 1; s <= num_seeds; ++s) plan.seeds.push_back(s);
  auto& st = plan.settings;
  if (name == "transfer") {
    for (const char* m : {"share_all", "sep_doc", "sep_doc_head"}) st.push_back({m, {{"model.sharing", m}}});
  } else if (name == "objective") {
    st.push_back({"msm", {}});
    st.push_back({"mlm_only", {{"loss.msm_weight", "0"}}});
  } else if (name == "mu") {
    for (const char* mu : {"0", "0.3", "0.5", "0.7"}) st.push_back({std::string("mu=") + mu, {{"loss.mu", mu}}});
    // No dynamic bias: the intra term is dropped, which is mu = 0.
    st.push_back({"no_bias", {{"loss.mu", "0"}}});
    st.push_back({"cross_only", {{"loss.intra_negatives", "false"}}});
  } else if (name == "negatives") {
    // 96 documents of 4-8 sentences give cross pools above 512.
    for (const char* n : {"64", "128", "256", "512"}) {
      st.push_back({std::string("neg=") + n, {{"pretrain.batch_docs", "96"}, {"pretrain.cross_negative_cap", n}}});
    }
  } else if (name == "projector") {
    for (const char* p : {"none", "shared", "asymmetric"}) st.push_back({p, {{"model.projector", p}}});
  } else if (name == "layers") {
    for (const char* l : {"1", "2", "4", "6"}) {
      st.push_back({std::string("layers=") + l, {{"model.document_layers", l}}});
    }
  } else {
    std::string msg = "unknown experiment '" + name + "'; expected one of:";
    for (const auto& n : plan_names()) msg += " " + n;
    throw std::invalid_argument(msg);
  }
  return plan;
}

ResultTable run_experiment(const ExperimentPlan& plan, const RunConfig& base, const fs::path& corpus_dir,
                           const fs::path& runs_root,
                           const std::function<void(const std::string&)>& log) {
  const ExperimentData data = load_experiment_data(corpus_dir, base);
  ResultTable table;
  table.experiment = plan.name;
  table.k = base.eval_k;
  for (const ExperimentSetting& setting : plan.settings) {
    for (std::uint64_t seed : plan.seeds) {
      RunConfig c = base;
      for (const auto& [k, v] : setting.overrides) set_config_value(c, k, v);
      set_config_value(c, "seed", std::to_string(seed));
      const fs::path dir = runs_root / plan.name / setting.name / std::to_string(seed);
      for (const LanguageScore& s : run_single(c, data, dir, log)) {
        table.rows.push_back({setting.name, s.language, s.mrr, s.recall, std::to_string(seed), false});
      }
    }
  }
  return table;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ResultTable with_medians(const ResultTable& table) {
  ResultTable out;
  out.experiment = table.experiment;
  out.k = table.k;
  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::pair<std::vector<double>, std::vector<double>>> acc;
  for (const ResultRow& r : table.rows) {
    if (r.median) continue;
    out.rows.push_back(r);
    auto key = std::make_pair(r.setting, r.language);
    if (!acc.count(key)) keys.push_back(key);
    acc[key].first.push_back(r.mrr);
    acc[key].second.push_back(r.recall);
  }
  for (const auto& key : keys) {
    const auto& [m, rc] = acc[key];
    out.rows.push_back({key.first, key.second, median(m), median(rc), "median", true});
  }
  return out;
}

const ResultRow& median_row(const ResultTable& table, const std::string& setting,
                            const std::string& language) {
  for (const ResultRow& r : table.rows) {
    if (r.median && r.setting == setting && r.language == language) return r;
  }
  throw std::out_of_range("no median row for " + setting + "/" + language);
}

std::string format_tsv(const ResultTable& table) {
  const std::string k = std::to_string(table.k);
  std::string out = "setting\tlanguage\tmrr@" + k + "\trecall@" + k + "\tseed\tmedian\n";
  for (const ResultRow& r : table.rows) {
    out += r.setting + '\t' + r.language + '\t' + fmt(r.mrr) + '\t' + fmt(r.recall) + '\t' + r.seed + '\t' +
           (r.median ? "1" : "0") + '\n';
  }
  return out;
}

ResultTable parse_tsv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("empty result table");
  auto head = split_tabs(line);
  if (head.size() != 6 || head[0] != "setting" || head[2].rfind("mrr@", 0) != 0) {
    throw std::invalid_argument("not a result table header: " + line);
  }
  ResultTable t;
  t.k = std::stoul(head[2].substr(4));
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 6 || (f[5] != "0" && f[5] != "1")) {
      throw std::invalid_argument("malformed result row at line " + std::to_string(lineno));
    }
    t.rows.push_back({f[0], f[1], parse_number(f[2]), parse_number(f[3]), f[4], f[5] == "1"});
  }
  return t;
}

std::string format_markdown(const ResultTable& table) {
  const std::string k = std::to_string(table.k);
  std::string out = "| setting | language | MRR@" + k + " | Recall@" + k + " | seed |\n";
  out += "|---|---|---:|---:|---|\n";
  std::map<std::string, std::set<std::string>> seeds;
  for (const ResultRow& r : table.rows) {
    char m[32], rc[32];
    std::snprintf(m, sizeof(m), "%.4f", r.mrr);
    std::snprintf(rc, sizeof(rc), "%.4f", r.recall);
    out += "| " + r.setting + " | " + r.language + " | " + m + " | " + rc + " | " + r.seed + " |\n";
    if (!r.median) seeds[r.setting].insert(r.seed);
  }
  bool few = false;
  for (const auto& [s, v] : seeds) few = few || v.size() < 3;
  if (few) out += "\nFewer than 3 seeds for some settings: non-confirmatory.\n";
  return out;
}

ResultTable collect_results(const fs::path& runs_root, const std::string& experiment) {
  const fs::path root = runs_root / experiment;
  if (!fs::is_directory(root)) throw std::runtime_error("no runs under " + root.string());
  ResultTable table;
  table.experiment = experiment;
  std::vector<fs::path> settings;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) settings.push_back(e.path());
  }
  std::sort(settings.begin(), settings.end());
  bool have_k = false;
  for (const fs::path& sdir : settings) {
    std::vector<fs::path> seeds;
    for (const auto& e : fs::directory_iterator(sdir)) {
      if (e.is_directory()) seeds.push_back(e.path());
    }
    std::sort(seeds.begin(), seeds.end());
    for (const fs::path& dir : seeds) {
      const fs::path mpath = dir / "manifest.json";
      if (!fs::exists(mpath) || !read_manifest(mpath).complete()) continue;
      const std::size_t k = metrics_k(dir / "metrics.tsv");
      if (have_k && k != table.k) throw std::runtime_error("runs under " + root.string() + " mix cutoffs");
      table.k = k;
      have_k = true;
      for (const LanguageScore& s : read_metrics(dir / "metrics.tsv")) {
        table.rows.push_back({sdir.filename().string(), s.language, s.mrr, s.recall,
                              dir.filename().string(), false});
      }
    }
  }
  return table;
}

}  // namespace msm
