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

// Command-line entry point. Exit codes: 0 success, 1 usage or
// configuration error, 2 runtime failure (including a failed grad check).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msm/config.hpp"
#include "msm/experiments.hpp"
#include "msm/pretrain.hpp"
#include "msm/retriever.hpp"

namespace fs = std::filesystem;
using namespace msm;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigOptions {
  std::string config_file;
  std::vector<std::string> sets;
};

std::string keys_footer() {
  const RunConfig defaults;
  std::string out = "Config keys (--set key=value, or one per line in --config):\n";
  for (const ConfigKey& k : config_keys()) {
    out += "  " + k.key + " = " + get_config_value(defaults, k.key) + "\n      " + k.help + "\n";
  }
  return out;
}

void add_config_options(CLI::App* cmd, ConfigOptions& opts) {
  cmd->add_option("--config", opts.config_file, "key=value config file");
  cmd->add_option("--set", opts.sets, "override one key, key=value (repeatable)");
  cmd->footer(keys_footer());
}

RunConfig resolve_config(const ConfigOptions& opts) {
  RunConfig c;
  if (!opts.config_file.empty()) apply_config_file(c, opts.config_file);
  for (const std::string& s : opts.sets) {
    auto [k, v] = split_assignment(s);
    set_config_value(c, k, v);
  }
  c.validate();
  return c;
}

fs::path runs_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("MSM_RUNS_DIR"); env != nullptr && *env != '\0') return env;
  return "runs";
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

RunManifest start_manifest(const std::string& command, const RunConfig& c,
                           std::map<std::string, std::string> inputs) {
  RunManifest m;
  m.command = command;
  m.config = config_map(c);
  m.seed = c.pretrain.seed;
  m.started = utc_timestamp();
  m.inputs = std::move(inputs);
  return m;
}

void finish_manifest(const fs::path& dir, RunManifest& m) {
  m.finished = utc_timestamp();
  write_manifest(dir / "manifest.json", m);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

std::vector<Passage> read_passage_file(const fs::path& path) {
  std::vector<Passage> out;
  for (const RawDocument& d : read_documents(path)) {
    Passage p;
    p.passage_id = d.doc_id;
    p.doc_id = d.doc_id;
    for (char c : d.text) p.text += c == '\n' ? ' ' : c;
    p.token_length = split_whitespace(p.text).size();
    out.push_back(std::move(p));
  }
  return out;
}

// ---- subcommands ----

int cmd_gen_corpus(const ConfigOptions& co, const std::string& out_flag) {
  const RunConfig c = resolve_config(co);
  const fs::path out = out_flag;
  SyntheticCorpus corpus = generate_synthetic_corpus(c.corpus);
  write_corpus_dir(out, corpus);
  RunManifest m = start_manifest("gen-corpus", c, {});
  write_manifest(out / "manifest.json", m);
  write_text(out / "config.txt", format_config(c));

  const ExperimentData data = load_experiment_data(out, c);
  data.vocab.save(out / "vocab.txt");
  write_pairs(out / ("pairs." + c.train_lang + ".tsv"),
              make_retrieval_pairs(data.train, data.vocab, c.train_lang, c.corpus.seed));
  for (const std::string& lang : data.languages) {
    RetrievalSet set = make_retrieval_set(data.heldout, data.vocab, lang, c.corpus.seed, c.eval_queries);
    write_passages(out / ("passages." + lang + ".jsonl"), set.passages, lang);
    write_queries(out / ("queries." + lang + ".tsv"), set.queries);
    write_qrels(out / ("qrels." + lang + ".tsv"), set.qrels);
  }
  finish_manifest(out, m);
  std::printf("wrote %zu documents (%zu train, %zu held out) to %s\n", corpus.documents.size(),
              data.train.size(), data.heldout.size(), out.string().c_str());
  return 0;
}

int cmd_pretrain(const ConfigOptions& co, const std::string& docs_flag, const std::string& out_flag,
                 const std::string& runs_flag) {
  RunConfig c = resolve_config(co);
  const fs::path docs = docs_flag;
  require_file(docs, "document file");
  const fs::path out = out_flag.empty() ? runs_dir(runs_flag) / "pretrain" / std::to_string(c.pretrain.seed)
                                        : fs::path(out_flag);
  const std::vector<RawDocument> raw = read_documents(docs);
  std::vector<std::string> text;
  for (const RawDocument& d : raw) text.push_back(d.text);
  const Vocab vocab = Vocab::build(text, c.max_vocab);
  const std::vector<Document> corpus = segment_corpus(raw, vocab);
  c.pretrain.model.vocab_size = vocab.size();

  fs::create_directories(out);
  RunManifest m = start_manifest("pretrain", c, {{docs.filename().string(), file_digest(docs)}});
  write_manifest(out / "manifest.json", m);
  write_text(out / "config.txt", format_config(c));
  PretrainRun run = run_pretrain(corpus, vocab, c.pretrain, out, [&](std::uint64_t step, const LossBreakdown& b) {
    if (step % c.pretrain.log_every == 0) {
      std::fprintf(stderr, "step %llu total %.4f msm %.4f mlm %.4f\n", static_cast<unsigned long long>(step),
                   b.total, b.msm, b.mlm);
    }
  });
  finish_manifest(out, m);
  const LossBreakdown& last = run.history.back();
  std::printf("pretrained %llu steps, final total loss %.6f; export in %s\n",
              static_cast<unsigned long long>(run.state.step), last.total, (out / "export").string().c_str());
  return 0;
}

int cmd_finetune(const ConfigOptions& co, const std::string& model_flag, const std::string& pairs_flag,
                 const std::string& out_flag) {
  const RunConfig c = resolve_config(co);
  require_file(fs::path(model_flag) / "manifest.json", "model checkpoint");
  require_file(pairs_flag, "pairs file");
  LoadedModel loaded = load_model(model_flag);
  if (loaded.model.config.has_document_encoder) loaded.model = export_sentence_encoder(loaded.model);
  const std::vector<RetrievalPair> pairs = read_pairs(pairs_flag);
  const fs::path out = out_flag;
  fs::create_directories(out);
  RunManifest m = start_manifest("finetune", c, {{"pairs", file_digest(pairs_flag)},
                                                 {"model", file_digest(fs::path(model_flag) / "tensors.bin")}});
  write_manifest(out / "manifest.json", m);
  write_text(out / "config.txt", format_config(c));
  std::ofstream log(out / "log.tsv");
  log << "step\tloss\n";
  Model tuned = finetune_biencoder(loaded.model, loaded.vocab, pairs, c.finetune, [&](std::uint64_t s, double l) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%llu\t%.10g\n", static_cast<unsigned long long>(s), l);
    log << buf;
  });
  log.close();
  save_model(out / "model", tuned, loaded.vocab, "finetuned");
  finish_manifest(out, m);
  std::printf("fine-tuned %llu steps on %zu pairs; model in %s\n",
              static_cast<unsigned long long>(c.finetune.total_steps), pairs.size(),
              (out / "model").string().c_str());
  return 0;
}

int cmd_encode(const std::string& model_flag, const std::string& passages_flag, const std::string& out_flag) {
  require_file(fs::path(model_flag) / "manifest.json", "model checkpoint");
  require_file(passages_flag, "passage file");
  LoadedModel loaded = load_model(model_flag);
  const std::vector<Passage> passages = read_passage_file(passages_flag);
  save_encoded(out_flag, encode_corpus(loaded.model, loaded.vocab, passages));
  std::printf("encoded %zu passages into %s\n", passages.size(), out_flag.c_str());
  return 0;
}

int cmd_search(const std::string& model_flag, const std::string& index_flag, const std::string& queries_flag,
               std::size_t k, const std::string& out_flag) {
  require_file(fs::path(model_flag) / "manifest.json", "model checkpoint");
  require_file(queries_flag, "query file");
  LoadedModel loaded = load_model(model_flag);
  const EncodedCorpus index = load_encoded(index_flag);
  std::vector<std::string> qids, texts;
  for (const Query& q : read_queries(queries_flag)) {
    qids.push_back(q.qid);
    texts.push_back(q.text);
  }
  const RunResult run = search_all(index, qids, encode_texts(loaded.model, loaded.vocab, texts), k);
  write_run(out_flag, run);
  std::printf("searched %zu queries, top %zu, run in %s\n", qids.size(), k, out_flag.c_str());
  return 0;
}

int cmd_eval(const std::string& run_flag, const std::string& qrels_flag, const std::string& metric_flag,
             const std::string& passages_flag) {
  require_file(run_flag, "run file");
  require_file(qrels_flag, "qrels file");
  std::vector<MetricSpec> metrics;
  try {
    metrics = parse_metrics(metric_flag);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  std::map<std::string, std::size_t> lengths;
  for (const MetricSpec& m : metrics) {
    if (m.kind == MetricSpec::Kind::kKiloTokens && passages_flag.empty()) {
      throw UsageError(m.name + " needs --passages for token lengths");
    }
  }
  if (!passages_flag.empty()) {
    require_file(passages_flag, "passage file");
    for (const Passage& p : read_passage_file(passages_flag)) lengths[p.passage_id] = p.token_length;
  }
  const RunResult run = read_run(run_flag);
  const Qrels qrels = read_qrels(qrels_flag);
  for (const MetricSpec& m : metrics) {
    std::printf("%s\t%.6f\n", m.name.c_str(), evaluate_metric(m, run, qrels, lengths));
  }
  return 0;
}

int cmd_ablate(const ConfigOptions& co, const std::string& name, std::size_t seeds, const std::string& corpus_flag,
               const std::string& runs_flag) {
  const RunConfig c = resolve_config(co);
  ExperimentPlan plan;
  try {
    plan = make_plan(name, seeds);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path root = runs_dir(runs_flag);
  ResultTable table = with_medians(run_experiment(plan, c, corpus_flag, root, [](const std::string& s) {
    std::fprintf(stderr, "%s\n", s.c_str());
  }));
  write_text(root / name / "results.tsv", format_tsv(table));
  write_text(root / name / "results.md", format_markdown(table));
  std::fputs(format_markdown(table).c_str(), stdout);
  return 0;
}

int cmd_gradcheck(std::size_t dim, std::uint64_t seed, bool undetached, double tol) {
  PipelineCheckOptions o;
  o.dim = dim;
  o.seed = seed;
  o.detach_alpha = !undetached;
  o.tolerance = tol;
  const GradCheckReport r = pipeline_grad_check(o);
  std::printf("max relative error %.3e at %s[%zu] over %zu coordinates\n", r.max_rel_error, r.worst.name.c_str(),
              r.worst.index, r.coords_checked);
  std::printf("%s (tolerance %.0e)\n", r.passed ? "PASS" : "FAIL", tol);
  return r.passed ? 0 : kRuntime;
}

int cmd_report(const std::string& name, const std::string& format, const std::string& out_flag,
               const std::string& runs_flag) {
  const ResultTable table = with_medians(collect_results(runs_dir(runs_flag), name));
  const std::string text = format == "tsv" ? format_tsv(table) : format_markdown(table);
  if (out_flag.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    write_text(out_flag, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked sentence model pretraining and dense retrieval"};
  app.require_subcommand(1);
  std::string runs_flag;
  app.add_option("--runs-dir", runs_flag, "run directory root (default $MSM_RUNS_DIR or ./runs)");

  ConfigOptions gen_co, pre_co, ft_co, abl_co;
  std::string out, docs, model, pairs, passages, index, queries, run, qrels, metric = "mrr@10", name, format = "markdown";
  std::string corpus = "corpus";
  std::size_t k = 100, seeds = 3, dim = 8;
  std::uint64_t seed = 1;
  double tol = 1e-4;
  bool undetached = false;

  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic multilingual corpus with retrieval files");
  add_config_options(gen, gen_co);
  gen->add_option("--out", out, "output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "pretrain on a document file");
  add_config_options(pre, pre_co);
  pre->add_option("--docs", docs, "documents.jsonl")->required();
  pre->add_option("--out", out, "run directory (default <runs>/pretrain/<seed>)");

  auto* ft = app.add_subcommand("finetune", "fine-tune a sentence encoder with in-batch negatives");
  add_config_options(ft, ft_co);
  ft->add_option("--model", model, "checkpoint directory (export or pretrain)")->required();
  ft->add_option("--pairs", pairs, "pairs TSV")->required();
  ft->add_option("--out", out, "output directory")->required();

  auto* enc = app.add_subcommand("encode", "embed a passage file");
  enc->add_option("--model", model, "checkpoint directory")->required();
  enc->add_option("--passages", passages, "passage file")->required();
  enc->add_option("--out", out, "index directory")->required();

  auto* srch = app.add_subcommand("search", "exact top-k search");
  srch->add_option("--model", model, "checkpoint directory")->required();
  srch->add_option("--index", index, "index directory from encode")->required();
  srch->add_option("--queries", queries, "query TSV")->required();
  srch->add_option("--k", k, "results per query")->capture_default_str();
  srch->add_option("--out", out, "TREC run file")->required();

  auto* ev = app.add_subcommand("eval", "score a TREC run");
  ev->add_option("--run", run, "TREC run file")->required();
  ev->add_option("--qrels", qrels, "qrels TSV")->required();
  ev->add_option("--metric", metric, "comma list: mrr@k, recall@k, map@k, r@Nkt")->capture_default_str();
  ev->add_option("--passages", passages, "passage file, needed for r@Nkt");

  auto* abl = app.add_subcommand("ablate", "run an experiment grid and report medians");
  add_config_options(abl, abl_co);
  abl->add_option("--name", name, "transfer, objective, mu, negatives, projector or layers")->required();
  abl->add_option("--seeds", seeds, "seeds per setting")->capture_default_str();
  abl->add_option("--corpus", corpus, "corpus directory from gen-corpus")->capture_default_str();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full pretraining loss");
  gc->add_option("--dim", dim, "hidden size")->capture_default_str();
  gc->add_option("--seed", seed, "seed")->capture_default_str();
  gc->add_option("--tol", tol, "relative error tolerance")->capture_default_str();
  gc->add_flag("--undetached", undetached, "differentiate through alpha (expected to fail)");

  auto* rep = app.add_subcommand("report", "summarize completed runs of an experiment");
  rep->add_option("--name", name, "experiment name")->required();
  rep->add_option("--format", format, "tsv or markdown")
      ->check(CLI::IsMember({"tsv", "markdown"}))
      ->capture_default_str();
  rep->add_option("--out", out, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*gen) return cmd_gen_corpus(gen_co, out);
    if (*pre) return cmd_pretrain(pre_co, docs, out, runs_flag);
    if (*ft) return cmd_finetune(ft_co, model, pairs, out);
    if (*enc) return cmd_encode(model, passages, out);
    if (*srch) return cmd_search(model, index, queries, k, out);
    if (*ev) return cmd_eval(run, qrels, metric, passages);
    if (*abl) return cmd_ablate(abl_co, name, seeds, corpus, runs_flag);
    if (*gc) return cmd_gradcheck(dim, seed, undetached, tol);
    if (*rep) return cmd_report(name, format, out, runs_flag);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
