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

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "msm/config.hpp"
#include "msm/experiments.hpp"

using namespace msm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("msm_exp_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny_config() {
  RunConfig c;
  for (const char* kv : {"corpus.docs=30", "corpus.latent_vocab=30", "corpus.topics=4", "model.hidden=8",
                         "model.heads=2", "model.sentence_layers=1", "model.document_layers=1",
                         "pretrain.batch_docs=4", "pretrain.steps=6", "pretrain.warmup=1", "pretrain.log_every=1",
                         "finetune.batch=4", "finetune.steps=4", "finetune.warmup=1", "eval.queries=10"}) {
    auto [k, v] = split_assignment(kv);
    set_config_value(c, k, v);
  }
  return c;
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char ch : s) n += ch == '\n';
  return n;
}

}  // namespace

TEST_CASE("config keys round trip through text") {
  RunConfig c;
  set_config_value(c, "model.sharing", "sep_doc_head");
  set_config_value(c, "loss.mu", "0.3");
  set_config_value(c, "loss.intra_negatives", "false");
  RunConfig back;
  apply_config_text(back, format_config(c), "mem");
  CHECK(config_map(back) == config_map(c));
  CHECK(back.pretrain.model.sharing == DocEncoderSharing::kSepDocHead);
  CHECK(back.pretrain.loss.mu == 0.3);
  CHECK_FALSE(back.pretrain.intra_negatives);
  CHECK(count_lines(format_config(c)) == config_keys().size());
}

TEST_CASE("config parsing") {
  RunConfig c;
  apply_config_text(c, "# comment\n\n  pretrain.steps = 7   # trailing\nseed=9\n", "mem");
  CHECK(c.pretrain.total_steps == 7);
  CHECK(c.pretrain.seed == 9);
  CHECK(c.finetune.seed == 9);

  try {
    set_config_value(c, "pretrain.stpes", "1");
    FAIL("expected UnknownKeyError");
  } catch (const UnknownKeyError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("pretrain.stpes") != std::string::npos);
    CHECK(msg.find("pretrain.steps") != std::string::npos);
    CHECK(msg.find("model.sharing") != std::string::npos);
  }
  CHECK_THROWS_AS(set_config_value(c, "pretrain.steps", "-3"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "pretrain.steps", "3x"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "pretrain.lr", "nan"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "model.sharing", "half"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "loss.intra_negatives", "maybe"), ConfigError);
  CHECK_THROWS_AS(split_assignment("no equals sign"), ConfigError);
  CHECK_THROWS_WITH_AS(apply_config_text(c, "ok=1\n", "f.txt"), doctest::Contains("f.txt:1"), UnknownKeyError);

  try {
    apply_config_file(c, "/nonexistent/dir/run.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/dir/run.cfg") != std::string::npos);
  }
}

TEST_CASE("config validation") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  c.heldout_fraction = 1.0;
  CHECK_THROWS(c.validate());
  c = RunConfig();
  set_config_value(c, "pretrain.warmup", "5000");
  CHECK_THROWS(c.validate());
}

TEST_CASE("digests are FNV-1a 64") {
  CHECK(text_digest("") == "cbf29ce484222325");
  CHECK(text_digest("a") == "af63dc4c8601ec8c");
  const fs::path p = scratch("digest.txt");
  std::ofstream(p) << "a";
  CHECK(file_digest(p) == "af63dc4c8601ec8c");
  fs::remove(p);
}

TEST_CASE("manifest round trip") {
  RunManifest m;
  m.command = "pretrain";
  m.config = config_map(RunConfig());
  m.seed = 3;
  m.started = utc_timestamp();
  m.inputs = {{"documents.jsonl", "0123456789abcdef"}};
  CHECK_FALSE(m.complete());
  const fs::path p = scratch("manifest") / "manifest.json";
  write_manifest(p, m);
  RunManifest back = read_manifest(p);
  CHECK(back.to_json() == m.to_json());
  CHECK(back.started.size() == 20);
  fs::remove_all(p.parent_path());
}

TEST_CASE("median") {
  CHECK(median({1, 2, 9}) == 2);
  CHECK(median({9, 1, 2}) == 2);
  CHECK(median({1, 2, 3, 10}) == 2.5);
  CHECK(median({4}) == 4);
  CHECK_THROWS(median({}));
}

TEST_CASE("result tables") {
  ResultTable t;
  t.experiment = "x";
  t.rows = {{"a", "L0", 0.5, 0.7, "1", false}, {"a", "L0", 0.25, 0.6, "2", false}, {"a", "L0", 1.0, 0.9, "3", false}};

  SUBCASE("markdown has one body row per row") {
    const std::string md = format_markdown(t);
    CHECK(count_lines(md) == 2 + 3);
    CHECK(md.find("| a | L0 | 0.5000 | 0.7000 | 1 |") != std::string::npos);
  }
  SUBCASE("medians are appended per setting and language") {
    ResultTable m = with_medians(t);
    REQUIRE(m.rows.size() == 4);
    CHECK(median_row(m, "a", "L0").mrr == 0.5);
    CHECK(median_row(m, "a", "L0").recall == 0.7);
    CHECK_THROWS_AS(median_row(m, "a", "L1"), std::out_of_range);
    // Idempotent.
    CHECK(with_medians(m).rows.size() == 4);
  }
  SUBCASE("tsv round trips") {
    ResultTable m = with_medians(t);
    m.rows[0].mrr = 0.1 + 0.2;  // not exactly representable in short decimal
    ResultTable back = parse_tsv(format_tsv(m));
    REQUIRE(back.rows.size() == m.rows.size());
    for (std::size_t i = 0; i < m.rows.size(); ++i) {
      CHECK(back.rows[i].setting == m.rows[i].setting);
      CHECK(back.rows[i].mrr == m.rows[i].mrr);
      CHECK(back.rows[i].recall == m.rows[i].recall);
      CHECK(back.rows[i].seed == m.rows[i].seed);
      CHECK(back.rows[i].median == m.rows[i].median);
    }
    CHECK(back.k == 10);
    CHECK_THROWS(parse_tsv("bad header\n"));
    CHECK_THROWS(parse_tsv(format_tsv(m) + "a\tL0\t1\n"));
  }
  SUBCASE("few seeds are flagged") {
    t.rows.pop_back();
    CHECK(format_markdown(t).find("non-confirmatory") != std::string::npos);
  }
}

TEST_CASE("experiment plans") {
  const ExperimentPlan transfer = make_plan("transfer", 3);
  CHECK(transfer.settings.size() * transfer.seeds.size() == 9);
  CHECK(make_plan("mu", 3).settings.size() == 6);
  CHECK(make_plan("negatives", 3).settings.size() == 4);
  CHECK(make_plan("projector", 3).settings.size() == 3);
  CHECK(make_plan("layers", 3).settings.size() == 4);
  CHECK(make_plan("objective", 3).settings.size() == 2);
  for (const auto& name : plan_names()) {
    for (const auto& s : make_plan(name, 1).settings) {
      RunConfig c;
      for (const auto& [k, v] : s.overrides) CHECK_NOTHROW(set_config_value(c, k, v));
    }
  }
  CHECK_THROWS_AS(make_plan("nope", 3), std::invalid_argument);
  CHECK_THROWS_AS(make_plan("mu", 0), std::invalid_argument);
}

TEST_CASE("missing corpus is an error") {
  CHECK_THROWS_WITH_AS(load_experiment_data(scratch("none"), RunConfig()), doctest::Contains("missing corpus"),
                       std::runtime_error);
}

TEST_CASE("held-out split keeps latent documents together") {
  RunConfig c = tiny_config();
  const fs::path dir = scratch("split");
  write_corpus_dir(dir, generate_synthetic_corpus(c.corpus));
  const ExperimentData d = load_experiment_data(dir, c);
  CHECK(d.languages == std::vector<std::string>{"L0", "L1"});
  std::set<std::string> train_ids, held_ids;
  auto latent = [](const std::string& id) { return id.substr(3, 6); };
  for (const Document& doc : d.train) train_ids.insert(latent(doc.doc_id));
  for (const Document& doc : d.heldout) held_ids.insert(latent(doc.doc_id));
  for (const auto& id : held_ids) CHECK(train_ids.count(id) == 0);
  CHECK(held_ids.size() == 6);  // 20% of 30
  fs::remove_all(dir);
}

TEST_CASE("experiment runs are deterministic and resumable") {
  RunConfig c = tiny_config();
  const fs::path root = scratch("grid");
  write_corpus_dir(root / "corpus", generate_synthetic_corpus(c.corpus));
  ExperimentPlan plan = make_plan("mu", 1);
  plan.settings = {plan.settings[1], plan.settings[5]};  // mu=0.3, cross_only

  std::vector<std::string> log;
  auto logger = [&](const std::string& s) { log.push_back(s); };
  const ResultTable first = run_experiment(plan, c, root / "corpus", root / "runs", logger);
  REQUIRE(first.rows.size() == 4);  // 2 settings x 2 languages
  const fs::path run = root / "runs" / "mu" / "cross_only" / "1";
  for (const char* f : {"manifest.json", "config.txt", "log.tsv", "metrics.tsv", "run.L0.trec", "run.L1.trec",
                        "checkpoint/tensors.bin", "export/tensors.bin", "finetuned/tensors.bin"}) {
    CHECK_MESSAGE(fs::exists(run / f), f);
  }
  CHECK(read_manifest(run / "manifest.json").complete());

  SUBCASE("cross-only runs with alpha fixed at zero") {
    std::istringstream in(slurp(run / "log.tsv"));
    std::string line;
    std::getline(in, line);
    std::size_t n = 0;
    while (std::getline(in, line)) {
      CHECK(line.substr(line.rfind('\t') + 1) == "0");
      ++n;
    }
    CHECK(n == 6);
  }
  SUBCASE("a second pass reuses completed runs") {
    const std::string before = slurp(run / "manifest.json");
    log.clear();
    const ResultTable again = run_experiment(plan, c, root / "corpus", root / "runs", logger);
    CHECK(log.size() == 2);
    for (const auto& l : log) CHECK(l.rfind("skip", 0) == 0);
    CHECK(slurp(run / "manifest.json") == before);
    CHECK(format_tsv(again) == format_tsv(first));
    CHECK(format_tsv(collect_results(root / "runs", "mu")).size() == format_tsv(first).size());
  }
  SUBCASE("an incomplete run is redone with identical results") {
    const std::string metrics = slurp(run / "metrics.tsv");
    const std::string ckpt = slurp(run / "checkpoint" / "tensors.bin");
    RunManifest m = read_manifest(run / "manifest.json");
    m.finished.clear();
    write_manifest(run / "manifest.json", m);
    run_experiment(plan, c, root / "corpus", root / "runs");
    CHECK(slurp(run / "metrics.tsv") == metrics);
    CHECK(slurp(run / "checkpoint" / "tensors.bin") == ckpt);
  }
  SUBCASE("a changed config in a completed directory is refused") {
    RunConfig other = c;
    set_config_value(other, "pretrain.steps", "7");
    CHECK_THROWS_WITH_AS(run_experiment(plan, other, root / "corpus", root / "runs"),
                         doctest::Contains("different configuration"), std::runtime_error);
  }
  fs::remove_all(root);
}
