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

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "msm/config.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr folded into stdout.
Result cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + std::string(MSM_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf;
  while (std::fgets(buf.data(), buf.size(), pipe) != nullptr) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("msm_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(cli("").code == 1);
  CHECK(cli("frobnicate").code == 1);
  CHECK(cli("eval --run x").code == 1);  // --qrels missing

  const Result unknown = cli("gen-corpus --out /tmp/msm_cli_never --set pretrain.stpes=3");
  CHECK(unknown.code == 1);
  CHECK(unknown.out.find("unknown config key 'pretrain.stpes'") != std::string::npos);
  CHECK(unknown.out.find("pretrain.steps") != std::string::npos);

  const Result missing = cli("gen-corpus --out /tmp/msm_cli_never --config /no/such/run.cfg");
  CHECK(missing.code == 1);
  CHECK(missing.out.find("/no/such/run.cfg") != std::string::npos);
  CHECK_FALSE(fs::exists("/tmp/msm_cli_never"));

  CHECK(cli("eval --run /no/run.trec --qrels /no/q.tsv").code == 1);
  CHECK(cli("ablate --name nope --corpus /tmp").code == 1);
}

TEST_CASE("help lists every key with its default") {
  const msm::RunConfig defaults;
  for (const char* sub : {"gen-corpus", "pretrain", "finetune", "ablate"}) {
    const Result r = cli(std::string(sub) + " --help");
    CHECK(r.code == 0);
    for (const auto& k : msm::config_keys()) {
      CHECK_MESSAGE(r.out.find(k.key + " = " + msm::get_config_value(defaults, k.key)) != std::string::npos,
                    sub << " " << k.key);
    }
  }
  for (const char* sub : {"encode", "search", "eval", "gradcheck", "report"}) {
    CHECK(cli(std::string(sub) + " --help").code == 0);
  }
  CHECK(cli("search --help").out.find("[100]") != std::string::npos);
}

TEST_CASE("gradcheck prints the error and a verdict") {
  const Result ok = cli("gradcheck --dim 8");
  CHECK(ok.code == 0);
  CHECK(ok.out.find("max relative error") != std::string::npos);
  CHECK(ok.out.find("PASS") != std::string::npos);
  const Result bad = cli("gradcheck --dim 8 --undetached");
  CHECK(bad.code == 2);
  CHECK(bad.out.find("FAIL") != std::string::npos);
}

TEST_CASE("eval prints one TSV line per metric") {
  const fs::path d = scratch("eval");
  std::ofstream(d / "r.trec") << "q1 Q0 a 1 3 t\nq1 Q0 b 2 2 t\nq2 Q0 c 1 5 t\nq2 Q0 d 2 1 t\n";
  std::ofstream(d / "q.tsv") << "q1\tb\nq2\tc\n";
  const Result r = cli("eval --run " + (d / "r.trec").string() + " --qrels " + (d / "q.tsv").string() +
                       " --metric mrr@10");
  CHECK(r.code == 0);
  CHECK(r.out == "mrr@10\t0.750000\n");
  const Result kt = cli("eval --run " + (d / "r.trec").string() + " --qrels " + (d / "q.tsv").string() +
                        " --metric r@1kt");
  CHECK(kt.code == 1);
  fs::remove_all(d);
}

TEST_CASE("pipeline through the command line") {
  const fs::path d = scratch("pipe");
  const std::string small =
      " --set corpus.docs=30 --set model.hidden=8 --set model.heads=2 --set pretrain.steps=4"
      " --set pretrain.warmup=1 --set finetune.steps=3 --set finetune.warmup=1 --set finetune.batch=4";
  const std::string s = d.string();
  REQUIRE(cli("gen-corpus --out " + s + "/c" + small).code == 0);
  REQUIRE(cli("pretrain --docs " + s + "/c/documents.jsonl --out " + s + "/p" + small).code == 0);
  CHECK(fs::exists(d / "p" / "manifest.json"));
  CHECK(msm::read_manifest(d / "p" / "manifest.json").complete());
  CHECK(msm::read_manifest(d / "p" / "manifest.json").inputs.count("documents.jsonl") == 1);

  CHECK(cli("finetune --model " + s + "/p/export --pairs " + s + "/c/pairs.L0.tsv --out " + s + "/f" + small).code ==
        0);
  CHECK(cli("encode --model " + s + "/f/model --passages " + s + "/c/passages.L0.jsonl --out " + s + "/i").code == 0);
  CHECK(cli("search --model " + s + "/f/model --index " + s + "/i --queries " + s + "/c/queries.L0.tsv --k 5 --out " +
            s + "/r.trec")
            .code == 0);
  const Result e = cli("eval --run " + s + "/r.trec --qrels " + s + "/c/qrels.L0.tsv --metric mrr@5,recall@5,map@5");
  CHECK(e.code == 0);
  CHECK(e.out.rfind("mrr@5\t", 0) == 0);

  // A missing checkpoint is a usage error; a malformed one is a runtime failure.
  CHECK(cli("encode --model " + s + "/nothing --passages " + s + "/c/passages.L0.jsonl --out " + s + "/i2").code == 1);
  CHECK(cli("encode --model " + s + "/c --passages " + s + "/c/passages.L0.jsonl --out " + s + "/i2").code == 2);
  std::ofstream(d / "garbage.trec") << "not a run\n";
  CHECK(cli("eval --run " + s + "/garbage.trec --qrels " + s + "/c/qrels.L0.tsv").code == 2);

  // MSM_RUNS_DIR picks the default run root.
  const Result r = cli("report --name transfer");
  CHECK(r.code == 2);
  const Result ab = cli("ablate --name projector --seeds 1 --corpus " + s + "/c" + small + " --set eval.queries=5",
                        "MSM_RUNS_DIR=" + s + "/runs ");
  CHECK(ab.code == 0);
  CHECK(fs::exists(d / "runs" / "projector" / "none" / "1" / "metrics.tsv"));
  CHECK(fs::exists(d / "runs" / "projector" / "results.md"));
  const Result rep = cli("--runs-dir " + s + "/runs report --name projector --format tsv");
  CHECK(rep.code == 0);
  CHECK(rep.out.rfind("setting\tlanguage\tmrr@10", 0) == 0);
  fs::remove_all(d);
}
