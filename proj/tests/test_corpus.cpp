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

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "msm/corpus.hpp"

using namespace msm;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string words(int n, const std::string& prefix = "w") {
  std::string s;
  for (int i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += prefix + std::to_string(i);
  }
  return s;
}

Vocab open_vocab() {
  std::vector<std::string> lines;
  for (int i = 0; i < 200; ++i) lines.push_back(words(100, "w"));
  return Vocab::build(lines, 1000);
}

}  // namespace

TEST_CASE("build_vocab ranks by frequency and keeps reserved ids") {
  std::vector<std::string> corpus = {"a b", "a c"};
  Vocab v = Vocab::build(corpus, 16);
  CHECK(v.size() == kNumReserved + 3);
  CHECK(v.token(kPadId) == "[PAD]");
  CHECK(v.token(kMaskId) == "[MASK]");
  CHECK(v.id("a") < v.id("b"));
  CHECK(v.id("a") < v.id("c"));
  CHECK(v.id("b") < v.id("c"));  // lexicographic tie-break
  CHECK(v.id("zzz") == kUnkId);

  std::vector<std::string> repeated(10, "x");
  CHECK(Vocab::build(repeated, 16).size() == kNumReserved + 1);
}

TEST_CASE("build_vocab errors") {
  std::vector<std::string> empty;
  CHECK_THROWS_WITH(Vocab::build(empty, 16), "empty corpus");
  std::vector<std::string> blank = {"   ", ""};
  CHECK_THROWS_WITH(Vocab::build(blank, 16), "empty corpus");
  std::vector<std::string> one = {"a"};
  CHECK_THROWS(Vocab::build(one, 15));
}

TEST_CASE("vocab ids are dense and id_of is a bijection") {
  std::vector<std::string> corpus = {"q w e r t y", "q w e", "q"};
  Vocab v = Vocab::build(corpus, 64);
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(v.id(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
  }
}

TEST_CASE("capped vocabulary over a synthetic corpus matches an independent frequency count") {
  SyntheticCorpusSpec spec;
  spec.num_languages = 2;
  spec.latent_vocab_size = 400;
  spec.num_docs = 200;
  spec.seed = 11;
  SyntheticCorpus corpus = generate_synthetic_corpus(spec);
  std::vector<std::string> texts;
  std::map<std::string, std::size_t> freq;
  std::size_t total = 0;
  for (const auto& d : corpus.documents) {
    texts.push_back(d.text);
    std::istringstream in(d.text);
    for (std::string tok; in >> tok;) {
      ++freq[tok];
      ++total;
    }
  }
  REQUIRE(total >= 10000);
  Vocab v = Vocab::build(texts, 512);
  CHECK(v.size() == 512);

  // Oracle: the 507 most frequent surface forms, ties lexicographic.
  std::vector<std::pair<std::size_t, std::string>> ranked;
  for (const auto& [tok, n] : freq) ranked.emplace_back(n, tok);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::size_t expected_unk = 0;
  for (std::size_t i = 512 - kNumReserved; i < ranked.size(); ++i) expected_unk += ranked[i].first;

  std::size_t unk = 0;
  for (const auto& t : texts) {
    for (TokenId id : v.encode(t)) unk += id == kUnkId;
  }
  CHECK(unk == expected_unk);
  CHECK(unk > 0);
}

TEST_CASE("segment_and_split splits long documents greedily") {
  Vocab v = open_vocab();
  std::string text;
  for (int i = 0; i < 70; ++i) text += "w1 w2\n";
  auto docs = segment_and_split({"d", "en", text}, v);
  REQUIRE(docs.size() == 3);
  CHECK(docs[0].sentences.size() == 32);
  CHECK(docs[1].sentences.size() == 32);
  CHECK(docs[2].sentences.size() == 6);
  CHECK(docs[0].doc_id == "d");
  CHECK(docs[1].doc_id == "d#1");
  CHECK(docs[2].lang == "en");
}

TEST_CASE("segment_and_split truncates sentences to 64 content tokens") {
  Vocab v = open_vocab();
  auto docs = segment_and_split({"d", "en", words(100)}, v);
  REQUIRE(docs.size() == 1);
  REQUIRE(docs[0].sentences.size() == 1);
  const Sentence& s = docs[0].sentences[0];
  CHECK(s.content_length() == 64);
  CHECK(s.token_ids.front() == kClsId);
  CHECK(s.token_ids.back() == kSepId);
  CHECK(s.content()[63] == v.id("w63"));
}

TEST_CASE("segment_and_split edge cases") {
  Vocab v = open_vocab();
  auto one = segment_and_split({"d", "en", "w1 w2 w3"}, v);
  REQUIRE(one.size() == 1);
  CHECK(one[0].sentences.size() == 1);
  CHECK_THROWS_WITH(segment_and_split({"d", "en", "\n  \n\n"}, v), "empty document: d");
  auto blank_lines = segment_and_split({"d", "en", "w1\n\nw2\n"}, v);
  CHECK(blank_lines[0].sentences.size() == 2);
}

TEST_CASE("segment_and_split never exceeds sentence or document caps") {
  Vocab v = open_vocab();
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> n_lines(1, 120), n_words(0, 150), word(0, 120);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    const int lines = n_lines(rng);
    std::size_t nonempty = 0;
    for (int l = 0; l < lines; ++l) {
      const int nw = n_words(rng);
      nonempty += nw > 0;
      for (int w = 0; w < nw; ++w) text += "w" + std::to_string(word(rng)) + " ";
      text += "\n";
    }
    if (nonempty == 0) continue;
    auto docs = segment_and_split({"r", "x", text}, v);
    std::size_t total = 0;
    for (const Document& d : docs) {
      CHECK(d.sentences.size() <= kMaxDocumentSentences);
      CHECK(!d.sentences.empty());
      total += d.sentences.size();
      for (const Sentence& s : d.sentences) {
        CHECK(s.content_length() <= kMaxSentenceTokens);
        CHECK(s.token_ids.front() == kClsId);
        CHECK(s.token_ids.back() == kSepId);
      }
    }
    CHECK(total == nonempty);
  }
}

TEST_CASE("parallel renderings share length and latent token positions") {
  SyntheticCorpusSpec spec;
  spec.num_languages = 3;
  spec.num_docs = 50;
  spec.seed = 3;
  SyntheticCorpus c = generate_synthetic_corpus(spec);
  REQUIRE(c.documents.size() == 150);
  REQUIRE(c.alignment.size() == 150);
  std::map<std::size_t, std::vector<const RawDocument*>> by_latent;
  std::map<std::string, const RawDocument*> by_id;
  for (const auto& d : c.documents) by_id[d.doc_id] = &d;
  for (const auto& row : c.alignment) by_latent[row.latent_id].push_back(by_id.at(row.doc_id));
  for (const auto& [latent, docs] : by_latent) {
    REQUIRE(docs.size() == 3);
    std::vector<std::vector<std::string>> stripped;
    for (const RawDocument* d : docs) {
      std::string norm;
      std::istringstream lines(d->text);
      for (std::string line; std::getline(lines, line);) {
        std::istringstream toks(line);
        for (std::string t; toks >> t;) {
          const std::string prefix = d->lang + "_";
          REQUIRE(t.rfind(prefix, 0) == 0);
          norm += t.substr(prefix.size()) + " ";
        }
        norm += "|";
      }
      stripped.push_back({norm});
    }
    CHECK(stripped[0] == stripped[1]);
    CHECK(stripped[0] == stripped[2]);
    const auto& ld = c.latent[latent];
    CHECK(ld.topics.size() == ld.tokens.size());
  }
}

TEST_CASE("topic chain stickiness") {
  SyntheticCorpusSpec spec;
  spec.num_docs = 10000;
  spec.num_languages = 1;
  spec.seed = 99;
  spec.topic_transition_stickiness = 0.9;
  SyntheticCorpus c = generate_synthetic_corpus(spec);
  std::size_t same = 0, transitions = 0;
  for (const auto& ld : c.latent) {
    for (std::size_t i = 1; i < ld.topics.size(); ++i) {
      same += ld.topics[i] == ld.topics[i - 1];
      ++transitions;
    }
  }
  const double rate = static_cast<double>(same) / static_cast<double>(transitions);
  CHECK(std::abs(rate - 0.9) < 0.02);

  spec.num_docs = 200;
  spec.topic_transition_stickiness = 1.0;
  for (const auto& ld : generate_synthetic_corpus(spec).latent) {
    CHECK(std::set<int>(ld.topics.begin(), ld.topics.end()).size() == 1);
  }
}

TEST_CASE("synthetic spec validation") {
  SyntheticCorpusSpec spec;
  spec.num_docs = 0;
  CHECK_THROWS(spec.validate());
  spec = {};
  spec.topic_transition_stickiness = 0.0;
  CHECK_THROWS(spec.validate());
  spec = {};
  spec.tokens_per_sentence = {5, 4};
  CHECK_THROWS(spec.validate());
}

TEST_CASE("synthetic corpus is a pure function of its seed") {
  SyntheticCorpusSpec spec;
  spec.num_docs = 30;
  spec.seed = 5;
  auto a = generate_synthetic_corpus(spec);
  auto b = generate_synthetic_corpus(spec);
  REQUIRE(a.documents.size() == b.documents.size());
  for (std::size_t i = 0; i < a.documents.size(); ++i) CHECK(a.documents[i].text == b.documents[i].text);
  spec.seed = 6;
  auto c = generate_synthetic_corpus(spec);
  CHECK(a.documents[0].text != c.documents[0].text);
}

TEST_CASE("passages window sentences in pairs and fold a trailing sentence") {
  Vocab v = open_vocab();
  auto docs = segment_and_split({"d", "en", "w1\nw2\nw3"}, v);
  auto passages = make_passages(docs[0], v);
  REQUIRE(passages.size() == 1);
  CHECK(passages[0].text == "w1 w2 w3");
  CHECK(passages[0].token_length == 3);

  auto five = make_passages(segment_and_split({"e", "en", "w1\nw2\nw3\nw4\nw5 w6"}, v)[0], v);
  REQUIRE(five.size() == 2);
  CHECK(five[0].text == "w1 w2");
  CHECK(five[1].text == "w3 w4 w5 w6");
  CHECK(five[1].passage_id == "e:p1");
}

TEST_CASE("retrieval pairs: windowing, dropout and determinism") {
  Vocab v = open_vocab();
  std::vector<Document> docs = segment_and_split({"d", "en", "w1 w2\nw3 w4\nw5 w6"}, v);
  auto one = segment_and_split({"solo", "en", "w7 w8"}, v);
  docs.push_back(one[0]);
  auto exact = make_retrieval_pairs(docs, v, "en", 1, 0.0);
  REQUIRE(exact.size() == 3);  // the one-sentence document is skipped
  CHECK(exact[1].query_text == "w3 w4");
  CHECK(exact[1].passage_text == "w1 w2 w3 w4 w5 w6");
  CHECK(exact[1].passage_id == "d:p0");
  CHECK(make_retrieval_pairs(docs, v, "fr", 1, 0.0).empty());

  SyntheticCorpusSpec spec;
  spec.num_docs = 1000;
  spec.num_languages = 1;
  auto corpus = generate_synthetic_corpus(spec);
  std::vector<std::string> texts;
  for (const auto& d : corpus.documents) texts.push_back(d.text);
  Vocab sv = Vocab::build(texts, 4096);
  auto sdocs = segment_corpus(corpus.documents, sv);
  const auto dir = std::filesystem::temp_directory_path() / "msm_pairs_test";
  std::filesystem::remove_all(dir);
  write_pairs(dir / "a.tsv", make_retrieval_pairs(sdocs, sv, "L0", 42));
  write_pairs(dir / "b.tsv", make_retrieval_pairs(sdocs, sv, "L0", 42));
  CHECK(read_file(dir / "a.tsv") == read_file(dir / "b.tsv"));
  auto back = read_pairs(dir / "a.tsv");
  CHECK(back.size() > 1000);
  std::size_t shorter = 0;
  auto pairs = make_retrieval_pairs(sdocs, sv, "L0", 42);
  for (const auto& p : pairs) {
    CHECK(!p.query_text.empty());
    shorter += split_whitespace(p.query_text).size() <
               split_whitespace(p.passage_text).size();
  }
  CHECK(shorter == pairs.size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("MLM masking rate and replacement mix") {
  Vocab v = open_vocab();
  std::vector<TokenId> content(50);
  for (std::size_t i = 0; i < content.size(); ++i) content[i] = v.id("w" + std::to_string(i));
  Sentence s = Sentence::from_content(content);
  std::mt19937_64 rng(7);
  std::size_t positions = 0, masked = 0, as_mask = 0, unchanged = 0;
  while (positions < 100000) {
    MlmMaskedBatch b = make_mlm_mask(s, 0.15, rng, v.size());
    positions += s.content_length();
    masked += b.mask_positions.size();
    CHECK(b.input_ids.front() == kClsId);
    CHECK(b.input_ids.back() == kSepId);
    for (std::size_t i = 0; i < b.mask_positions.size(); ++i) {
      const std::size_t pos = b.mask_positions[i];
      CHECK(b.target_ids[i] == s.token_ids[pos]);
      as_mask += b.input_ids[pos] == kMaskId;
      unchanged += b.input_ids[pos] == s.token_ids[pos];
    }
    // Positions outside the mask set are untouched.
    for (std::size_t pos = 0; pos < s.token_ids.size(); ++pos) {
      if (!std::binary_search(b.mask_positions.begin(), b.mask_positions.end(), pos)) {
        CHECK(b.input_ids[pos] == s.token_ids[pos]);
      }
    }
  }
  const double rate = static_cast<double>(masked) / static_cast<double>(positions);
  CHECK(std::abs(rate - 0.15) < 0.005);
  CHECK(std::abs(static_cast<double>(as_mask) / masked - 0.8) < 0.02);
  CHECK(std::abs(static_cast<double>(unchanged) / masked - 0.1) < 0.02);

  CHECK_THROWS(make_mlm_mask(s, 1.0, rng, v.size()));
  CHECK_THROWS(make_mlm_mask(s, 0.0, rng, v.size()));
  auto none = make_mlm_mask(s, 1e-12, rng, v.size());
  CHECK(none.mask_positions.empty());
  CHECK(none.input_ids == s.token_ids);
}

TEST_CASE("document, alignment, query and qrels files round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "msm_corpus_io";
  std::filesystem::remove_all(dir);
  SyntheticCorpusSpec spec;
  spec.num_docs = 5;
  auto c = generate_synthetic_corpus(spec);
  write_documents(dir / "docs.jsonl", c.documents);
  auto docs = read_documents(dir / "docs.jsonl");
  REQUIRE(docs.size() == c.documents.size());
  CHECK(docs[3].text == c.documents[3].text);
  write_alignment(dir / "align.tsv", c.alignment);
  auto rows = read_alignment(dir / "align.tsv");
  CHECK(rows[7].doc_id == c.alignment[7].doc_id);
  CHECK(rows[7].latent_id == 3);

  Qrels q = {{"q1", {"a", "b"}}, {"q2", {"c"}}};
  write_qrels(dir / "qrels.tsv", q);
  CHECK(read_qrels(dir / "qrels.tsv") == q);
  std::vector<Query> queries = {{"q1", "x y"}, {"q2", "z"}};
  write_queries(dir / "q.tsv", queries);
  auto qb = read_queries(dir / "q.tsv");
  CHECK(qb[1].text == "z");
  CHECK_THROWS(read_documents(dir / "missing.jsonl"));
  std::filesystem::remove_all(dir);
}
