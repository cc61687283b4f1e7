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

#include "msm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace msm {
namespace {

const char* const kReserved[kNumReserved] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

bool is_reserved(std::string_view tok) {
  return std::find(std::begin(kReserved), std::end(kReserved), tok) != std::end(kReserved);
}

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    lines.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    std::size_t end = line.find('\t', start);
    fields.push_back(line.substr(start, end == std::string::npos ? end : end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return fields;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::string apply_dropout(std::span<const TokenId> content, const Vocab& vocab, double dropout,
                          std::mt19937_64& rng) {
  std::bernoulli_distribution drop(dropout);
  std::vector<TokenId> kept;
  for (TokenId id : content) {
    if (!drop(rng)) kept.push_back(id);
  }
  if (kept.empty() && !content.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, content.size() - 1);
    kept.push_back(content[pick(rng)]);
  }
  return vocab.decode(kept);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < kNumReserved) throw std::invalid_argument("vocab lacks reserved tokens");
  for (std::size_t i = 0; i < kNumReserved; ++i) {
    if (tokens_[i] != kReserved[i]) {
      throw std::invalid_argument("vocab id " + std::to_string(i) + " must be " + kReserved[i]);
    }
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!id_of_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("duplicate vocab token: " + tokens_[i]);
    }
  }
}

Vocab Vocab::build(std::span<const std::string> raw_corpus, std::size_t max_size) {
  if (max_size < 16) throw std::invalid_argument("vocab max_size must be >= 16");
  std::unordered_map<std::string, std::size_t> counts;
  for (const std::string& line : raw_corpus) {
    for (std::string& tok : split_whitespace(line)) {
      if (!is_reserved(tok)) ++counts[std::move(tok)];
    }
  }
  if (counts.empty()) throw std::invalid_argument("empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens(std::begin(kReserved), std::end(kReserved));
  for (auto& [tok, n] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(tok);
  }
  return Vocab(std::move(tokens));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) tokens.push_back(line);
  return Vocab(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out = open_out(path);
  for (const std::string& t : tokens_) out << t << "\n";
}

TokenId Vocab::id(std::string_view token) const {
  auto it = id_of_.find(std::string(token));
  return it == id_of_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocab");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const std::string& tok : split_whitespace(text)) ids.push_back(id(tok));
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

Sentence Sentence::from_content(std::span<const TokenId> content) {
  const std::size_t n = std::min(content.size(), kMaxSentenceTokens);
  Sentence s;
  s.token_ids.reserve(n + 2);
  s.token_ids.push_back(kClsId);
  s.token_ids.insert(s.token_ids.end(), content.begin(), content.begin() + n);
  s.token_ids.push_back(kSepId);
  return s;
}

std::span<const TokenId> Sentence::content() const {
  return std::span<const TokenId>(token_ids).subspan(1, token_ids.size() - 2);
}

std::vector<Document> segment_and_split(const RawDocument& raw, const Vocab& vocab) {
  std::vector<Sentence> sentences;
  for (const std::string& line : split_lines(raw.text)) {
    std::vector<TokenId> ids = vocab.encode(line);
    if (ids.empty()) continue;
    sentences.push_back(Sentence::from_content(ids));
  }
  if (sentences.empty()) throw std::invalid_argument("empty document: " + raw.doc_id);

  std::vector<Document> out;
  for (std::size_t start = 0; start < sentences.size(); start += kMaxDocumentSentences) {
    const std::size_t end = std::min(sentences.size(), start + kMaxDocumentSentences);
    Document doc;
    const std::size_t chunk = start / kMaxDocumentSentences;
    doc.doc_id = chunk == 0 ? raw.doc_id : raw.doc_id + "#" + std::to_string(chunk);
    doc.lang = raw.lang;
    doc.sentences.assign(std::make_move_iterator(sentences.begin() + start),
                         std::make_move_iterator(sentences.begin() + end));
    out.push_back(std::move(doc));
  }
  return out;
}

std::vector<Document> segment_corpus(std::span<const RawDocument> raw, const Vocab& vocab) {
  std::vector<Document> out;
  for (const RawDocument& r : raw) {
    for (Document& d : segment_and_split(r, vocab)) out.push_back(std::move(d));
  }
  return out;
}

std::vector<RawDocument> read_documents(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  std::vector<RawDocument> docs;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      docs.push_back({j.at("doc_id").get<std::string>(), j.at("lang").get<std::string>(),
                      j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

void write_documents(const std::filesystem::path& path, std::span<const RawDocument> docs) {
  std::ofstream out = open_out(path);
  for (const RawDocument& d : docs) {
    nlohmann::json j = {{"doc_id", d.doc_id}, {"lang", d.lang}, {"text", d.text}};
    out << j.dump() << "\n";
  }
}

void SyntheticCorpusSpec::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw std::invalid_argument(std::string(what) + " must be positive");
  };
  positive(num_languages, "num_languages");
  positive(latent_vocab_size, "latent_vocab_size");
  positive(num_topics, "num_topics");
  positive(num_docs, "num_docs");
  positive(sentences_per_doc.min, "sentences_per_doc.min");
  positive(tokens_per_sentence.min, "tokens_per_sentence.min");
  if (sentences_per_doc.max < sentences_per_doc.min) {
    throw std::invalid_argument("sentences_per_doc range is empty");
  }
  if (tokens_per_sentence.max < tokens_per_sentence.min) {
    throw std::invalid_argument("tokens_per_sentence range is empty");
  }
  // 1.0 is accepted as the degenerate single-topic-per-document chain.
  if (!(topic_transition_stickiness > 0.0 && topic_transition_stickiness <= 1.0)) {
    throw std::invalid_argument("topic_transition_stickiness must lie in (0, 1]");
  }
  if (!(zipf_exponent >= 0.0) || !std::isfinite(zipf_exponent)) {
    throw std::invalid_argument("zipf_exponent must be finite and non-negative");
  }
}

std::string language_tag(int lang) { return "L" + std::to_string(lang); }

std::string surface_token(int lang, int latent_token) {
  return language_tag(lang) + "_" + std::to_string(latent_token);
}

std::string synthetic_doc_id(int lang, std::size_t latent_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%06zu", language_tag(lang).c_str(), latent_id);
  return buf;
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
  spec.validate();
  SyntheticCorpus corpus;
  corpus.spec = spec;

  // Topic token distributions: a seeded permutation of the latent vocabulary
  // per topic with Zipfian weights over the permuted ranks.
  std::mt19937_64 topic_rng(derive_seed(spec.seed, ~0ULL));
  std::vector<std::discrete_distribution<int>> topic_tokens;
  std::vector<int> perm(static_cast<std::size_t>(spec.latent_vocab_size));
  for (int k = 0; k < spec.num_topics; ++k) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), topic_rng);
    std::vector<double> weights(perm.size());
    for (std::size_t rank = 0; rank < perm.size(); ++rank) {
      weights[static_cast<std::size_t>(perm[rank])] =
          1.0 / std::pow(static_cast<double>(rank + 1), spec.zipf_exponent);
    }
    topic_tokens.emplace_back(weights.begin(), weights.end());
  }

  corpus.latent.resize(static_cast<std::size_t>(spec.num_docs));
  for (std::size_t doc = 0; doc < corpus.latent.size(); ++doc) {
    std::mt19937_64 rng(derive_seed(spec.seed, doc));
    LatentDocument& ld = corpus.latent[doc];
    ld.latent_id = doc;
    std::uniform_int_distribution<int> n_sent(spec.sentences_per_doc.min,
                                              spec.sentences_per_doc.max);
    std::uniform_int_distribution<int> n_tok(spec.tokens_per_sentence.min,
                                             spec.tokens_per_sentence.max);
    std::uniform_int_distribution<int> any_topic(0, spec.num_topics - 1);
    std::bernoulli_distribution stay(spec.topic_transition_stickiness);
    const int sentences = n_sent(rng);
    int topic = any_topic(rng);
    for (int s = 0; s < sentences; ++s) {
      if (s > 0 && spec.num_topics > 1 && !stay(rng)) {
        // Uniform over the other topics, so the same-topic rate is exactly
        // the stickiness.
        std::uniform_int_distribution<int> other(0, spec.num_topics - 2);
        int next = other(rng);
        if (next >= topic) ++next;
        topic = next;
      }
      ld.topics.push_back(topic);
      std::vector<int> toks(static_cast<std::size_t>(n_tok(rng)));
      for (int& t : toks) t = topic_tokens[static_cast<std::size_t>(topic)](rng);
      ld.tokens.push_back(std::move(toks));
    }
    for (int lang = 0; lang < spec.num_languages; ++lang) {
      RawDocument raw;
      raw.doc_id = synthetic_doc_id(lang, doc);
      raw.lang = language_tag(lang);
      for (std::size_t s = 0; s < ld.tokens.size(); ++s) {
        if (s) raw.text += '\n';
        for (std::size_t i = 0; i < ld.tokens[s].size(); ++i) {
          if (i) raw.text += ' ';
          raw.text += surface_token(lang, ld.tokens[s][i]);
        }
      }
      corpus.alignment.push_back({doc, raw.lang, raw.doc_id});
      corpus.documents.push_back(std::move(raw));
    }
  }
  return corpus;
}

void write_alignment(const std::filesystem::path& path, std::span<const AlignmentRow> rows) {
  std::ofstream out = open_out(path);
  for (const AlignmentRow& r : rows) out << r.latent_id << '\t' << r.lang << '\t' << r.doc_id << '\n';
}

std::vector<AlignmentRow> read_alignment(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  std::vector<AlignmentRow> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 3) throw std::runtime_error("malformed alignment row: " + line);
    rows.push_back({std::stoull(f[0]), f[1], f[2]});
  }
  return rows;
}

std::vector<Passage> make_passages(const Document& doc, const Vocab& vocab) {
  std::vector<Passage> out;
  const std::size_t n = doc.sentences.size();
  const std::size_t windows = std::max<std::size_t>(1, n / 2);
  for (std::size_t w = 0; w < windows; ++w) {
    Passage p;
    p.doc_id = doc.doc_id;
    p.passage_id = doc.doc_id + ":p" + std::to_string(w);
    p.first_sentence = 2 * w;
    p.num_sentences = w + 1 == windows ? n - p.first_sentence : 2;
    for (std::size_t s = p.first_sentence; s < p.first_sentence + p.num_sentences; ++s) {
      auto content = doc.sentences[s].content();
      if (!p.text.empty()) p.text += ' ';
      p.text += vocab.decode(content);
      p.token_length += content.size();
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<RetrievalPair> make_retrieval_pairs(std::span<const Document> docs,
                                                const Vocab& vocab, const std::string& lang,
                                                std::uint64_t seed, double dropout) {
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
  std::mt19937_64 rng(seed);
  std::vector<RetrievalPair> pairs;
  for (const Document& doc : docs) {
    if (doc.lang != lang || doc.sentences.size() < 2) continue;
    for (const Passage& p : make_passages(doc, vocab)) {
      for (std::size_t s = p.first_sentence; s < p.first_sentence + p.num_sentences; ++s) {
        pairs.push_back(
            {apply_dropout(doc.sentences[s].content(), vocab, dropout, rng), p.passage_id, p.text});
      }
    }
  }
  return pairs;
}

void write_pairs(const std::filesystem::path& path, std::span<const RetrievalPair> pairs) {
  std::ofstream out = open_out(path);
  for (const RetrievalPair& p : pairs) {
    out << p.query_text << '\t' << p.passage_id << '\t' << p.passage_text << '\n';
  }
}

std::vector<RetrievalPair> read_pairs(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  std::vector<RetrievalPair> pairs;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 3) throw std::runtime_error("malformed pair row in " + path.string());
    pairs.push_back({f[0], f[1], f[2]});
  }
  return pairs;
}

RetrievalSet make_retrieval_set(std::span<const Document> docs, const Vocab& vocab,
                                const std::string& lang, std::uint64_t seed,
                                std::size_t max_queries, double dropout) {
  RetrievalSet set;
  for (const Document& doc : docs) {
    if (doc.lang != lang) continue;
    for (Passage& p : make_passages(doc, vocab)) set.passages.push_back(std::move(p));
  }
  std::vector<RetrievalPair> pairs = make_retrieval_pairs(docs, vocab, lang, seed, dropout);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::shuffle(order.begin(), order.end(), rng);
  if (order.size() > max_queries) order.resize(max_queries);
  std::sort(order.begin(), order.end());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const RetrievalPair& p = pairs[order[i]];
    Query q{lang + "-q" + std::to_string(i), p.query_text};
    set.qrels[q.qid] = {p.passage_id};
    set.queries.push_back(std::move(q));
  }
  return set;
}

void write_queries(const std::filesystem::path& path, std::span<const Query> queries) {
  std::ofstream out = open_out(path);
  for (const Query& q : queries) out << q.qid << '\t' << q.text << '\n';
}

std::vector<Query> read_queries(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  std::vector<Query> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 2) throw std::runtime_error("malformed query row in " + path.string());
    out.push_back({f[0], f[1]});
  }
  return out;
}

void write_qrels(const std::filesystem::path& path, const Qrels& qrels) {
  std::ofstream out = open_out(path);
  for (const auto& [qid, docs] : qrels) {
    for (const std::string& d : docs) out << qid << '\t' << d << "\t1\n";
  }
}

Qrels read_qrels(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  Qrels qrels;
  for (std::string line; std::getline(in, line);) {
    auto f = split_whitespace(line);
    if (f.empty()) continue;
    if (f.size() < 2) throw std::runtime_error("malformed qrels row: " + line);
    // Relevance column is optional; zero or negative grades are not relevant.
    if (f.size() >= 3 && std::stod(f.back()) <= 0.0) continue;
    qrels[f[0]].push_back(f[1]);
  }
  return qrels;
}

void write_passages(const std::filesystem::path& path, std::span<const Passage> passages,
                    const std::string& lang) {
  std::vector<RawDocument> docs;
  docs.reserve(passages.size());
  for (const Passage& p : passages) docs.push_back({p.passage_id, lang, p.text});
  write_documents(path, docs);
}

MlmMaskedBatch make_mlm_mask(const Sentence& sentence, double rate, std::mt19937_64& rng,
                             std::size_t vocab_size) {
  if (!(rate > 0.0 && rate < 1.0)) throw std::invalid_argument("MLM rate must lie in (0, 1)");
  MlmMaskedBatch out;
  out.input_ids = sentence.token_ids;
  std::bernoulli_distribution select(rate);
  std::uniform_real_distribution<double> action(0.0, 1.0);
  const bool can_randomize = vocab_size > kNumReserved;
  std::uniform_int_distribution<TokenId> random_id(
      static_cast<TokenId>(kNumReserved),
      static_cast<TokenId>(can_randomize ? vocab_size - 1 : kNumReserved));
  for (std::size_t pos = 0; pos < out.input_ids.size(); ++pos) {
    const TokenId id = out.input_ids[pos];
    if (id == kClsId || id == kSepId || id == kPadId) continue;
    if (!select(rng)) continue;
    out.mask_positions.push_back(pos);
    out.target_ids.push_back(id);
    const double a = action(rng);
    if (a < 0.8) {
      out.input_ids[pos] = kMaskId;
    } else if (a < 0.9 && can_randomize) {
      out.input_ids[pos] = random_id(rng);
    }
  }
  return out;
}

}  // namespace msm
