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

#ifndef MSM_CORPUS_HPP_
#define MSM_CORPUS_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace msm {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kClsId = 2;
inline constexpr TokenId kSepId = 3;
inline constexpr TokenId kMaskId = 4;
inline constexpr std::size_t kNumReserved = 5;

// Content tokens per sentence and sentences per document after splitting.
inline constexpr std::size_t kMaxSentenceTokens = 64;
inline constexpr std::size_t kMaxDocumentSentences = 32;

class Vocab {
 public:
  Vocab() = default;
  // `tokens` must start with the five reserved surface forms.
  explicit Vocab(std::vector<std::string> tokens);

  // Whitespace tokens of every line, ranked by frequency with lexicographic
  // tie-breaking, capped so that the vocabulary holds at most max_size ids.
  static Vocab build(std::span<const std::string> raw_corpus, std::size_t max_size);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> id_of_;
};

// [CLS] content... [SEP]
struct Sentence {
  std::vector<TokenId> token_ids;

  static Sentence from_content(std::span<const TokenId> content);
  std::span<const TokenId> content() const;
  std::size_t content_length() const { return token_ids.size() - 2; }
};

struct Document {
  std::string doc_id;
  std::string lang;
  std::vector<Sentence> sentences;
};

// One line of the document file: {"doc_id", "lang", "text"}, sentences
// separated by '\n' inside text.
struct RawDocument {
  std::string doc_id;
  std::string lang;
  std::string text;
};

std::vector<std::string> split_whitespace(std::string_view text);

// Newline-delimited sentences, each truncated to kMaxSentenceTokens content
// tokens; more than kMaxDocumentSentences sentences are split greedily into
// consecutive chunks. Chunk k > 0 of a split document gets id "<doc_id>#k".
std::vector<Document> segment_and_split(const RawDocument& raw, const Vocab& vocab);
std::vector<Document> segment_corpus(std::span<const RawDocument> raw, const Vocab& vocab);

std::vector<RawDocument> read_documents(const std::filesystem::path& path);
void write_documents(const std::filesystem::path& path, std::span<const RawDocument> docs);

struct IntRange {
  int min = 0;
  int max = 0;
};

struct SyntheticCorpusSpec {
  int num_languages = 2;
  int latent_vocab_size = 200;
  int num_topics = 16;
  double topic_transition_stickiness = 0.8;
  IntRange sentences_per_doc{4, 8};
  IntRange tokens_per_sentence{5, 10};
  // Latent documents; each is rendered once per language.
  int num_docs = 1000;
  std::uint64_t seed = 1;
  // Rank-frequency exponent of every topic's token distribution.
  double zipf_exponent = 1.0;

  void validate() const;
};

struct LatentDocument {
  std::size_t latent_id = 0;
  std::vector<int> topics;                // one per sentence
  std::vector<std::vector<int>> tokens;   // latent token ids per sentence
};

struct AlignmentRow {
  std::size_t latent_id = 0;
  std::string lang;
  std::string doc_id;
};

struct SyntheticCorpus {
  SyntheticCorpusSpec spec;
  std::vector<LatentDocument> latent;
  // Ordered by latent id, then language.
  std::vector<RawDocument> documents;
  std::vector<AlignmentRow> alignment;
};

std::string language_tag(int lang);
std::string surface_token(int lang, int latent_token);
std::string synthetic_doc_id(int lang, std::size_t latent_id);

SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec);

void write_alignment(const std::filesystem::path& path, std::span<const AlignmentRow> rows);
std::vector<AlignmentRow> read_alignment(const std::filesystem::path& path);

// A retrieval unit cut from one document: consecutive sentence windows of
// two, with an odd trailing sentence folded into the last window.
struct Passage {
  std::string passage_id;
  std::string doc_id;
  std::size_t first_sentence = 0;
  std::size_t num_sentences = 0;
  std::string text;  // content tokens joined by single spaces
  std::size_t token_length = 0;
};

std::vector<Passage> make_passages(const Document& doc, const Vocab& vocab);

struct RetrievalPair {
  std::string query_text;
  std::string passage_id;
  std::string passage_text;
};

// One pair per sentence of every document in `lang` with at least two
// sentences. The query is the sentence with each token dropped
// independently with probability `dropout` (at least one token is kept);
// the positive is the passage containing that sentence.
std::vector<RetrievalPair> make_retrieval_pairs(std::span<const Document> docs,
                                                const Vocab& vocab, const std::string& lang,
                                                std::uint64_t seed, double dropout = 0.2);

void write_pairs(const std::filesystem::path& path, std::span<const RetrievalPair> pairs);
std::vector<RetrievalPair> read_pairs(const std::filesystem::path& path);

struct Query {
  std::string qid;
  std::string text;
};

using Qrels = std::map<std::string, std::vector<std::string>>;

// Evaluation material for one language: every passage of the documents,
// plus up to max_queries dropout queries with their relevance judgments.
struct RetrievalSet {
  std::vector<Passage> passages;
  std::vector<Query> queries;
  Qrels qrels;
};

RetrievalSet make_retrieval_set(std::span<const Document> docs, const Vocab& vocab,
                                const std::string& lang, std::uint64_t seed,
                                std::size_t max_queries, double dropout = 0.2);

void write_queries(const std::filesystem::path& path, std::span<const Query> queries);
std::vector<Query> read_queries(const std::filesystem::path& path);
void write_qrels(const std::filesystem::path& path, const Qrels& qrels);
Qrels read_qrels(const std::filesystem::path& path);
// Passages are stored in the document file format (one sentence per line).
void write_passages(const std::filesystem::path& path, std::span<const Passage> passages,
                    const std::string& lang);

struct MlmMaskedBatch {
  std::vector<TokenId> input_ids;
  std::vector<TokenId> target_ids;         // original ids at mask_positions
  std::vector<std::size_t> mask_positions; // ascending
};

// Each content position is selected with probability `rate`; selected
// positions become [MASK] 80%, a random non-reserved id 10%, unchanged 10%.
MlmMaskedBatch make_mlm_mask(const Sentence& sentence, double rate, std::mt19937_64& rng,
                             std::size_t vocab_size);

// Mixes a base seed with a stream index into an independent 64-bit seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace msm

#endif  // MSM_CORPUS_HPP_
