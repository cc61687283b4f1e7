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

#include "msm/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "msm/optim.hpp"

namespace msm {
namespace {

constexpr std::size_t kEncodeChunk = 256;

bool ranks_before(const ScoredDoc& a, const ScoredDoc& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.doc_id < b.doc_id;
}

template <class Fn>
double mean_over_queries(const RunResult& run, const Qrels& qrels, Fn per_query) {
  double total = 0.0;
  std::size_t n = 0;
  static const Ranking kEmpty;
  for (const auto& [qid, rel] : qrels) {
    if (rel.empty()) continue;
    auto it = run.find(qid);
    const std::set<std::string> relevant(rel.begin(), rel.end());
    total += per_query(it == run.end() ? kEmpty : it->second, relevant);
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace

void FinetuneConfig::validate() const {
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2 (in-batch negatives)");
  if (warmup_steps > total_steps) throw std::invalid_argument("warmup_steps > total_steps");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning_rate must be finite and >= 0");
  }
}

Sentence to_sentence(const Vocab& vocab, const std::string& text) {
  return Sentence::from_content(vocab.encode(text));
}

Var in_batch_loss(Graph& g, Model& model, std::span<const Sentence> queries,
                  std::span<const Sentence> passages) {
  if (queries.size() != passages.size() || queries.size() < 2) {
    throw std::invalid_argument("in-batch loss needs B >= 2 aligned query/passage pairs");
  }
  SequenceBatch batch;
  for (const Sentence& s : queries) batch.append(s.token_ids);
  for (const Sentence& s : passages) batch.append(s.token_ids);
  Var v = sentence_vectors(g, model, batch);
  const std::size_t b = queries.size();
  std::vector<std::size_t> qr(b), pr(b);
  std::iota(qr.begin(), qr.end(), 0);
  std::iota(pr.begin(), pr.end(), b);
  std::vector<std::int32_t> diag(b);
  std::iota(diag.begin(), diag.end(), 0);
  return cross_entropy(matmul_nt(gather_rows(v, qr), gather_rows(v, pr)), diag);
}

std::vector<std::size_t> sample_pair_batch(std::span<const RetrievalPair> pairs,
                                           const FinetuneConfig& config, std::uint64_t step) {
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(config.seed, step));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> pick;
  std::set<std::string> seen;
  for (std::size_t i : order) {
    if (pick.size() == config.batch_size) break;
    // A repeated passage would be a false negative for the other query.
    if (seen.insert(pairs[i].passage_id).second) pick.push_back(i);
  }
  if (pick.size() < 2) throw std::invalid_argument("fewer than two distinct passages in pairs");
  return pick;
}

Model finetune_biencoder(const Model& encoder, const Vocab& vocab,
                         std::span<const RetrievalPair> pairs, const FinetuneConfig& config,
                         const std::function<void(std::uint64_t, double)>& on_step) {
  config.validate();
  Model model = export_sentence_encoder(encoder);
  if (vocab.size() != model.config.vocab_size) {
    throw std::invalid_argument("vocab does not match the encoder");
  }
  std::vector<Sentence> q, p;
  q.reserve(pairs.size());
  p.reserve(pairs.size());
  for (const RetrievalPair& pr : pairs) {
    q.push_back(to_sentence(vocab, pr.query_text));
    p.push_back(to_sentence(vocab, pr.passage_text));
  }
  Adam adam;
  for (std::uint64_t step = 0; step < config.total_steps; ++step) {
    const std::vector<std::size_t> rows = sample_pair_batch(pairs, config, step);
    std::vector<Sentence> bq, bp;
    for (std::size_t r : rows) {
      bq.push_back(q[r]);
      bp.push_back(p[r]);
    }
    Graph g;
    Var loss = in_batch_loss(g, model, bq, bp);
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      throw std::runtime_error("non-finite fine-tuning loss at step " + std::to_string(step));
    }
    model.params.zero_grad();
    g.backward(loss);
    clip_grad_norm(model.params, config.grad_clip);
    adam.step(model.params, linear_schedule(step, config.learning_rate, config.warmup_steps,
                                            config.total_steps));
    if (on_step) on_step(step, value);
  }
  return model;
}

Tensor encode_texts(Model& model, const Vocab& vocab, std::span<const std::string> texts) {
  const std::size_t d = model.config.hidden;
  Tensor out = Tensor::matrix(texts.size(), d);
  for (std::size_t start = 0; start < texts.size(); start += kEncodeChunk) {
    const std::size_t end = std::min(texts.size(), start + kEncodeChunk);
    SequenceBatch batch;
    for (std::size_t i = start; i < end; ++i) batch.append(to_sentence(vocab, texts[i]).token_ids);
    Graph g(false);
    const Tensor& v = sentence_vectors(g, model, batch).value();
    std::copy(v.storage().begin(), v.storage().end(), out.storage().begin() + start * d);
  }
  return out;
}

EncodedCorpus encode_corpus(Model& model, const Vocab& vocab, std::span<const Passage> passages) {
  EncodedCorpus c;
  std::vector<std::string> texts;
  for (const Passage& p : passages) {
    c.doc_ids.push_back(p.passage_id);
    c.token_lengths.push_back(p.token_length);
    texts.push_back(p.text);
  }
  c.embeddings = encode_texts(model, vocab, texts);
  if (!c.embeddings.all_finite()) throw std::runtime_error("non-finite passage embedding");
  return c;
}

void save_encoded(const std::filesystem::path& dir, const EncodedCorpus& corpus) {
  TensorArchive a;
  a.tensors.emplace("embeddings", corpus.embeddings);
  a.meta["doc_ids"] = corpus.doc_ids;
  a.meta["token_lengths"] = corpus.token_lengths;
  save_archive(dir, a);
}

EncodedCorpus load_encoded(const std::filesystem::path& dir) {
  TensorArchive a = load_archive(dir);
  EncodedCorpus c;
  c.embeddings = a.tensors.at("embeddings");
  c.doc_ids = a.meta.at("doc_ids").get<std::vector<std::string>>();
  c.token_lengths = a.meta.at("token_lengths").get<std::vector<std::size_t>>();
  if (c.doc_ids.size() != c.embeddings.rows() || c.token_lengths.size() != c.doc_ids.size()) {
    throw std::runtime_error("encoded corpus in " + dir.string() + " is inconsistent");
  }
  return c;
}

Ranking search(const EncodedCorpus& corpus, std::span<const double> query, std::size_t k) {
  const Tensor& e = corpus.embeddings;
  const std::size_t m = corpus.doc_ids.size();
  if (m > 0 && query.size() != e.cols()) {
    throw ShapeError("search: query dimension " + std::to_string(query.size()) + " vs corpus " +
                     std::to_string(e.cols()));
  }
  Ranking all(m);
  for (std::size_t r = 0; r < m; ++r) {
    auto row = e.row_span(r);
    double s = 0.0;
    for (std::size_t c = 0; c < query.size(); ++c) s += row[c] * query[c];
    all[r] = {corpus.doc_ids[r], s};
  }
  const std::size_t top = std::min(k, m);
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(top), all.end(),
                    ranks_before);
  all.resize(top);
  return all;
}

RunResult search_all(const EncodedCorpus& corpus, const std::vector<std::string>& qids,
                     const Tensor& query_vecs, std::size_t k) {
  RunResult run;
  for (std::size_t i = 0; i < qids.size(); ++i) {
    run[qids[i]] = search(corpus, query_vecs.row_span(i), k);
  }
  return run;
}

void write_run(const std::filesystem::path& path, const RunResult& run, const std::string& tag) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[64];
  for (const auto& [qid, ranking] : run) {
    for (std::size_t i = 0; i < ranking.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", ranking[i].score);
      out << qid << " Q0 " << ranking[i].doc_id << ' ' << i + 1 << ' ' << buf << ' ' << tag << '\n';
    }
  }
}

RunResult read_run(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::map<std::string, std::vector<std::pair<std::size_t, ScoredDoc>>> rows;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    auto f = split_whitespace(line);
    if (f.empty()) continue;
    if (f.size() != 6) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected 'qid Q0 docid rank score tag'");
    }
    rows[f[0]].push_back({std::stoul(f[3]), {f[2], std::stod(f[4])}});
  }
  RunResult run;
  for (auto& [qid, r] : rows) {
    std::stable_sort(r.begin(), r.end(), [](auto& a, auto& b) { return a.first < b.first; });
    for (auto& [rank, doc] : r) run[qid].push_back(std::move(doc));
  }
  return run;
}

double mrr_at_k(const RunResult& run, const Qrels& qrels, std::size_t k) {
  return mean_over_queries(run, qrels, [k](const Ranking& r, const std::set<std::string>& rel) {
    for (std::size_t i = 0; i < std::min(k, r.size()); ++i) {
      if (rel.count(r[i].doc_id)) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
  });
}

double recall_at_k(const RunResult& run, const Qrels& qrels, std::size_t k) {
  return mean_over_queries(run, qrels, [k](const Ranking& r, const std::set<std::string>& rel) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < std::min(k, r.size()); ++i) hit += rel.count(r[i].doc_id);
    return static_cast<double>(hit) / static_cast<double>(rel.size());
  });
}

double map_at_k(const RunResult& run, const Qrels& qrels, std::size_t k) {
  return mean_over_queries(run, qrels, [k](const Ranking& r, const std::set<std::string>& rel) {
    std::size_t hit = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < std::min(k, r.size()); ++i) {
      if (rel.count(r[i].doc_id)) {
        ++hit;
        sum += static_cast<double>(hit) / static_cast<double>(i + 1);
      }
    }
    return sum / static_cast<double>(std::min(rel.size(), k));
  });
}

double recall_at_kilotokens(const RunResult& run, const Qrels& qrels,
                            const std::map<std::string, std::size_t>& token_lengths,
                            std::size_t budget_tokens) {
  return mean_over_queries(
      run, qrels, [&](const Ranking& r, const std::set<std::string>& rel) {
        std::size_t used = 0;
        for (const ScoredDoc& d : r) {
          if (used >= budget_tokens) break;
          if (rel.count(d.doc_id)) return 1.0;
          auto it = token_lengths.find(d.doc_id);
          if (it == token_lengths.end()) {
            throw std::invalid_argument("no token length for " + d.doc_id);
          }
          used += it->second;
        }
        return 0.0;
      });
}

MetricSpec parse_metric(const std::string& s) {
  const auto at = s.find('@');
  if (at == std::string::npos || at + 1 >= s.size()) {
    throw std::invalid_argument("bad metric '" + s + "' (mrr@k, recall@k, map@k, r@<n>kt)");
  }
  const std::string name = s.substr(0, at);
  std::string arg = s.substr(at + 1);
  MetricSpec m;
  m.name = s;
  auto number = [&](const std::string& a) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(a, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != a.size() || v == 0) throw std::invalid_argument("bad metric cutoff in '" + s + "'");
    return static_cast<std::size_t>(v);
  };
  if (name == "r" && arg.size() > 2 && arg.substr(arg.size() - 2) == "kt") {
    m.kind = MetricSpec::Kind::kKiloTokens;
    m.k = number(arg.substr(0, arg.size() - 2)) * 1000;
  } else if (name == "mrr") {
    m.kind = MetricSpec::Kind::kMrr;
    m.k = number(arg);
  } else if (name == "recall") {
    m.kind = MetricSpec::Kind::kRecall;
    m.k = number(arg);
  } else if (name == "map") {
    m.kind = MetricSpec::Kind::kMap;
    m.k = number(arg);
  } else {
    throw std::invalid_argument("unknown metric '" + s + "' (mrr@k, recall@k, map@k, r@<n>kt)");
  }
  return m;
}

std::vector<MetricSpec> parse_metrics(const std::string& comma_list) {
  std::vector<MetricSpec> out;
  std::stringstream ss(comma_list);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(parse_metric(item));
  }
  if (out.empty()) throw std::invalid_argument("no metrics given");
  return out;
}

double evaluate_metric(const MetricSpec& m, const RunResult& run, const Qrels& qrels,
                       const std::map<std::string, std::size_t>& token_lengths) {
  switch (m.kind) {
    case MetricSpec::Kind::kMrr: return mrr_at_k(run, qrels, m.k);
    case MetricSpec::Kind::kRecall: return recall_at_k(run, qrels, m.k);
    case MetricSpec::Kind::kMap: return map_at_k(run, qrels, m.k);
    case MetricSpec::Kind::kKiloTokens: return recall_at_kilotokens(run, qrels, token_lengths, m.k);
  }
  return 0.0;
}

RetrievalScores evaluate_retrieval(Model& model, const Vocab& vocab, const RetrievalSet& set,
                                   std::size_t k, RunResult* run_out) {
  EncodedCorpus corpus = encode_corpus(model, vocab, set.passages);
  std::vector<std::string> qids, texts;
  for (const Query& q : set.queries) {
    qids.push_back(q.qid);
    texts.push_back(q.text);
  }
  RunResult run = search_all(corpus, qids, encode_texts(model, vocab, texts), k);
  RetrievalScores s{mrr_at_k(run, set.qrels, k), recall_at_k(run, set.qrels, k)};
  if (run_out != nullptr) *run_out = std::move(run);
  return s;
}

}  // namespace msm
