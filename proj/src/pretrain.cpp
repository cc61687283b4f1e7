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

#include "msm/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace msm {
namespace {

constexpr std::uint64_t kStreamDocs = 0;
constexpr std::uint64_t kStreamMlm = 1;
constexpr std::uint64_t kStreamCross = 2;

std::uint64_t step_seed(const PretrainConfig& c, std::uint64_t step, std::uint64_t stream) {
  return derive_seed(derive_seed(c.seed, step), stream);
}

}  // namespace

void PretrainConfig::validate() const {
  model.validate();
  loss.validate();
  if (batch_docs < 2) throw std::invalid_argument("batch_docs must be >= 2 (cross negatives)");
  if (cross_negative_cap < 1) throw std::invalid_argument("cross_negative_cap must be >= 1");
  if (warmup_steps > total_steps) throw std::invalid_argument("warmup_steps > total_steps");
  if (!(mlm_rate > 0.0 && mlm_rate < 1.0)) throw std::invalid_argument("mlm_rate must be in (0,1)");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning_rate must be finite and >= 0");
  }
  if (msm_weight < 0.0) throw std::invalid_argument("msm_weight must be >= 0");
  if (log_every == 0) throw std::invalid_argument("log_every must be >= 1");
}

PretrainBatch build_batch(std::span<const Document> corpus, const PretrainConfig& config,
                          std::uint64_t step) {
  if (corpus.empty()) throw std::invalid_argument("empty pretraining corpus");
  std::vector<std::size_t> all(corpus.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::size_t> pick;
  std::mt19937_64 rng(step_seed(config, step, kStreamDocs));
  if (config.single_language_batches) {
    std::set<std::string> langs;
    for (const Document& d : corpus) langs.insert(d.lang);
    std::uniform_int_distribution<std::size_t> which(0, langs.size() - 1);
    const std::string lang = *std::next(langs.begin(), static_cast<std::ptrdiff_t>(which(rng)));
    std::erase_if(all, [&](std::size_t i) { return corpus[i].lang != lang; });
    if (all.size() < 2) throw std::invalid_argument("language " + lang + " has fewer than two documents");
  }
  std::sample(all.begin(), all.end(), std::back_inserter(pick),
              std::min(config.batch_docs, corpus.size()), rng);
  std::shuffle(pick.begin(), pick.end(), rng);
  return build_batch_from(corpus, pick, config, step);
}

PretrainBatch build_batch_from(std::span<const Document> corpus,
                               std::span<const std::size_t> doc_indices,
                               const PretrainConfig& config, std::uint64_t step) {
  PretrainBatch b;
  std::mt19937_64 mlm_rng(step_seed(config, step, kStreamMlm));
  for (std::size_t idx : doc_indices) {
    const Document& doc = corpus[idx];
    if (doc.sentences.empty()) throw std::invalid_argument("empty document: " + doc.doc_id);
    b.doc_indices.push_back(idx);
    b.langs.push_back(doc.lang);
    b.doc_offset.push_back(b.clean.segments.size());
    b.doc_length.push_back(doc.sentences.size());
    for (const Sentence& s : doc.sentences) {
      b.clean.append(s.token_ids);
      MlmMaskedBatch m = make_mlm_mask(s, config.mlm_rate, mlm_rng, config.model.vocab_size);
      const std::size_t base = b.masked_tokens.ids.size();
      for (std::size_t k = 0; k < m.mask_positions.size(); ++k) {
        b.mlm_rows.push_back(base + m.mask_positions[k]);
        b.mlm_targets.push_back(m.target_ids[k]);
      }
      b.masked_tokens.append(m.input_ids);
    }
  }
  const std::size_t total = b.clean.segments.size();
  std::mt19937_64 cross_rng(step_seed(config, step, kStreamCross));
  for (std::size_t d = 0; d < b.doc_indices.size(); ++d) {
    std::vector<std::size_t> others;
    for (std::size_t r = 0; r < total; ++r) {
      if (r < b.doc_offset[d] || r >= b.doc_offset[d] + b.doc_length[d]) others.push_back(r);
    }
    if (others.empty()) throw std::invalid_argument("no cross-doc negatives");
    for (std::size_t j = 0; j < b.doc_length[d]; ++j) {
      MaskedInstance inst;
      inst.doc = d;
      inst.masked = j;
      if (others.size() > config.cross_negative_cap) {
        std::sample(others.begin(), others.end(), std::back_inserter(inst.cross),
                    config.cross_negative_cap, cross_rng);
      } else {
        inst.cross = others;
      }
      b.instances.push_back(std::move(inst));
    }
  }
  return b;
}

PretrainForward pretrain_forward(Graph& g, Model& model, const PretrainBatch& batch,
                                 const PretrainConfig& config, bool detach_alpha,
                                 const std::vector<double>* frozen_alpha) {
  PretrainForward out;
  const std::size_t S = batch.num_sentences();

  if (config.msm_weight > 0.0) {
    Var h = sentence_vectors(g, model, batch.clean);

    // Instances grouped by document-encoder copy.
    std::vector<EncoderHandle> doc_handle;
    for (const std::string& lang : batch.langs) {
      doc_handle.push_back(select_doc_encoder(model.config, lang));
    }
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < batch.instances.size(); ++i) {
      groups[doc_handle[batch.instances[i].doc].doc_prefix].push_back(i);
    }
    std::vector<Var> p_parts;
    std::vector<std::size_t> order;
    for (const auto& [prefix, members] : groups) {
      std::vector<DocumentInstance> docs;
      std::vector<std::size_t> pick;
      std::size_t row = 0;
      for (std::size_t i : members) {
        const MaskedInstance& inst = batch.instances[i];
        DocumentInstance di;
        for (std::size_t j = 0; j < batch.doc_length[inst.doc]; ++j) {
          di.rows.push_back(batch.doc_offset[inst.doc] + j);
        }
        di.masked = inst.masked;
        pick.push_back(row + inst.masked);
        row += di.rows.size();
        docs.push_back(std::move(di));
        order.push_back(i);
      }
      const EncoderHandle& handle = doc_handle[batch.instances[members.front()].doc];
      Var ctx = document_context(g, model, handle, h, docs);
      p_parts.push_back(project(g, model, handle, gather_rows(ctx, pick), ProjectionSide::kP));
    }
    Var p = p_parts.size() == 1 ? p_parts[0] : concat(p_parts, 0);

    // Every h is projected by the head serving its own language.
    std::map<std::string, std::vector<std::size_t>> head_rows;
    std::map<std::string, EncoderHandle> head_handle;
    for (std::size_t d = 0; d < batch.langs.size(); ++d) {
      auto& rows = head_rows[doc_handle[d].head_prefix];
      head_handle.emplace(doc_handle[d].head_prefix, doc_handle[d]);
      for (std::size_t j = 0; j < batch.doc_length[d]; ++j) rows.push_back(batch.doc_offset[d] + j);
    }
    Var hp;
    if (head_rows.size() == 1) {
      hp = project(g, model, head_handle.begin()->second, h, ProjectionSide::kH);
    } else {
      std::vector<Var> parts;
      std::vector<std::size_t> where(S);
      std::size_t at = 0;
      for (const auto& [prefix, rows] : head_rows) {
        parts.push_back(project(g, model, head_handle.at(prefix), gather_rows(h, rows),
                                ProjectionSide::kH));
        for (std::size_t r : rows) where[r] = at++;
      }
      hp = gather_rows(concat(parts, 0), where);
    }

    const std::size_t M = order.size();
    MsmTargets t;
    t.positive.resize(M);
    t.intra.assign(M * S, 0);
    t.cross.assign(M * S, 0);
    for (std::size_t m = 0; m < M; ++m) {
      const MaskedInstance& inst = batch.instances[order[m]];
      const std::size_t off = batch.doc_offset[inst.doc];
      t.positive[m] = static_cast<std::int32_t>(off + inst.masked);
      if (config.intra_negatives) {
        for (std::size_t j = 0; j < batch.doc_length[inst.doc]; ++j) {
          if (j != inst.masked) t.intra[m * S + off + j] = 1;
        }
      }
      for (std::size_t r : inst.cross) t.cross[m * S + r] = 1;
    }
    Graph probe(false);
    const Tensor scores = matmul_nt(probe.constant(p.value()), probe.constant(hp.value())).value();
    std::size_t bad = 0;
    out.score_min = std::numeric_limits<double>::infinity();
    out.score_max = -out.score_min;
    for (double v : scores.storage()) {
      if (std::isnan(v)) {
        ++bad;
        continue;
      }
      out.score_min = std::min(out.score_min, v);
      out.score_max = std::max(out.score_max, v);
    }
    if (bad > 0 || !std::isfinite(out.score_min) || !std::isfinite(out.score_max)) {
      std::ostringstream msg;
      msg << "non-finite contrastive logits: " << bad << " NaN of " << scores.size()
          << ", range [" << out.score_min << ", " << out.score_max << "]";
      throw std::runtime_error(msg.str());
    }
    MsmResult r = msm_loss(g, p, hp, t, config.loss, detach_alpha, frozen_alpha);
    out.alpha = std::move(r.alpha);
    out.msm = config.msm_weight == 1.0 ? r.loss : scale(r.loss, config.msm_weight);
  } else {
    out.msm = g.constant(Tensor::scalar(0.0));
  }

  if (batch.mlm_rows.empty()) {
    out.mlm = g.constant(Tensor::scalar(0.0));
  } else {
    Var hidden = sentence_hidden(g, model, batch.masked_tokens);
    out.mlm = mlm_loss(g, mlm_logits(g, model, hidden, batch.mlm_rows), batch.mlm_targets);
  }
  out.total = add(out.msm, out.mlm);
  return out;
}

PretrainState init_pretrain(const PretrainConfig& config) {
  config.validate();
  PretrainState s;
  s.model = init_model(config.model, config.seed);
  return s;
}

LossBreakdown train_step(PretrainState& state, const PretrainBatch& batch,
                         const PretrainConfig& config) {
  Graph g;
  PretrainForward f = pretrain_forward(g, state.model, batch, config);
  LossBreakdown b = total_loss(f.msm.value().item(), f.mlm.value().item());
  if (!f.alpha.empty()) {
    b.alpha = std::accumulate(f.alpha.begin(), f.alpha.end(), 0.0) / f.alpha.size();
  }
  if (!std::isfinite(b.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step << " (msm " << b.msm << ", mlm " << b.mlm
        << ", contrastive logits in [" << f.score_min << ", " << f.score_max << "])";
    throw std::runtime_error(msg.str());
  }
  state.model.params.zero_grad();
  g.backward(f.total);
  clip_grad_norm(state.model.params, config.grad_clip);
  const double lr = linear_schedule(state.step, config.learning_rate, config.warmup_steps,
                                    config.total_steps);
  state.adam.step(state.model.params, lr);
  ++state.step;
  return b;
}

void save_pretrain_checkpoint(const std::filesystem::path& dir, const PretrainState& state,
                              const Vocab& vocab) {
  save_model(dir, state.model, vocab, "pretrain", &state.adam.state(),
             nlohmann::json{{"step", state.step}});
}

PretrainState load_pretrain_checkpoint(const std::filesystem::path& dir, Vocab* vocab) {
  LoadedModel loaded = load_model(dir);
  if (loaded.kind != "pretrain" || !loaded.model.config.has_document_encoder) {
    throw std::runtime_error("checkpoint " + dir.string() + " is a '" + loaded.kind +
                             "' checkpoint without document encoder; pretraining needs a full "
                             "pretrain checkpoint");
  }
  PretrainState s;
  s.model = std::move(loaded.model);
  s.adam.set_state(std::move(loaded.extra));
  s.step = loaded.meta.at("step").get<std::uint64_t>();
  if (vocab != nullptr) *vocab = std::move(loaded.vocab);
  return s;
}

void save_export(const std::filesystem::path& dir, const Model& model, const Vocab& vocab) {
  save_model(dir, export_sentence_encoder(model), vocab, "export");
}

std::string log_header() { return "step\tmsm\tmlm\ttotal\talpha_mean"; }

std::string log_line(std::uint64_t step, const LossBreakdown& b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%llu\t%.10g\t%.10g\t%.10g\t%.10g",
                static_cast<unsigned long long>(step), b.msm, b.mlm, b.total, b.alpha);
  return buf;
}

PretrainRun run_pretrain(std::span<const Document> corpus, const Vocab& vocab,
                         const PretrainConfig& config, const std::filesystem::path& run_dir,
                         const std::function<void(std::uint64_t, const LossBreakdown&)>& on_step) {
  PretrainRun run;
  run.state = init_pretrain(config);
  if (vocab.size() != config.model.vocab_size) {
    throw std::invalid_argument("vocab size " + std::to_string(vocab.size()) +
                                " does not match model vocab_size " +
                                std::to_string(config.model.vocab_size));
  }
  std::filesystem::create_directories(run_dir);
  std::ofstream log(run_dir / "log.tsv");
  if (!log) throw std::runtime_error("cannot write " + (run_dir / "log.tsv").string());
  log << log_header() << '\n';
  while (run.state.step < config.total_steps) {
    const std::uint64_t step = run.state.step;
    PretrainBatch batch = build_batch(corpus, config, step);
    LossBreakdown b = train_step(run.state, batch, config);
    run.history.push_back(b);
    if (step % config.log_every == 0 || step + 1 == config.total_steps) {
      log << log_line(step, b) << '\n';
    }
    if (on_step) on_step(step, b);
  }
  log.close();
  save_pretrain_checkpoint(run_dir / "checkpoint", run.state, vocab);
  save_export(run_dir / "export", run.state.model, vocab);
  return run;
}

GradCheckReport pipeline_grad_check(const PipelineCheckOptions& o) {
  SyntheticCorpusSpec spec;
  spec.num_languages = 2;
  spec.latent_vocab_size = 20;
  spec.num_topics = 4;
  spec.sentences_per_doc = {2, 4};
  spec.tokens_per_sentence = {3, 5};
  spec.num_docs = 2;
  spec.seed = o.seed;
  SyntheticCorpus sc = generate_synthetic_corpus(spec);
  std::vector<std::string> text;
  for (const RawDocument& d : sc.documents) text.push_back(d.text);
  const Vocab vocab = Vocab::build(text, 1000);
  const std::vector<Document> docs = segment_corpus(sc.documents, vocab);

  PretrainConfig config;
  config.model.vocab_size = vocab.size();
  config.model.hidden = o.dim;
  config.model.heads = 2;
  config.model.ffn_multiplier = 2;
  config.model.sentence_layers = 2;
  config.model.document_layers = 2;
  // Larger init keeps every path well above round-off.
  config.model.init_std = 0.3;
  config.mlm_rate = 0.3;
  config.seed = o.seed;
  Model model = init_model(config.model, o.seed);
  std::vector<std::size_t> all(docs.size());
  std::iota(all.begin(), all.end(), 0);
  const PretrainBatch batch = build_batch_from(docs, all, config, 0);

  auto frozen = std::make_shared<std::vector<double>>();
  LossBuilder fn = [&, frozen](Graph& g, ParamStore&) {
    if (g.recording()) {
      PretrainForward f = pretrain_forward(g, model, batch, config, o.detach_alpha);
      *frozen = f.alpha;
      return f.total;
    }
    return pretrain_forward(g, model, batch, config, true, frozen.get()).total;
  };
  GradCheckOptions opt;
  opt.tolerance = o.tolerance;
  opt.abs_floor = 1e-6;
  opt.max_coords_per_param = o.max_coords_per_param;
  opt.seed = o.seed;
  // Key biases and h-side head biases shift a whole score row; their true
  // gradient is exactly zero and would only measure round-off.
  for (const std::string& name : model.params.names()) {
    const bool row_shift = name.find("attn.k.b") != std::string::npos ||
                           (name.rfind("head", 0) == 0 && name.find(".h.b") != std::string::npos);
    if (!row_shift) opt.only.push_back(name);
  }
  return grad_check(fn, model.params, opt);
}

}  // namespace msm
