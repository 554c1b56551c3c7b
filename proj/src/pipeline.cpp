// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "kgfuse/checkpoint.hpp"
#include "kgfuse/error.hpp"
#include "kgfuse/io.hpp"
#include "kgfuse/ops.hpp"
#include "kgfuse/optim.hpp"

namespace kgfuse {

namespace {

constexpr std::uint64_t kTagScorer = 0x73636f72;
constexpr std::uint64_t kTagLm = 0x6c6d696e;
constexpr std::uint64_t kTagFusion = 0x66757365;
constexpr std::uint64_t kTagShuffle = 0x73687566;
constexpr std::uint64_t kTagDropout = 0x64726f70;
constexpr std::uint64_t kTagCounterfactual = 0x63666b67;

const char* const kFiles[] = {"kg.tsv",         "templates.tsv",   "corpus.txt", "qa_train.tsv",
                              "qa_holdout.tsv", "gen_holdout.tsv", "vocab.txt"};

void save_task(const TaskData& t, const std::function<std::filesystem::path(const std::string&)>& where) {
  write_file_atomic(where("kg.tsv"), [&](std::ostream& out) { write_tsv(t.graph, out); });
  write_templates(t.templates, where("templates.tsv"));
  write_lines(t.corpus, where("corpus.txt"));
  write_qa(t.graph, t.qa_train, where("qa_train.tsv"));
  write_qa(t.graph, t.qa_holdout, where("qa_holdout.tsv"));
  write_generation_set(t.graph, t.gen_holdout, where("gen_holdout.tsv"));
  t.vocab.save(where("vocab.txt"));
}

std::vector<std::int32_t> padded_targets(const std::vector<const LmExample*>& batch) {
  std::size_t len = 0;
  for (const auto* e : batch) len = std::max(len, e->ids.size());
  std::vector<std::int32_t> out;
  out.reserve(batch.size() * len);
  for (const auto* e : batch) {
    for (std::size_t i = 0; i < len; ++i) out.push_back(i < e->targets.size() ? e->targets[i] : kNoTarget);
  }
  return out;
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

// Shared minibatch loop. loss_fn builds the batch loss on the current tape.
template <typename LossFn>
std::vector<double> run_training(const ParamMap& params, const std::vector<LmExample>& data,
                                 const TrainOptions& options, const StepCallback& on_step, LossFn&& loss_fn) {
  std::vector<double> losses;
  if (options.epochs == 0 || data.empty()) return losses;
  if (options.batch_size == 0) throw Error(ErrorKind::kInvalidArgument, "batch_size must be >= 1");
  AdamOptions ao;
  ao.lr = options.lr;
  ao.warmup_fraction = options.warmup_fraction;
  ao.clip_norm = options.clip_norm;
  ao.total_steps = options.epochs * steps_per_epoch(data.size(), options.batch_size);
  Adam adam(ao, params);
  Rng shuffle = derive_rng(options.seed, kTagShuffle);
  Rng drop = derive_rng(options.seed, kTagDropout);
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle);
    for (std::size_t b = 0; b < order.size(); b += options.batch_size) {
      std::vector<const LmExample*> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + options.batch_size); ++k) {
        batch.push_back(&data[order[k]]);
      }
      Tape::current().clear();
      adam.zero_grad();
      Tensor loss = loss_fn(batch, drop);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        Tape::current().clear();
        throw Error(ErrorKind::kDiverged, "non-finite training loss at step " + std::to_string(losses.size()));
      }
      backward(loss);
      adam.step();
      losses.push_back(value);
      if (on_step) on_step(losses.size() - 1, value);
    }
  }
  Tape::current().clear();
  return losses;
}

std::string continuation(const Vocab& vocab, const std::vector<TokenId>& out, std::size_t prompt_len) {
  std::vector<TokenId> tail(out.begin() + static_cast<std::ptrdiff_t>(std::min(prompt_len, out.size())), out.end());
  if (!tail.empty() && tail.back() == kEos) tail.pop_back();
  return decode(vocab, tail);
}

std::vector<TokenId> with_eos(std::vector<TokenId> ids) {
  ids.push_back(kEos);
  return ids;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void TaskData::save(const std::filesystem::path& dir) const {
  StagedOutput staged(dir);
  save_task(*this, [&](const std::string& name) { return staged.stage(name); });
  staged.commit();
}

TaskData TaskData::load(const std::filesystem::path& dir) {
  for (const char* f : kFiles) {
    if (!std::filesystem::exists(dir / f)) throw Error(ErrorKind::kIo, "task file missing: " + (dir / f).string());
  }
  TaskData t;
  t.graph = ingest_tsv(dir / "kg.tsv", true);
  t.templates = read_templates(dir / "templates.tsv");
  t.corpus = read_lines(dir / "corpus.txt");
  t.qa_train = read_qa(t.graph, dir / "qa_train.tsv");
  t.qa_holdout = read_qa(t.graph, dir / "qa_holdout.tsv");
  t.gen_holdout = read_generation_set(t.graph, dir / "gen_holdout.tsv");
  t.vocab = Vocab::load(dir / "vocab.txt");
  t.lexicon = build_lexicon(t.graph);
  for (const auto& q : t.qa_holdout) t.holdout.push_back(q.triple);
  std::sort(t.holdout.begin(), t.holdout.end());
  for (const auto& tr : t.graph.triples()) {
    if (!std::binary_search(t.holdout.begin(), t.holdout.end(), tr)) t.train_facts.push_back(tr);
  }
  std::sort(t.train_facts.begin(), t.train_facts.end());
  return t;
}

Vocab build_task_vocab(const KnowledgeGraph& g, const std::vector<Template>& templates,
                       const std::vector<std::string>& corpus) {
  std::vector<std::string> text = corpus;
  const std::vector<Triple> all(g.triples().begin(), g.triples().end());
  for (const auto& q : make_qa(g, templates, all)) text.push_back(qa_line(q));
  for (const auto& s : make_generation_set(g, templates, all)) text.push_back(s.sentence());
  for (EntityId e = 0; e < g.entity_count(); ++e) text.push_back(g.entities().label(e));
  for (RelationId r = 0; r < g.relation_count(); ++r) text.push_back(g.relations().label(r));
  return Vocab::build(text, 1);
}

TaskData prepare_task(KnowledgeGraph g, double holdout_fraction, std::uint64_t seed) {
  TaskData t;
  // Ids follow the TSV order so that a saved task reloads with the same ids.
  std::stringstream tsv;
  write_tsv(g, tsv);
  t.graph = ingest_tsv(tsv, true);
  t.templates = default_templates(t.graph);
  t.holdout = choose_holdout(t.graph, holdout_fraction, seed);
  for (const auto& tr : t.graph.triples()) {
    if (!std::binary_search(t.holdout.begin(), t.holdout.end(), tr)) t.train_facts.push_back(tr);
  }
  std::sort(t.train_facts.begin(), t.train_facts.end());
  t.corpus = render_corpus(t.graph, t.templates, t.holdout);
  t.qa_train = make_qa(t.graph, t.templates, t.train_facts);
  t.qa_holdout = make_qa(t.graph, t.templates, t.holdout);
  t.gen_holdout = make_generation_set(t.graph, t.templates, t.holdout);
  t.vocab = build_task_vocab(t.graph, t.templates, t.corpus);
  t.lexicon = build_lexicon(t.graph);
  return t;
}

LmExample make_text_example(const Vocab& vocab, std::string_view text) {
  LmExample e;
  e.ids = with_eos(encode(vocab, text).ids);
  e.targets.assign(e.ids.size(), kNoTarget);
  for (std::size_t i = 0; i + 1 < e.ids.size(); ++i) e.targets[i] = e.ids[i + 1];
  return e;
}

LmExample make_qa_example(const Vocab& vocab, const EntityLexicon& lex, const QaExample& qa) {
  auto question = link(encode(vocab, qa.question), lex);
  LmExample e = make_text_example(vocab, qa_line(qa));
  const std::size_t qlen = question.seq.ids.size();
  for (std::size_t i = 0; i + 1 < qlen && i < e.targets.size(); ++i) e.targets[i] = kNoTarget;
  e.alignments = std::move(question.alignments);
  return e;
}

std::vector<LmExample> pretraining_set(const TaskData& task) {
  std::vector<LmExample> out;
  for (const auto& s : task.corpus) out.push_back(make_text_example(task.vocab, s));
  for (const auto& q : task.qa_train) out.push_back(make_text_example(task.vocab, qa_line(q)));
  return out;
}

std::vector<LmExample> fusion_training_set(const TaskData& task, const FuseOptions& options, std::uint64_t seed,
                                           std::vector<KnowledgeGraph>& graphs) {
  // Examples point into `graphs`; growing it later would invalidate them.
  graphs.clear();
  graphs.reserve(options.counterfactual_graphs);
  Rng rng = derive_rng(seed, kTagCounterfactual);
  std::vector<LmExample> out;
  for (std::size_t k = 0; k < options.counterfactual_graphs; ++k) {
    graphs.push_back(resample_objects(task.graph, task.train_facts, rng));
    const auto& gc = graphs.back();
    const std::vector<Triple> facts(gc.triples().begin(), gc.triples().end());
    for (const auto& q : make_qa(gc, task.templates, facts)) {
      auto e = make_qa_example(task.vocab, task.lexicon, q);
      e.graph = &gc;
      out.push_back(std::move(e));
    }
  }
  if (options.real_qa) {
    for (const auto& q : task.qa_train) out.push_back(make_qa_example(task.vocab, task.lexicon, q));
  }
  return out;
}

std::vector<double> train_lm(TransformerModel& lm, const std::vector<LmExample>& data, const TrainOptions& options,
                             const StepCallback& on_step) {
  const bool dropout = lm.config().dropout > 0.0;
  return run_training(lm.params().items(), data, options, on_step,
                      [&](const std::vector<const LmExample*>& batch, Rng& drop) {
                        std::vector<std::vector<TokenId>> ids;
                        for (const auto* e : batch) ids.push_back(e->ids);
                        ForwardOptions fo;
                        fo.training = dropout;
                        fo.rng = dropout ? &drop : nullptr;
                        auto r = lm.forward(ids, fo);
                        return ops::cross_entropy(r.logits, padded_targets(batch), kNoTarget);
                      });
}

std::vector<double> train_fused(FusedModel& fm, const std::vector<LmExample>& data, const KnowledgeGraph& g,
                                const KgEmbeddingTable& table, const TrainOptions& options, bool freeze_base,
                                const StepCallback& on_step) {
  ParamMap trainable;
  for (const auto& [name, t] : fm.params().items()) {
    if (!freeze_base || name.rfind("fusion.", 0) == 0) trainable.emplace(name, t);
  }
  const bool dropout = fm.config().dropout > 0.0;
  return run_training(trainable, data, options, on_step, [&](const std::vector<const LmExample*>& batch, Rng& drop) {
    std::vector<FusionInput> in;
    std::vector<KgMemory> mem;
    for (const auto* e : batch) {
      in.push_back({e->ids, e->alignments});
      mem.push_back(build_memory(e->alignments, e->graph ? *e->graph : g, table, fm.fusion_config()));
    }
    ForwardOptions fo;
    fo.training = dropout;
    fo.rng = dropout ? &drop : nullptr;
    auto r = fm.forward(in, mem, table, fo);
    return ops::cross_entropy(r.lm.logits, padded_targets(batch), kNoTarget);
  });
}

std::string answer_lm(const TransformerModel& lm, const Vocab& vocab, const std::string& question,
                      std::size_t max_new) {
  const auto ids = encode(vocab, question).ids;
  return continuation(vocab, generate(lm, ids, max_new), ids.size());
}

std::string answer_fused(const FusedModel& fm, const Vocab& vocab, const EntityLexicon& lex,
                         const KnowledgeGraph& g, const KgEmbeddingTable& table, const std::string& question,
                         std::size_t max_new) {
  const auto ls = link(encode(vocab, question), lex);
  return continuation(vocab, fm.generate(ls.seq.ids, ls.alignments, g, table, max_new), ls.seq.ids.size());
}

EvalRun evaluate_lm(const TransformerModel& lm, const TaskData& task, std::size_t max_new, const std::string& name) {
  NoGradGuard no_grad;
  EvalRun run;
  run.model = name;
  for (const auto& q : task.qa_holdout) {
    run.qa.push_back(score_qa(q, answer_lm(lm, task.vocab, q.question, max_new), task.lexicon));
  }
  for (const auto& ex : task.gen_holdout) {
    const auto prompt = encode(task.vocab, ex.prompt).ids;
    const auto prediction = continuation(task.vocab, generate(lm, prompt, max_new), prompt.size());
    const std::vector<std::vector<TokenId>> full{with_eos(encode(task.vocab, ex.sentence()).ids)};
    const auto nll = next_token_nll(lm.forward(full).logits, full);
    run.gen.push_back(score_generation(ex.prompt, prediction, ex.reference, nll));
  }
  return run;
}

EvalRun evaluate_fused(const FusedModel& fm, const TaskData& task, const KgEmbeddingTable& table,
                       std::size_t max_new, const std::string& name) {
  NoGradGuard no_grad;
  EvalRun run;
  run.model = name;
  for (const auto& q : task.qa_holdout) {
    const auto answer = answer_fused(fm, task.vocab, task.lexicon, task.graph, table, q.question, max_new);
    run.qa.push_back(score_qa(q, answer, task.lexicon));
  }
  for (const auto& ex : task.gen_holdout) {
    const auto prediction =
        answer_fused(fm, task.vocab, task.lexicon, task.graph, table, ex.prompt, max_new);
    auto linked = link(encode(task.vocab, ex.sentence()), task.lexicon);
    FusionInput in{with_eos(linked.seq.ids), linked.alignments};
    const auto mem = build_memory(in.alignments, task.graph, table, fm.fusion_config());
    const auto result = fm.forward({in}, {mem}, table);
    const auto nll = next_token_nll(result.lm.logits, {in.ids});
    run.gen.push_back(score_generation(ex.prompt, prediction, ex.reference, nll));
  }
  return run;
}

TransformerModel make_lm(const RunConfig& run, const Vocab& vocab, Rng& rng) {
  ModelConfig c = run.lm;
  c.vocab_size = vocab.size();
  c.mode = AttentionMode::kCausal;
  c.segment_vocab = 0;
  return TransformerModel(c, rng);
}

ModelConfig scorer_config(const RunConfig& run, const Vocab& vocab) {
  ModelConfig c = run.scorer;
  c.vocab_size = vocab.size();
  c.mode = AttentionMode::kBidirectional;
  c.segment_vocab = kScorerSegments;
  return c;
}

ScorerTrainOptions scorer_options(const RunConfig& run) {
  ScorerTrainOptions o;
  o.epochs = run.scorer_train.epochs;
  o.batch_size = run.scorer_train.batch_size;
  o.lr = run.scorer_train.lr;
  o.clip_norm = run.scorer_train.clip_norm;
  o.seed = run.seed;
  return o;
}

void write_loss_log(const std::filesystem::path& path, const std::vector<double>& losses) {
  write_file_atomic(path, [&](std::ostream& out) {
    out << "step\tloss\n" << std::setprecision(9);
    for (std::size_t i = 0; i < losses.size(); ++i) out << i << '\t' << losses[i] << '\n';
  });
}

ScorerStage run_scorer_stage(const RunConfig& run, const TaskData& task) {
  Rng rng = derive_rng(run.seed, kTagScorer);
  auto scorer = make_scorer(scorer_config(run, task.vocab), rng);
  auto losses = train_scorer(task.graph, task.vocab, scorer, scorer_options(run)).losses;
  auto table = export_embeddings(task.graph, task.vocab, scorer);
  return {std::move(scorer), std::move(table), std::move(losses)};
}

LmStage run_lm_stage(const RunConfig& run, const TaskData& task) {
  Rng rng = derive_rng(run.seed, kTagLm);
  auto lm = make_lm(run, task.vocab, rng);
  TrainOptions options = run.lm_train;
  options.seed = run.seed;
  auto losses = train_lm(lm, pretraining_set(task), options);
  return {std::move(lm), std::move(losses)};
}

FusionConfig fusion_config_for(const RunConfig& run, FusionMode mode) {
  FusionConfig fc = run.fusion;
  if (mode != run.fusion.mode) fc.layer.reset();
  fc.mode = mode;
  return fc;
}

FuseStage run_fuse_stage(const RunConfig& run, const TaskData& task, const TransformerModel& lm,
                         const KgEmbeddingTable& table, FusionMode mode) {
  std::vector<KnowledgeGraph> graphs;
  const auto data = fusion_training_set(task, run.fuse, run.seed, graphs);
  Rng rng = derive_rng(run.seed, kTagFusion + static_cast<std::uint64_t>(mode));
  FusedModel fm(lm.clone(), fusion_config_for(run, mode), table, rng);
  TrainOptions options = run.fuse.train;
  options.seed = run.seed;
  auto losses = train_fused(fm, data, task.graph, table, options, run.fuse.freeze_base);
  return {std::move(fm), std::move(losses)};
}

ExperimentResult run_experiment(const RunConfig& run, const std::filesystem::path& out_dir, std::ostream* progress) {
  run.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto note = [&](const std::string& what) {
    if (progress) {
      *progress << "[" << std::fixed << std::setprecision(1) << seconds_since(t0) << "s] " << what << '\n';
      progress->flush();
    }
  };
  std::unique_ptr<StagedOutput> staged;
  if (!out_dir.empty()) staged = std::make_unique<StagedOutput>(out_dir);
  auto where = [&](const std::string& name) { return staged->stage(name); };

  const TaskData task = prepare_task(generate_kg(run.synth), run.synth.holdout_fraction, run.seed);
  note("task: " + std::to_string(task.graph.triple_count()) + " triples, " + std::to_string(task.holdout.size()) +
       " held out, vocab " + std::to_string(task.vocab.size()));
  ExperimentResult result;

  auto scorer = run_scorer_stage(run, task);
  result.scorer_losses = scorer.losses;
  note("scorer trained");

  auto lm = run_lm_stage(run, task);
  result.lm_losses = lm.losses;
  result.base = evaluate_lm(lm.lm, task, run.max_new_tokens, "base");
  note("language model trained");

  std::vector<FuseStage> fused;
  for (const auto mode : run.modes) {
    auto stage = run_fuse_stage(run, task, lm.lm, scorer.table, mode);
    ModeResult mr{mode, stage.losses, stage.model.alpha(), {}, {}};
    mr.eval = evaluate_fused(stage.model, task, scorer.table, run.max_new_tokens, std::string(to_string(mode)));
    mr.pair = evaluate_pair(result.base, mr.eval, run.seed, run.bootstrap_resamples);
    note(std::string(to_string(mode)) + ": factual " + format_percent(mr.pair.model.factual_accuracy) + " vs " +
         format_percent(mr.pair.baseline.factual_accuracy) + ", p=" + std::to_string(mr.pair.p_value));
    result.modes.push_back(std::move(mr));
    fused.push_back(std::move(stage));
  }

  if (staged) {
    save_task(task, where);
    save_model(where("scorer.ckpt"), scorer.scorer, scorer.losses.size(), run.seed);
    scorer.table.save(where("embeddings.tsv"));
    save_model(where("lm.ckpt"), lm.lm, lm.losses.size(), run.seed);
    write_loss_log(where("scorer_loss.tsv"), scorer.losses);
    write_loss_log(where("lm_loss.tsv"), lm.losses);
    std::vector<PairReport> pairs;
    for (std::size_t i = 0; i < result.modes.size(); ++i) {
      const auto name = std::string(to_string(result.modes[i].mode));
      save_model(where("fused-" + name + ".ckpt"), fused[i].model, fused[i].losses.size(), run.seed);
      write_loss_log(where("fuse_loss-" + name + ".tsv"), fused[i].losses);
      pairs.push_back(result.modes[i].pair);
    }
    std::string modes;
    for (const auto& m : result.modes) modes += (modes.empty() ? "" : ", ") + std::string(to_string(m.mode));
    write_file_atomic(where("report.txt"), [&](std::ostream& out) { write_report_table(out, pairs, modes); });
    write_file_atomic(where("report.tsv"), [&](std::ostream& out) { write_report_tsv(out, pairs); });
    staged->commit();
    note("outputs written to " + out_dir.string());
  }
  return result;
}

}  // namespace kgfuse
