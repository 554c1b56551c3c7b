// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "kgfuse/config.hpp"
#include "kgfuse/entity_linker.hpp"
#include "kgfuse/kg_fusion.hpp"
#include "kgfuse/kgbert.hpp"
#include "kgfuse/metrics.hpp"
#include "kgfuse/task_synth.hpp"
#include "kgfuse/text.hpp"
#include "kgfuse/transformer.hpp"

namespace kgfuse {

// The graph and everything rendered from it for one experiment.
struct TaskData {
  KnowledgeGraph graph;
  std::vector<Template> templates;
  std::vector<Triple> holdout;      // sorted; absent from the text corpus
  std::vector<Triple> train_facts;  // the rest, sorted
  std::vector<std::string> corpus;
  std::vector<QaExample> qa_train;
  std::vector<QaExample> qa_holdout;
  std::vector<GenExample> gen_holdout;
  Vocab vocab;
  EntityLexicon lexicon;

  // Files: kg.tsv, templates.tsv, corpus.txt, qa_train.tsv, qa_holdout.tsv,
  // gen_holdout.tsv, vocab.txt.
  void save(const std::filesystem::path& dir) const;
  static TaskData load(const std::filesystem::path& dir);
};

TaskData prepare_task(KnowledgeGraph g, double holdout_fraction, std::uint64_t seed);
// Covers the corpus, every QA line over the whole graph, and all labels.
Vocab build_task_vocab(const KnowledgeGraph& g, const std::vector<Template>& templates,
                       const std::vector<std::string>& corpus);

// One causal-LM training sequence: ids end with [EOS]; targets[i] is the token
// predicted at position i, or -1 when that position carries no loss.
struct LmExample {
  std::vector<TokenId> ids;
  std::vector<std::int32_t> targets;
  std::vector<Alignment> alignments;
  const KnowledgeGraph* graph = nullptr;  // memory source; null uses the task graph
};

inline constexpr std::int32_t kNoTarget = -1;

// Loss on every token after the first.
LmExample make_text_example(const Vocab& vocab, std::string_view text);
// Loss on the answer and [EOS] only; alignments come from the question.
LmExample make_qa_example(const Vocab& vocab, const EntityLexicon& lex, const QaExample& qa);

// Corpus sentences plus full QA lines over the training facts.
std::vector<LmExample> pretraining_set(const TaskData& task);

// QA examples for fusion training. Counterfactual graphs are appended to
// `graphs`, which must outlive the examples (reserve is handled here).
std::vector<LmExample> fusion_training_set(const TaskData& task, const FuseOptions& options, std::uint64_t seed,
                                           std::vector<KnowledgeGraph>& graphs);

using StepCallback = std::function<void(std::size_t step, double loss)>;

// Seeded shuffling, fixed-size batches, Adam with warmup and clipping.
// Returns the loss of every step; throws kDiverged on a non-finite loss.
std::vector<double> train_lm(TransformerModel& lm, const std::vector<LmExample>& data, const TrainOptions& options,
                             const StepCallback& on_step = {});
// Trains fusion.* parameters, plus the base when freeze_base is false.
std::vector<double> train_fused(FusedModel& fm, const std::vector<LmExample>& data, const KnowledgeGraph& g,
                                const KgEmbeddingTable& table, const TrainOptions& options, bool freeze_base,
                                const StepCallback& on_step = {});

// Holdout QA answers and holdout sentence continuations. Perplexity is over
// the whole reference sentence followed by [EOS].
EvalRun evaluate_lm(const TransformerModel& lm, const TaskData& task, std::size_t max_new,
                    const std::string& name = "base");
EvalRun evaluate_fused(const FusedModel& fm, const TaskData& task, const KgEmbeddingTable& table,
                       std::size_t max_new, const std::string& name);

// Text answer generated after `question`, [EOS] dropped.
std::string answer_lm(const TransformerModel& lm, const Vocab& vocab, const std::string& question,
                      std::size_t max_new);
std::string answer_fused(const FusedModel& fm, const Vocab& vocab, const EntityLexicon& lex,
                         const KnowledgeGraph& g, const KgEmbeddingTable& table, const std::string& question,
                         std::size_t max_new);

TransformerModel make_lm(const RunConfig& run, const Vocab& vocab, Rng& rng);
ModelConfig scorer_config(const RunConfig& run, const Vocab& vocab);
ScorerTrainOptions scorer_options(const RunConfig& run);

// Stages of the experiment, seeded from run.seed so that running them one by
// one (as the CLI does) matches run_experiment exactly.
struct ScorerStage {
  TransformerModel scorer;
  KgEmbeddingTable table;
  std::vector<double> losses;
};
ScorerStage run_scorer_stage(const RunConfig& run, const TaskData& task);

struct LmStage {
  TransformerModel lm;
  std::vector<double> losses;
};
LmStage run_lm_stage(const RunConfig& run, const TaskData& task);

struct FuseStage {
  FusedModel model;
  std::vector<double> losses;
};
// run.fusion with its mode replaced by `mode`; an explicit site layer is kept
// only for the configured mode.
FusionConfig fusion_config_for(const RunConfig& run, FusionMode mode);
FuseStage run_fuse_stage(const RunConfig& run, const TaskData& task, const TransformerModel& lm,
                         const KgEmbeddingTable& table, FusionMode mode);

struct ModeResult {
  FusionMode mode;
  std::vector<double> losses;
  double alpha = 0.0;
  EvalRun eval;
  PairReport pair;
};

struct ExperimentResult {
  std::vector<double> scorer_losses;
  std::vector<double> lm_losses;
  EvalRun base;
  std::vector<ModeResult> modes;
};

// Full run: synthesize, train the scorer and the LM, then fuse and evaluate
// each configured mode against the base LM. With a non-empty `out_dir` the
// task files, checkpoints, loss logs (step<TAB>loss) and reports are written
// there atomically.
ExperimentResult run_experiment(const RunConfig& run, const std::filesystem::path& out_dir = {},
                                std::ostream* progress = nullptr);

void write_loss_log(const std::filesystem::path& path, const std::vector<double>& losses);

}  // namespace kgfuse
