// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "kgfuse/checkpoint.hpp"
#include "kgfuse/config.hpp"
#include "kgfuse/error.hpp"
#include "kgfuse/io.hpp"
#include "kgfuse/pipeline.hpp"

namespace kgfuse::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool needs_out) {
  app->add_option("--config", c.config, "key=value configuration file")->check(CLI::ExistingFile);
  c.seed_opt = app->add_option("--seed", c.seed, "run seed (overrides the config)");
  auto* out = app->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
}

RunConfig resolve(const Common& c) {
  try {
    Config explicit_values;
    if (!c.config.empty()) explicit_values = Config::load(c.config);
    if (c.seed_opt && c.seed_opt->count() > 0) explicit_values.set("seed", std::to_string(c.seed));
    auto run = RunConfig::from(resolve_config(explicit_values));
    run.validate();
    return run;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kIo) throw;
    throw UsageError(e.what());
  }
}

struct LoadedModel {
  std::unique_ptr<TransformerModel> lm;
  std::unique_ptr<FusedModel> fused;

  std::string name() const { return fused ? std::string(to_string(fused->fusion_config().mode)) : "base"; }
};

LoadedModel load_model(const std::string& path) {
  const auto ckpt = read_checkpoint(path);
  LoadedModel m;
  switch (ckpt.kind) {
    case CheckpointKind::kLm:
      m.lm = std::make_unique<TransformerModel>(load_lm(ckpt));
      break;
    case CheckpointKind::kFused:
      m.fused = std::make_unique<FusedModel>(load_fused(ckpt));
      break;
    case CheckpointKind::kScorer:
      throw Error(ErrorKind::kInvalidArgument, path + " is a scorer checkpoint; expected a language model");
  }
  return m;
}

KgEmbeddingTable load_table_for(const LoadedModel& m, const std::string& path, const TaskData& task) {
  if (!m.fused) return {};
  if (path.empty()) throw UsageError("--embeddings is required for a fused checkpoint");
  return KgEmbeddingTable::load(path, task.graph);
}

EvalRun evaluate(const LoadedModel& m, const TaskData& task, const KgEmbeddingTable& table, std::size_t max_new,
                 const std::string& name) {
  if (m.fused) return evaluate_fused(*m.fused, task, table, max_new, name);
  return evaluate_lm(*m.lm, task, max_new, name);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void print_summary(std::ostream& out, const MetricsReport& r) {
  out << "model " << r.model << '\n'
      << "qa_examples " << r.qa_count << '\n'
      << "precision " << format_percent(r.precision) << '\n'
      << "recall " << format_percent(r.recall) << '\n'
      << "f1 " << format_percent(r.f1) << '\n'
      << "exact_match " << format_percent(r.exact_match) << '\n'
      << "factual_accuracy " << format_percent(r.factual_accuracy) << '\n'
      << "gen_examples " << r.gen_count << '\n'
      << "bleu " << fmt(100.0 * r.bleu) << '\n'
      << "rouge_l " << fmt(100.0 * r.rouge_l) << '\n'
      << "perplexity " << fmt(r.perplexity) << '\n';
}

std::vector<Triple> read_triple_list(const KnowledgeGraph& g, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path);
  std::vector<Triple> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) f.push_back(cell);
    if (f.size() < 3) throw Error(ErrorKind::kParse, path + " line " + std::to_string(lineno) + ": expected 3 fields");
    auto s = g.entities().find(f[0]);
    auto r = g.relations().find(f[1]);
    auto o = g.entities().find(f[2]);
    if (!s || !r || !o) {
      throw Error(ErrorKind::kNotFound, path + " line " + std::to_string(lineno) + ": unknown entity or relation");
    }
    out.push_back(Triple{*s, *r, *o});
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge-graph fusion toolkit for small language models", "kgfuse"};
  app.require_subcommand(1);

  Common common;
  std::string input, data, model, baseline, embeddings, lm_path, triples, mode_name;
  bool lenient = false;

  auto* kg = app.add_subcommand("kg", "knowledge-graph files");
  kg->require_subcommand(1);
  auto* kg_ingest = kg->add_subcommand("ingest", "parse a triple TSV and write the canonical kg.tsv");
  kg_ingest->add_option("--input", input, "triple TSV")->required()->check(CLI::ExistingFile);
  kg_ingest->add_flag("--lenient", lenient, "skip malformed lines instead of failing");
  add_common(kg_ingest, common, true);
  auto* kg_stats = kg->add_subcommand("stats", "print entity, relation and triple counts");
  kg_stats->add_option("--input", input, "triple TSV")->required()->check(CLI::ExistingFile);
  kg_stats->add_flag("--lenient", lenient, "skip malformed lines instead of failing");
  add_common(kg_stats, common, false);

  auto* synth = app.add_subcommand("synth", "synthetic task data");
  synth->require_subcommand(1);
  auto* synth_gen = synth->add_subcommand("gen", "generate the graph, corpus, QA and generation sets");
  add_common(synth_gen, common, true);

  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", data, "task directory from 'synth gen'")->required()->check(CLI::ExistingDirectory);
  };

  auto* kgbert = app.add_subcommand("kgbert", "triple scorer");
  kgbert->require_subcommand(1);
  auto* kgbert_train = kgbert->add_subcommand("train", "train the scorer and export KG embeddings");
  add_data(kgbert_train);
  add_common(kgbert_train, common, true);
  auto* kgbert_score = kgbert->add_subcommand("score", "score subject/relation/object rows");
  add_data(kgbert_score);
  kgbert_score->add_option("--model", model, "scorer checkpoint")->required()->check(CLI::ExistingFile);
  kgbert_score->add_option("--triples", triples, "TSV of subject, relation, object ids")
      ->required()
      ->check(CLI::ExistingFile);
  add_common(kgbert_score, common, false);

  auto* lm = app.add_subcommand("lm", "base language model");
  lm->require_subcommand(1);
  auto* lm_pretrain = lm->add_subcommand("pretrain", "train the causal LM on the task corpus");
  add_data(lm_pretrain);
  add_common(lm_pretrain, common, true);

  auto* fuse = app.add_subcommand("fuse", "KG fusion");
  fuse->require_subcommand(1);
  auto* fuse_train = fuse->add_subcommand("train", "train fusion parameters on top of a pretrained LM");
  add_data(fuse_train);
  fuse_train->add_option("--lm", lm_path, "LM checkpoint")->required()->check(CLI::ExistingFile);
  fuse_train->add_option("--embeddings", embeddings, "KG embedding table")->required()->check(CLI::ExistingFile);
  fuse_train->add_option("--mode", mode_name, "fusion mode (default: fusion.mode)");
  add_common(fuse_train, common, true);

  auto* eval = app.add_subcommand("eval", "evaluate a base or fused checkpoint");
  eval->require_subcommand(1);
  auto* eval_qa = eval->add_subcommand("qa", "holdout question answering");
  auto* eval_gen = eval->add_subcommand("gen", "holdout sentence continuation");
  for (auto* sub : {eval_qa, eval_gen}) {
    add_data(sub);
    sub->add_option("--model", model, "LM or fused checkpoint")->required()->check(CLI::ExistingFile);
    sub->add_option("--embeddings", embeddings, "KG embedding table (fused checkpoints)")->check(CLI::ExistingFile);
    add_common(sub, common, false);
  }

  auto* report = app.add_subcommand("report", "comparison reports");
  report->require_subcommand(1);
  auto* report_compare = report->add_subcommand("compare", "compare a model against a baseline");
  add_data(report_compare);
  report_compare->add_option("--baseline", baseline, "baseline checkpoint")->required()->check(CLI::ExistingFile);
  report_compare->add_option("--model", model, "compared checkpoint")->required()->check(CLI::ExistingFile);
  report_compare->add_option("--embeddings", embeddings, "KG embedding table (fused checkpoints)")
      ->check(CLI::ExistingFile);
  add_common(report_compare, common, false);

  auto* experiment = app.add_subcommand("experiment", "run every stage and compare all configured modes");
  add_common(experiment, common, false);

  std::vector<const char*> argv{"kgfuse"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (kg_ingest->parsed() || kg_stats->parsed()) {
      IngestStats stats;
      const auto g = ingest_tsv(std::filesystem::path(input), !lenient, &stats);
      std::ostringstream summary;
      summary << "entities " << g.entity_count() << '\n'
              << "relations " << g.relation_count() << '\n'
              << "triples " << g.triple_count() << '\n';
      if (kg_ingest->parsed()) {
        summary << "lines " << stats.lines << '\n'
                << "skipped " << stats.skipped << '\n'
                << "duplicates " << stats.duplicates << '\n';
      }
      if (!common.out.empty()) {
        StagedOutput staged(common.out);
        if (kg_ingest->parsed()) {
          write_file_atomic(staged.stage("kg.tsv"), [&](std::ostream& o) { write_tsv(g, o); });
        }
        write_file_atomic(staged.stage("stats.txt"), [&](std::ostream& o) { o << summary.str(); });
        staged.commit();
      }
      out << summary.str();
      return kExitOk;
    }

    if (synth_gen->parsed()) {
      const auto run = resolve(common);
      const auto task = prepare_task(generate_kg(run.synth), run.synth.holdout_fraction, run.seed);
      task.save(common.out);
      out << "triples " << task.graph.triple_count() << '\n'
          << "holdout " << task.holdout.size() << '\n'
          << "corpus " << task.corpus.size() << '\n'
          << "vocab " << task.vocab.size() << '\n';
      return kExitOk;
    }

    if (experiment->parsed()) {
      const auto run = resolve(common);
      const auto result = run_experiment(run, common.out, &err);
      std::vector<PairReport> pairs;
      std::string modes;
      for (const auto& m : result.modes) {
        pairs.push_back(m.pair);
        modes += (modes.empty() ? "" : ", ") + std::string(to_string(m.mode));
      }
      write_report_table(out, pairs, modes);
      return kExitOk;
    }

    const auto run = resolve(common);
    const auto task = TaskData::load(data);

    if (kgbert_train->parsed()) {
      StagedOutput staged(common.out);
      auto stage = run_scorer_stage(run, task);
      save_model(staged.stage("scorer.ckpt"), stage.scorer, stage.losses.size(), run.seed);
      stage.table.save(staged.stage("embeddings.tsv"));
      write_loss_log(staged.stage("scorer_loss.tsv"), stage.losses);
      staged.commit();
      out << "steps " << stage.losses.size() << '\n';
      if (!stage.losses.empty()) out << "final_loss " << fmt(stage.losses.back()) << '\n';
      return kExitOk;
    }

    if (kgbert_score->parsed()) {
      const auto scorer = load_scorer(read_checkpoint(model));
      const auto rows = read_triple_list(task.graph, triples);
      std::ostringstream body;
      for (const auto& t : rows) {
        body << task.graph.entities().key(t.subject) << '\t' << task.graph.relations().key(t.relation) << '\t'
             << task.graph.entities().key(t.object) << '\t'
             << fmt(score_triple(scorer, serialize_triple(task.graph, t, task.vocab))) << '\n';
      }
      if (!common.out.empty()) {
        StagedOutput staged(common.out);
        write_file_atomic(staged.stage("scores.tsv"), [&](std::ostream& o) { o << body.str(); });
        staged.commit();
      }
      out << body.str();
      return kExitOk;
    }

    if (lm_pretrain->parsed()) {
      StagedOutput staged(common.out);
      auto stage = run_lm_stage(run, task);
      save_model(staged.stage("lm.ckpt"), stage.lm, stage.losses.size(), run.seed);
      write_loss_log(staged.stage("lm_loss.tsv"), stage.losses);
      staged.commit();
      out << "steps " << stage.losses.size() << '\n';
      if (!stage.losses.empty()) {
        out << "first_loss " << fmt(stage.losses.front()) << '\n' << "final_loss " << fmt(stage.losses.back()) << '\n';
      }
      return kExitOk;
    }

    if (fuse_train->parsed()) {
      FusionMode mode = run.fusion.mode;
      if (!mode_name.empty()) {
        try {
          mode = parse_fusion_mode(mode_name);
        } catch (const Error& e) {
          throw UsageError(e.what());
        }
      }
      StagedOutput staged(common.out);
      const auto base = load_lm(read_checkpoint(lm_path));
      const auto table = KgEmbeddingTable::load(embeddings, task.graph);
      auto stage = run_fuse_stage(run, task, base, table, mode);
      save_model(staged.stage("fused.ckpt"), stage.model, stage.losses.size(), run.seed);
      write_loss_log(staged.stage("fuse_loss.tsv"), stage.losses);
      staged.commit();
      out << "mode " << to_string(mode) << '\n' << "steps " << stage.losses.size() << '\n';
      out << "alpha " << fmt(stage.model.alpha()) << '\n';
      return kExitOk;
    }

    if (eval_qa->parsed() || eval_gen->parsed()) {
      const auto m = load_model(model);
      const auto table = load_table_for(m, embeddings, task);
      const auto result = evaluate(m, task, table, run.max_new_tokens, m.name());
      std::ostringstream body;
      body << std::setprecision(9);
      if (eval_qa->parsed()) {
        body << "question\tprediction\tprecision\trecall\tf1\texact\tfactual\n";
        for (const auto& q : result.qa) {
          body << q.question << '\t' << q.prediction << '\t' << q.prf.precision << '\t' << q.prf.recall << '\t'
               << q.prf.f1 << '\t' << q.exact << '\t' << q.factual << '\n';
        }
      } else {
        body << "prompt\tprediction\trouge_l\tnll\ttokens\n";
        for (const auto& g : result.gen) {
          body << g.prompt << '\t' << g.prediction << '\t' << g.rouge << '\t' << g.nll.total << '\t' << g.nll.tokens
               << '\n';
        }
      }
      if (!common.out.empty()) {
        StagedOutput staged(common.out);
        const std::string name = eval_qa->parsed() ? "eval_qa.tsv" : "eval_gen.tsv";
        write_file_atomic(staged.stage(name), [&](std::ostream& o) { o << body.str(); });
        staged.commit();
      }
      print_summary(out, summarize(result));
      return kExitOk;
    }

    if (report_compare->parsed()) {
      const auto base = load_model(baseline);
      const auto cand = load_model(model);
      const auto base_table = load_table_for(base, embeddings, task);
      const auto cand_table = load_table_for(cand, embeddings, task);
      auto base_name = base.name();
      auto cand_name = cand.name();
      if (base_name == cand_name) {
        base_name += " (baseline)";
      }
      const auto base_run = evaluate(base, task, base_table, run.max_new_tokens, base_name);
      const auto cand_run = evaluate(cand, task, cand_table, run.max_new_tokens, cand_name);
      const auto pair = evaluate_pair(base_run, cand_run, run.seed, run.bootstrap_resamples);
      std::ostringstream table, tsv;
      write_report_table(table, {pair}, cand_name);
      write_report_tsv(tsv, {pair});
      if (!common.out.empty()) {
        StagedOutput staged(common.out);
        write_file_atomic(staged.stage("report.txt"), [&](std::ostream& o) { o << table.str(); });
        write_file_atomic(staged.stage("report.tsv"), [&](std::ostream& o) { o << tsv.str(); });
        staged.commit();
      }
      out << table.str();
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace kgfuse::cli
