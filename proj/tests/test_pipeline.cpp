#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "doctest.h"
#include "kgfuse/checkpoint.hpp"
#include "kgfuse/config.hpp"
#include "kgfuse/error.hpp"
#include "kgfuse/io.hpp"
#include "kgfuse/pipeline.hpp"

using namespace kgfuse;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("kgfuse_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny_run(std::uint64_t seed = 3) {
  Config c;
  c.set("preset", "tiny");
  c.set("seed", std::to_string(seed));
  return RunConfig::from(resolve_config(c));
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::kInvalidArgument;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace

TEST_CASE("config parsing") {
  std::istringstream in("# comment\n\nseed = 7\nlm.lr=0.01\n  fusion.mode =dedicated-head \n");
  auto c = Config::parse(in);
  CHECK(c.get_u64("seed", 0) == 7);
  CHECK(c.get_double("lm.lr", 0) == doctest::Approx(0.01));
  CHECK(c.get("fusion.mode", "") == "dedicated-head");
  CHECK(c.get_size("lm.epochs", 11) == 11);

  std::istringstream bad("seed=1\nnot a pair\n");
  try {
    Config::parse(bad, "x.cfg");
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kParse);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  Config t;
  t.set("seed", "-3");
  CHECK(kind_of([&] { t.get_u64("seed", 0); }) == ErrorKind::kInvalidArgument);
  t.set("lm.lr", "fast");
  CHECK(kind_of([&] { t.get_double("lm.lr", 0); }) == ErrorKind::kInvalidArgument);
  t.set("fuse.real_qa", "yes");
  CHECK(kind_of([&] { t.get_bool("fuse.real_qa", true); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("presets and resolution") {
  CHECK(preset_names().size() == 5);
  CHECK(kind_of([] { preset("huge"); }) == ErrorKind::kInvalidArgument);

  Config c;
  c.set("preset", "mistrallike");
  c.set("fuse.epochs", "4");
  auto run = RunConfig::from(resolve_config(c));
  CHECK(run.lm_train.batch_size == 32);
  CHECK(run.fuse.train.batch_size == 32);
  CHECK(run.fusion.mode == FusionMode::kCrossLayerAdapter);
  CHECK(run.fuse.train.epochs == 4);
  CHECK(RunConfig::from(preset("gpt4like")).lm_train.batch_size == 16);
  CHECK(RunConfig::from(preset("gpt4like")).fusion.mode == FusionMode::kDedicatedHead);

  Config unknown;
  unknown.set("lm.learning_rate", "1");
  CHECK(kind_of([&] { resolve_config(unknown); }) == ErrorKind::kInvalidArgument);

  // Defaults without a preset.
  auto plain = RunConfig::from(resolve_config(Config{}));
  CHECK(plain.lm_train.lr == doctest::Approx(3e-4));
  CHECK(plain.fuse.train.lr == doctest::Approx(1e-4));
  CHECK(plain.lm.mode == AttentionMode::kCausal);
  CHECK(plain.scorer.mode == AttentionMode::kBidirectional);
  plain.validate();

  Config many;
  many.set("lm.epochs", "1001");
  CHECK(kind_of([&] { RunConfig::from(resolve_config(many)).validate(); }) == ErrorKind::kInvalidArgument);
  Config batch;
  batch.set("fuse.batch_size", "0");
  CHECK(kind_of([&] { RunConfig::from(resolve_config(batch)).validate(); }) == ErrorKind::kInvalidArgument);
  Config opt;
  opt.set("train.optimizer", "sgd");
  CHECK(kind_of([&] { RunConfig::from(resolve_config(opt)); }) == ErrorKind::kInvalidArgument);
  Config modes;
  modes.set("experiment.modes", "gated-injection, dedicated-head");
  CHECK(RunConfig::from(resolve_config(modes)).modes ==
        std::vector<FusionMode>{FusionMode::kGatedInjection, FusionMode::kDedicatedHead});
}

TEST_CASE("task data round trip and example targets") {
  auto run = tiny_run();
  auto task = prepare_task(generate_kg(run.synth), run.synth.holdout_fraction, run.seed);
  CHECK(task.corpus.size() == 10);
  CHECK(task.holdout.size() == 2);
  CHECK(task.qa_holdout.size() == 2);
  CHECK(task.gen_holdout.size() == 2);
  for (const auto& q : task.qa_holdout) CHECK(std::binary_search(task.holdout.begin(), task.holdout.end(), q.triple));

  TempDir dir("task");
  task.save(dir.path / "t");
  auto back = TaskData::load(dir.path / "t");
  CHECK(back.graph == task.graph);
  CHECK(back.corpus == task.corpus);
  CHECK(back.qa_train == task.qa_train);
  CHECK(back.qa_holdout == task.qa_holdout);
  CHECK(back.gen_holdout == task.gen_holdout);
  CHECK(back.vocab == task.vocab);
  CHECK(back.holdout == task.holdout);
  CHECK(back.train_facts == task.train_facts);

  const auto& q = task.qa_train.front();
  auto e = make_qa_example(task.vocab, task.lexicon, q);
  const auto qlen = encode(task.vocab, q.question).ids.size();
  const auto alen = encode(task.vocab, q.answer).ids.size();
  REQUIRE(e.ids.size() == qlen + alen + 1);
  CHECK(e.ids.back() == kEos);
  std::size_t with_loss = 0;
  for (std::size_t i = 0; i < e.targets.size(); ++i) {
    if (e.targets[i] == kNoTarget) continue;
    ++with_loss;
    CHECK(i + 1 >= qlen);
    CHECK(e.targets[i] == e.ids[i + 1]);
  }
  CHECK(with_loss == alen + 1);
  REQUIRE_FALSE(e.alignments.empty());
  CHECK(e.alignments.front().end <= qlen);

  auto t = make_text_example(task.vocab, "a b");
  CHECK(t.targets.back() == kNoTarget);
}

TEST_CASE("counterfactual fusion data") {
  auto run = tiny_run();
  auto task = prepare_task(generate_kg(run.synth), run.synth.holdout_fraction, run.seed);
  FuseOptions fo;
  fo.counterfactual_graphs = 3;
  fo.real_qa = true;
  std::vector<KnowledgeGraph> graphs;
  auto data = fusion_training_set(task, fo, 9, graphs);
  REQUIRE(graphs.size() == 3);
  CHECK(data.size() == 3 * task.train_facts.size() + task.qa_train.size());
  for (const auto& g : graphs) {
    CHECK(g.entity_count() == task.graph.entity_count());
    CHECK(g.triple_count() == task.train_facts.size());
    for (const auto& t : g.triples()) CHECK(t.object != t.subject);
  }
  std::size_t pointing = 0;
  for (const auto& e : data) pointing += e.graph != nullptr;
  CHECK(pointing == 3 * task.train_facts.size());

  std::vector<KnowledgeGraph> again;
  auto data2 = fusion_training_set(task, fo, 9, again);
  for (std::size_t i = 0; i < graphs.size(); ++i) CHECK(graphs[i] == again[i]);
  CHECK(data2.size() == data.size());
}

TEST_CASE("checkpoint round trip") {
  TempDir dir("ckpt");
  Rng rng(5);
  ModelConfig c;
  c.vocab_size = 20;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq = 12;
  TransformerModel lm(c, rng);
  save_model(dir.path / "lm.ckpt", lm, 12, 99);
  auto ckpt = read_checkpoint(dir.path / "lm.ckpt");
  CHECK(ckpt.step == 12);
  CHECK(ckpt.seed == 99);
  auto back = load_lm(ckpt);
  CHECK(back.config() == lm.config());
  const std::vector<std::vector<TokenId>> batch{{5, 6, 7, 8, 9}, {10, 11, 12}};
  CHECK(max_abs_diff(lm.forward(batch).logits, back.forward(batch).logits) < 1e-5);

  ModelConfig sc = c;
  sc.mode = AttentionMode::kBidirectional;
  sc.segment_vocab = kScorerSegments;
  auto scorer = make_scorer(sc, rng);
  save_model(dir.path / "scorer.ckpt", scorer, 1, 1);
  auto sckpt = read_checkpoint(dir.path / "scorer.ckpt");
  auto sback = load_scorer(sckpt);
  SerializedTriple st{{kCls, 5, kSep, 6, kSep, 7, kSep}, {0, 0, 1, 1, 2, 2, 2}};
  CHECK(std::abs(score_logit(scorer, st) - score_logit(sback, st)) < 1e-5);

  // A scorer checkpoint never loads as a causal LM.
  CHECK(kind_of([&] { load_lm(sckpt); }) == ErrorKind::kFormat);
  TransformerModel target(c);
  try {
    load_params(sckpt, target.params());
    FAIL("expected manifest mismatch");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("manifest") != std::string::npos);
  }

  // Flipped header byte.
  auto bytes = slurp(dir.path / "lm.ckpt");
  for (std::size_t pos : {std::size_t{0}, std::size_t{3}, std::size_t{9}}) {
    auto broken = bytes;
    broken[pos] = static_cast<char>(broken[pos] ^ 0x20);
    std::ofstream(dir.path / "bad.ckpt", std::ios::binary) << broken;
    CHECK(kind_of([&] { read_checkpoint(dir.path / "bad.ckpt"); }) == ErrorKind::kFormat);
  }
  // A flipped payload byte fails the checksum.
  {
    auto broken = bytes;
    broken[bytes.size() / 2] = static_cast<char>(broken[bytes.size() / 2] ^ 0x01);
    std::ofstream(dir.path / "bad.ckpt", std::ios::binary) << broken;
    try {
      read_checkpoint(dir.path / "bad.ckpt");
      FAIL("expected rejection");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }
  }
  // Truncation.
  std::ofstream(dir.path / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 20);
  try {
    read_checkpoint(dir.path / "short.ckpt");
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kFormat);
  }
}

TEST_CASE("fused checkpoint round trip") {
  TempDir dir("fckpt");
  auto run = tiny_run();
  auto task = prepare_task(generate_kg(run.synth), run.synth.holdout_fraction, run.seed);
  auto scorer = run_scorer_stage(run, task);
  Rng rng(8);
  auto lm = make_lm(run, task.vocab, rng);
  for (auto mode : kAllFusionModes) {
    for (bool cotrain : {false, true}) {
      FusionConfig fc;
      fc.mode = mode;
      fc.cotrain_kg = cotrain;
      FusedModel fm(lm.clone(), fc, scorer.table, rng);
      fm.set_alpha(0.7);
      save_model(dir.path / "f.ckpt", fm, 0, 0);
      auto back = load_fused(read_checkpoint(dir.path / "f.ckpt"));
      CHECK(back.fusion_config() == fm.fusion_config());
      auto ls = link(encode(task.vocab, task.qa_holdout[0].question), task.lexicon);
      auto a = fm.forward({ls}, task.graph, scorer.table).lm.logits;
      auto b = back.forward({ls}, task.graph, scorer.table).lm.logits;
      CHECK(max_abs_diff(a, b) < 1e-5);
    }
  }
}

TEST_CASE("training loop") {
  auto run = tiny_run();
  auto task = prepare_task(generate_kg(run.synth), run.synth.holdout_fraction, run.seed);
  std::vector<LmExample> corpus;
  for (const auto& s : task.corpus) corpus.push_back(make_text_example(task.vocab, s));
  REQUIRE(corpus.size() == 10);

  SUBCASE("zero steps leave the initialization") {
    Rng rng(1);
    auto lm = make_lm(run, task.vocab, rng);
    auto init = lm.params().clone();
    TrainOptions o = run.lm_train;
    o.epochs = 0;
    CHECK(train_lm(lm, corpus, o).empty());
    for (const auto& [name, t] : init.items()) {
      const auto& now = lm.params().get(name);
      for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(now.at(i) == t.at(i));
    }
  }

  SUBCASE("loss drops on the tiny corpus") {
    Rng rng(1);
    auto lm = make_lm(run, task.vocab, rng);
    auto losses = train_lm(lm, corpus, run.lm_train);
    REQUIRE(losses.size() == run.lm_train.epochs * 3);
    CHECK(losses.back() <= 0.8 * losses.front());
  }

  SUBCASE("non-finite loss aborts") {
    Rng rng(1);
    auto lm = make_lm(run, task.vocab, rng);
    for (auto& v : lm.params().get("tok_emb").mutable_values()) v = std::nan("");
    TrainOptions o = run.lm_train;
    o.epochs = 1;
    CHECK(kind_of([&] { train_lm(lm, corpus, o); }) == ErrorKind::kDiverged);
  }

  SUBCASE("same seed, same checkpoint bytes") {
    TempDir dir("det");
    for (const char* name : {"a.ckpt", "b.ckpt"}) {
      auto stage = run_lm_stage(run, task);
      save_model(dir.path / name, stage.lm, stage.losses.size(), run.seed);
    }
    CHECK(slurp(dir.path / "a.ckpt") == slurp(dir.path / "b.ckpt"));
    auto other = run_lm_stage(tiny_run(4), task);
    save_model(dir.path / "c.ckpt", other.lm, other.losses.size(), 4);
    CHECK(slurp(dir.path / "a.ckpt") != slurp(dir.path / "c.ckpt"));
  }

  SUBCASE("frozen base keeps base parameters") {
    auto scorer = run_scorer_stage(run, task);
    Rng rng(2);
    auto lm = make_lm(run, task.vocab, rng);
    FusionConfig fc;
    fc.mode = FusionMode::kKgAttentionLayer;
    FusedModel fm(lm.clone(), fc, scorer.table, rng);
    std::vector<KnowledgeGraph> graphs;
    FuseOptions fo;
    fo.counterfactual_graphs = 1;
    auto data = fusion_training_set(task, fo, 1, graphs);
    TrainOptions o = run.fuse.train;
    o.epochs = 2;
    auto losses = train_fused(fm, data, task.graph, scorer.table, o, true);
    CHECK_FALSE(losses.empty());
    CHECK(fm.alpha() != 0.0);
    for (const auto& [name, t] : lm.params().items()) {
      const auto& now = fm.params().get(name);
      for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(now.at(i) == t.at(i));
    }
  }
}

TEST_CASE("staged output leaves nothing behind on failure") {
  TempDir dir("stage");
  const auto out = dir.path / "out";
  {
    StagedOutput staged(out);
    write_file_atomic(staged.stage("a.txt"), [](std::ostream& o) { o << "x"; });
  }
  CHECK_FALSE(fs::exists(out));
  {
    StagedOutput staged(out);
    write_file_atomic(staged.stage("a.txt"), [](std::ostream& o) { o << "x"; });
    staged.commit();
  }
  CHECK(slurp(out / "a.txt") == "x");
  CHECK(std::distance(fs::directory_iterator(out), fs::directory_iterator{}) == 1);
}
