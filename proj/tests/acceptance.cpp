// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance [--expect-fail N]... [--skip N]...
// Exit status is nonzero when a criterion fails that was not listed with
// --expect-fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "kgfuse/cli.hpp"
#include "kgfuse/config.hpp"
#include "kgfuse/error.hpp"
#include "kgfuse/kg_fusion.hpp"
#include "kgfuse/kgbert.hpp"
#include "kgfuse/metrics.hpp"
#include "kgfuse/ops.hpp"
#include "kgfuse/pipeline.hpp"
#include "support/op_gradcheck.hpp"

using namespace kgfuse;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- criterion 1

ModelConfig lm16() {
  ModelConfig c;
  c.vocab_size = 24;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq = 12;
  return c;
}

KnowledgeGraph random_graph(Rng& rng, std::size_t entities, std::size_t relations, std::size_t triples) {
  KnowledgeGraph::Builder b;
  for (std::size_t e = 0; e < entities; ++e) b.entity("e" + std::to_string(e));
  for (std::size_t r = 0; r < relations; ++r) b.relation("r" + std::to_string(r));
  for (std::size_t k = 0; k < triples; ++k) {
    b.add(Triple{static_cast<EntityId>(uniform_index(rng, entities)), static_cast<RelationId>(uniform_index(rng, relations)),
                 static_cast<EntityId>(uniform_index(rng, entities))});
  }
  return std::move(b).build();
}

KgEmbeddingTable random_table(const KnowledgeGraph& g, std::size_t dim, Rng& rng) {
  std::vector<std::string> ek, rk;
  for (std::size_t i = 0; i < g.entity_count(); ++i) ek.push_back(g.entities().key(static_cast<EntityId>(i)));
  for (std::size_t i = 0; i < g.relation_count(); ++i) rk.push_back(g.relations().key(static_cast<RelationId>(i)));
  KgEmbeddingTable t(dim, ek, rk);
  for (std::size_t e = 0; e < ek.size(); ++e) {
    for (auto& v : t.mutable_entity(static_cast<EntityId>(e))) v = normal(rng, 1.0);
  }
  for (std::size_t r = 0; r < rk.size(); ++r) {
    for (auto& v : t.mutable_relation(static_cast<RelationId>(r))) v = normal(rng, 1.0);
  }
  return t;
}

std::vector<TokenId> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(kReservedTokens + uniform_index(rng, vocab - kReservedTokens));
  return ids;
}

std::vector<Alignment> random_alignments(Rng& rng, std::size_t len, std::size_t entities) {
  std::vector<Alignment> out;
  std::size_t pos = 0;
  while (pos < len) {
    if (uniform_index(rng, 3) == 0) {
      const std::size_t span = 1 + uniform_index(rng, std::min<std::size_t>(2, len - pos));
      out.push_back({pos, pos + span, static_cast<EntityId>(uniform_index(rng, entities))});
      pos += span;
    } else {
      ++pos;
    }
  }
  return out;
}

// Sampled central differences against one analytic backward pass.
double sampled_param_check(const ParamMap& params, const std::function<Tensor()>& loss, Rng& rng,
                           std::size_t per_tensor, std::size_t& checked) {
  for (const auto& [name, t] : params) {
    Tensor x = t;
    x.zero_grad();
  }
  Tape::current().clear();
  Tensor l = loss();
  backward(l);
  std::map<std::string, std::vector<double>> analytic;
  for (const auto& [name, t] : params) {
    const auto g = t.grad();
    analytic[name] = g.empty() ? std::vector<double>(t.numel(), 0.0) : std::vector<double>(g.begin(), g.end());
  }
  Tape::current().clear();
  const double eps = 1e-5;
  double worst = 0.0;
  NoGradGuard no_grad;
  for (const auto& [name, t] : params) {
    Tensor x = t;
    auto values = x.mutable_values();
    for (std::size_t k = 0; k < std::min(per_tensor, x.numel()); ++k) {
      const std::size_t i = uniform_index(rng, x.numel());
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss().item();
      values[i] = saved - eps;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[name][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, rel);
      ++checked;
    }
  }
  return worst;
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  double op_worst = 0.0;
  std::string op_worst_name;
  std::size_t op_checks = 0;
  for (const auto& c : testing::op_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed * 104729 + 17);
      auto [x, f] = c.make(rng);
      auto rep = grad_check(f, x, 1e-5, 1e-4);
      Tape::current().clear();
      op_checks += rep.checked;
      if (rep.max_rel_error > op_worst) {
        op_worst = rep.max_rel_error;
        op_worst_name = c.name;
      }
    }
  }
  double fused_worst = 0.0;
  std::string fused_worst_mode;
  std::size_t fused_checks = 0;
  for (auto mode : kAllFusionModes) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed * 7919 + 3);
      auto g = random_graph(rng, 6, 2, 8);
      auto table = random_table(g, 8, rng);
      FusionConfig fc;
      fc.mode = mode;
      fc.cotrain_kg = seed % 2 == 1;
      FusedModel fm(TransformerModel(lm16(), rng), fc, table, rng);
      fm.set_alpha(0.3 + uniform_real(rng));
      std::vector<FusionInput> batch;
      std::vector<KgMemory> mems;
      std::vector<std::int32_t> targets;
      const std::size_t len = 4 + uniform_index(rng, 4);
      for (int b = 0; b < 2; ++b) {
        auto ids = random_ids(rng, len, 24);
        auto al = random_alignments(rng, len, g.entity_count());
        if (al.empty()) al.push_back({0, 1, 0});
        mems.push_back(build_memory(al, g, table, fc));
        batch.push_back({ids, al});
        for (std::size_t i = 0; i < len; ++i) targets.push_back(i + 1 < len ? ids[i + 1] : -1);
      }
      auto loss = [&] { return ops::cross_entropy(fm.forward(batch, mems, table).lm.logits, targets, -1); };
      const double worst = sampled_param_check(fm.params().items(), loss, rng, 6, fused_checks);
      if (worst > fused_worst) {
        fused_worst = worst;
        fused_worst_mode = std::string(to_string(mode));
      }
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = op_worst < 1e-4 && fused_worst < 1e-4 && secs < 120.0;
  o.detail = "ops max rel err " + fmt("%.2e", op_worst) + " (" + op_worst_name + ", " + std::to_string(op_checks) +
             " coords); fused 4 modes x 20 seeds max rel err " + fmt("%.2e", fused_worst) + " (" + fused_worst_mode +
             ", " + std::to_string(fused_checks) + " coords); tol 1e-4; " + fmt("%.1f", secs) + " s (limit 120 s)";
  return o;
}

// ---------------------------------------------------------------- criterion 2

Outcome criterion_baseline_equivalence() {
  const auto t0 = Clock::now();
  std::size_t identical = 0, total = 0;
  for (auto mode : kAllFusionModes) {
    Rng rng(0xba5e + static_cast<std::uint64_t>(mode));
    auto g = random_graph(rng, 8, 3, 14);
    auto table = random_table(g, 8, rng);
    FusionConfig fc;
    fc.mode = mode;
    FusedModel fm(TransformerModel(lm16(), rng), fc, table, rng);
    // Make the KG path non-trivial everywhere except alpha.
    for (const auto& [name, t] : fm.params().items()) {
      if (name.rfind("fusion.", 0) != 0 || name == "fusion.alpha") continue;
      Tensor x = t;
      for (auto& v : x.mutable_values()) v = normal(rng, 0.5);
    }
    fm.set_alpha(0.0);
    for (int i = 0; i < 100; ++i) {
      const std::size_t len = 1 + uniform_index(rng, 10);
      auto ids = random_ids(rng, len, 24);
      auto al = random_alignments(rng, len, g.entity_count());
      auto mem = build_memory(al, g, table, fc);
      auto fused = fm.forward({FusionInput{ids, al}}, {mem}, table).lm.logits;
      auto base = fm.base().forward({ids}).logits;
      bool same = fused.shape() == base.shape();
      for (std::size_t k = 0; same && k < base.numel(); ++k) same = fused.at(k) == base.at(k);
      identical += same;
      ++total;
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = identical == total && total == 400 && secs < 60.0;
  o.detail = std::to_string(identical) + "/" + std::to_string(total) +
             " inputs bit-identical (100 per mode, alpha = 0); " + fmt("%.1f", secs) + " s (limit 60 s)";
  return o;
}

// ---------------------------------------------------------------- criterion 3

// L2-regularized logistic regression over slot-tagged label tokens and their
// pairwise conjunctions; objective C * sum(logloss) + |w|^2 / 2.
struct LogisticOracle {
  std::map<std::string, std::size_t> index;
  std::vector<double> w;
  double bias = 0.0;

  static std::vector<std::string> features(const KnowledgeGraph& g, const Triple& t) {
    std::vector<std::string> slots;
    for (const auto& tok : normalize_tokens(g.entities().label(t.subject))) slots.push_back("s:" + tok);
    slots.push_back("r:" + g.relations().key(t.relation));
    for (const auto& tok : normalize_tokens(g.entities().label(t.object))) slots.push_back("o:" + tok);
    std::vector<std::string> out = slots;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      for (std::size_t j = i + 1; j < slots.size(); ++j) out.push_back(slots[i] + "&" + slots[j]);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  std::vector<std::size_t> encode(const std::vector<std::string>& f, bool grow) {
    std::vector<std::size_t> ids;
    for (const auto& s : f) {
      auto it = index.find(s);
      if (it == index.end()) {
        if (!grow) continue;
        it = index.emplace(s, index.size()).first;
      }
      ids.push_back(it->second);
    }
    return ids;
  }

  double logit(const std::vector<std::size_t>& x) const {
    double z = bias;
    for (auto i : x) z += w[i];
    return z;
  }

  void fit(const std::vector<std::vector<std::size_t>>& xs, const std::vector<double>& ys, double c) {
    w.assign(index.size(), 0.0);
    std::vector<double> m(w.size() + 1, 0.0), v(w.size() + 1, 0.0), grad(w.size() + 1, 0.0);
    const double lr = 0.05, b1 = 0.9, b2 = 0.999;
    for (int step = 1; step <= 1500; ++step) {
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t n = 0; n < xs.size(); ++n) {
        const double p = 1.0 / (1.0 + std::exp(-logit(xs[n])));
        const double d = c * (p - ys[n]);
        for (auto i : xs[n]) grad[i] += d;
        grad.back() += d;
      }
      for (std::size_t i = 0; i < w.size(); ++i) grad[i] += w[i];
      for (std::size_t i = 0; i < grad.size(); ++i) {
        m[i] = b1 * m[i] + (1 - b1) * grad[i];
        v[i] = b2 * v[i] + (1 - b2) * grad[i] * grad[i];
        const double upd = lr * (m[i] / (1 - std::pow(b1, step))) / (std::sqrt(v[i] / (1 - std::pow(b2, step))) + 1e-8);
        if (i < w.size()) {
          w[i] -= upd;
        } else {
          bias -= upd;
        }
      }
    }
  }
};

Outcome criterion_scorer() {
  const auto t0 = Clock::now();
  SynthSpec spec;
  spec.entity_count = 50;
  spec.relation_count = 5;
  spec.functional = true;
  spec.triples_per_entity = 5;
  spec.region_count = 5;
  spec.seed = 1;
  const auto g = generate_kg(spec);
  std::vector<std::string> labels;
  for (EntityId e = 0; e < g.entity_count(); ++e) labels.push_back(g.entities().label(e));
  for (RelationId r = 0; r < g.relation_count(); ++r) labels.push_back(g.relations().label(r));
  const auto vocab = Vocab::build(labels, 1);
  const auto held = choose_holdout(g, 0.2, spec.seed);
  std::vector<Triple> train;
  for (const auto& t : g.triples()) {
    if (!std::binary_search(held.begin(), held.end(), t)) train.push_back(t);
  }

  // Fresh corruptions of the held-out positives, alternating sides.
  Rng eval_rng(0xe7a1);
  std::vector<Triple> negatives;
  for (const auto& t : held) {
    for (int k = 0; k < 10; ++k) {
      negatives.push_back(corrupt_triple(g, t, k % 2 ? CorruptSide::kTail : CorruptSide::kHead, eval_rng));
    }
  }

  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.d_model = 32;
  mc.n_layers = 2;
  mc.n_heads = 4;
  mc.d_ff = 64;
  mc.max_seq = 16;
  mc.mode = AttentionMode::kBidirectional;
  mc.segment_vocab = kScorerSegments;
  Rng rng(spec.seed);
  auto scorer = make_scorer(mc, rng);
  ScorerTrainOptions so;
  so.epochs = 20;
  so.batch_size = 16;
  so.lr = 1e-3;
  so.seed = spec.seed;
  train_scorer(g, vocab, scorer, so, train);
  auto balanced = [&](const std::function<double(const Triple&)>& logit) {
    double pos = 0, neg = 0;
    for (const auto& t : held) pos += logit(t) > 0.0;
    for (const auto& t : negatives) neg += logit(t) <= 0.0;
    return 0.5 * (pos / static_cast<double>(held.size()) + neg / static_cast<double>(negatives.size()));
  };
  const double acc =
      balanced([&](const Triple& t) { return score_logit(scorer, serialize_triple(g, t, vocab)); });
  const double scorer_secs = seconds_since(t0);

  LogisticOracle oracle;
  Rng oracle_rng(0x0c1e);
  std::vector<std::vector<std::size_t>> xs;
  std::vector<double> ys;
  for (int epoch = 0; epoch < 10; ++epoch) {
    for (const auto& t : train) {
      xs.push_back(oracle.encode(LogisticOracle::features(g, t), true));
      ys.push_back(1.0);
      const auto side = uniform_index(oracle_rng, 2) ? CorruptSide::kTail : CorruptSide::kHead;
      xs.push_back(oracle.encode(LogisticOracle::features(g, corrupt_triple(g, t, side, oracle_rng)), true));
      ys.push_back(0.0);
    }
  }
  oracle.fit(xs, ys, 0.1);
  const double oracle_acc =
      balanced([&](const Triple& t) { return oracle.logit(oracle.encode(LogisticOracle::features(g, t), false)); });

  Outcome o;
  o.pass = acc >= 0.85 && scorer_secs < 300.0;
  o.detail = "held-out balanced accuracy " + fmt("%.3f", acc) + " (threshold 0.85; " + std::to_string(held.size()) +
             " positives, " + std::to_string(negatives.size()) + " corruptions); logistic oracle " +
             fmt("%.3f", oracle_acc) + "; " + fmt("%.1f", scorer_secs) + " s (limit 300 s)";
  return o;
}

// ---------------------------------------------------------------- criteria 4, 6, 7

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig desk_run() {
  Config c;
  c.set("preset", "desk");
  c.set("seed", "1");
  return RunConfig::from(resolve_config(c));
}

Outcome criterion_direction(const ExperimentResult& r, double secs) {
  Outcome o;
  bool required_ok = true;
  std::ostringstream detail;
  for (const auto& m : r.modes) {
    const bool gain = m.pair.model.factual_accuracy > m.pair.baseline.factual_accuracy && m.pair.p_value < 0.05;
    const bool required = m.mode == FusionMode::kGatedInjection || m.mode == FusionMode::kKgAttentionLayer;
    if (required) required_ok = required_ok && gain;
    detail << to_string(m.mode) << " " << format_percent(m.pair.model.factual_accuracy) << " vs "
           << format_percent(m.pair.baseline.factual_accuracy) << " p=" << fmt("%.4f", m.pair.p_value)
           << (gain ? " ok" : " no") << (required ? "" : " (not required)") << "; ";
  }
  const bool has_required =
      std::count_if(r.modes.begin(), r.modes.end(), [](const ModeResult& m) {
        return m.mode == FusionMode::kGatedInjection || m.mode == FusionMode::kKgAttentionLayer;
      }) == 2;
  o.pass = required_ok && has_required && secs < 900.0;
  detail << "p < 0.05 required; " << fmt("%.1f", secs) << " s (limit 900 s)";
  o.detail = detail.str();
  return o;
}

bool matches_all(const std::vector<std::string>& cells, const std::regex& re) {
  return std::all_of(cells.begin(), cells.end(), [&](const std::string& c) { return std::regex_match(c, re); });
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// Checks both tables of a rendered report; returns an empty string when fine.
std::string check_report(const std::string& text, const std::string& mode, const std::string& baseline) {
  const std::regex pct(R"(\d{1,3}\.\d%)"), gain(R"([+-]\d+\.\d%)"), num(R"(\d+\.\d)");
  std::istringstream in(text);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  auto find = [&](const std::string& prefix) {
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (lines[i].rfind(prefix, 0) == 0) return i;
    }
    return lines.size();
  };
  const auto qa = find("QA performance");
  const auto gen = find("Text generation performance");
  if (qa == lines.size() || gen == lines.size()) return "missing table header";
  for (auto h : {qa, gen}) {
    if (lines[h].find("mode: " + mode) == std::string::npos) return "header lacks mode name";
    if (lines[h].find("baseline " + baseline) == std::string::npos) return "header lacks baseline name";
  }
  if (split_ws(lines[qa + 2]) != std::vector<std::string>{"Model", "Prec.", "Rec.", "F1", "Gain"}) {
    return "QA columns differ";
  }
  if (split_ws(lines[gen + 2]) != std::vector<std::string>{"Model", "BLEU", "ROUGE", "PPL", "Gain"}) {
    return "generation columns differ";
  }
  std::size_t rows = 0;
  for (std::size_t i = qa + 4; i < lines.size() && lines[i][0] != '-'; ++i, ++rows) {
    auto c = split_ws(lines[i]);
    if (c.size() < 5) return "short QA row";
    std::vector<std::string> rates(c.end() - 4, c.end() - 1);
    if (!matches_all(rates, pct) || !std::regex_match(c.back(), gain)) return "QA cell format: " + lines[i];
  }
  for (std::size_t i = gen + 4; i < lines.size() && lines[i][0] != '-'; ++i, ++rows) {
    auto c = split_ws(lines[i]);
    if (c.size() < 5) return "short generation row";
    std::vector<std::string> values(c.end() - 4, c.end() - 1);
    if (!matches_all(values, num) || !std::regex_match(c.back(), gain)) return "generation cell format: " + lines[i];
  }
  if (rows < 4) return "missing rows";
  if (find("Factual accuracy:") == lines.size()) return "missing factual accuracy line";
  return {};
}

Outcome criterion_report(const fs::path& run_dir) {
  std::vector<std::string> problems;
  // Constructed pair: F1 0.947 renders as 94.7%.
  PairReport p;
  p.baseline.model = "base";
  p.model.model = "kg-attention-layer";
  p.baseline.qa_count = p.model.qa_count = 4;
  p.baseline.gen_count = p.model.gen_count = 4;
  p.baseline.f1 = 0.885;
  p.model.f1 = 0.947;
  p.model.precision = 0.951;
  p.model.recall = 0.943;
  p.qa_gain = 6.2;
  p.baseline.bleu = 0.312;
  p.model.bleu = 0.381;
  p.model.perplexity = 18.9;
  p.baseline.perplexity = 21.4;
  p.gen_gain = 6.9;
  std::ostringstream constructed;
  write_report_table(constructed, {p}, "kg-attention-layer");
  if (auto e = check_report(constructed.str(), "kg-attention-layer", "base"); !e.empty()) problems.push_back(e);
  if (constructed.str().find("94.7%") == std::string::npos) problems.push_back("0.947 not rendered as 94.7%");
  if (constructed.str().find("+6.2%") == std::string::npos) problems.push_back("gain not rendered as +6.2%");
  if (constructed.str().find("38.1") == std::string::npos) problems.push_back("BLEU not rendered as 38.1");
  if (constructed.str().find("18.9") == std::string::npos) problems.push_back("PPL not rendered as 18.9");

  // The command itself, on the experiment's checkpoints.
  const auto cfg = run_dir / "desk.cfg";
  std::ofstream(cfg) << "preset=desk\nseed=1\n";
  std::ostringstream out, err;
  const int code = cli::run({"report", "compare", "--config", cfg.string(), "--data", run_dir.string(), "--baseline",
                             (run_dir / "lm.ckpt").string(), "--model",
                             (run_dir / "fused-kg-attention-layer.ckpt").string(), "--embeddings",
                             (run_dir / "embeddings.tsv").string()},
                            out, err);
  if (code != 0) {
    problems.push_back("report compare exited " + std::to_string(code) + ": " + err.str());
  } else if (auto e = check_report(out.str(), "kg-attention-layer", "base"); !e.empty()) {
    problems.push_back("cli: " + e);
  }
  Outcome o;
  o.pass = problems.empty();
  o.detail = o.pass ? "Prec./Rec./F1/Gain and BLEU/ROUGE/PPL/Gain tables, one-decimal percentages, mode and baseline "
                      "named in headers (constructed report and 'report compare')"
                    : problems.front();
  return o;
}

// ---------------------------------------------------------------- criterion 5

Outcome criterion_metrics() {
  const auto t0 = Clock::now();
  std::vector<std::string> bad;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  auto p = token_prf("paris", "paris");
  expect(p.precision == 1.0 && p.recall == 1.0 && p.f1 == 1.0, "prf exact match");
  p = token_prf("in paris", "paris");
  expect(p.precision == 0.5 && p.recall == 1.0 && p.f1 == 2.0 / 3.0, "prf 'in paris'");
  p = token_prf("rome", "paris");
  expect(p.precision == 0.0 && p.recall == 0.0 && p.f1 == 0.0, "prf disjoint");
  p = token_prf("", "paris");
  expect(p.precision == 0.0 && p.recall == 0.0 && p.f1 == 0.0, "prf empty prediction");
  p = token_prf("", "");
  expect(p.precision == 1.0 && p.recall == 1.0 && p.f1 == 1.0, "prf both empty");

  expect(bleu("the cat sat on the mat", {"the cat sat on the mat"}) == 1.0, "bleu identity");
  auto s = bleu_stats("the the the", {"the cat"});
  expect(s.matched[0] == 1 && s.total[0] == 3, "bleu clipped unigram 1/3");
  expect(bleu("dog", {"the cat"}) == 0.0, "bleu disjoint");
  bool rejected = false;
  try {
    bleu("a", {});
  } catch (const Error&) {
    rejected = true;
  }
  expect(rejected, "bleu empty reference list");

  expect(rouge_l("a b c", "a b c") == 1.0, "rouge identity");
  expect(lcs_length({"a", "b", "c", "d"}, {"a", "c", "d"}) == 3, "lcs 3");
  expect(rouge_l("a b c d", "a c d") == 2.0 * 0.75 * 1.0 / 1.75, "rouge 6/7");
  expect(std::abs(rouge_l("a b c d", "a c d") - 6.0 / 7.0) <= 1e-15, "rouge 6/7 value");
  expect(rouge_l("a b", "c d") == 0.0, "rouge disjoint");

  const std::vector<std::vector<TokenId>> batch{{5, 6, 7, 8}, {9, 5, kPad, kPad}};
  const auto uniform = perplexity(next_token_nll(Tensor::zeros({2, 4, 10}), batch));
  expect(std::abs(uniform - 10.0) <= 1e-9, "ppl uniform 10");
  std::vector<double> sure(2 * 4 * 10, -1e3);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 1; t < 4; ++t) {
      if (batch[b][t] != kPad) sure[(b * 4 + t - 1) * 10 + static_cast<std::size_t>(batch[b][t])] = 1e3;
    }
  }
  expect(perplexity(next_token_nll(Tensor::from({2, 4, 10}, sure), batch)) == 1.0, "ppl perfect 1");

  // exp(cross-entropy) measured through the training loss on random logits.
  Rng rng(55);
  auto logits = testing::random_tensor(rng, {2, 4, 10});
  std::vector<std::int32_t> targets;
  for (const auto& row : batch) {
    for (std::size_t t = 0; t < row.size(); ++t) {
      targets.push_back(t + 1 < row.size() && row[t + 1] != kPad ? row[t + 1] : -1);
    }
  }
  const double ce = ops::cross_entropy(logits, targets, -1).item();
  expect(std::abs(perplexity(next_token_nll(logits, batch)) - std::exp(ce)) <= 1e-9, "ppl = exp(ce)");

  // 3/4 against 2/4 is +25 points.
  auto outcome = [](bool f) {
    QaOutcome q;
    q.question = "q";
    q.factual = f;
    return q;
  };
  EvalRun base{"base", {}, {}}, fused{"fused", {}, {}};
  for (int i = 0; i < 4; ++i) {
    base.qa.push_back(outcome(i < 2));
    fused.qa.push_back(outcome(i < 3));
    base.qa.back().question = fused.qa.back().question = "q" + std::to_string(i);
  }
  expect(evaluate_pair(base, fused, 1, 1000).factual_gain == 25.0, "gain +25.0");
  expect(format_percent(0.947) == "94.7%", "94.7%");

  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = bad.empty() && secs < 1.0;
  o.detail = bad.empty() ? "all hand-computed examples reproduced (exact rationals, 1e-9 for perplexity); " +
                               fmt("%.3f", secs) + " s (limit 1 s)"
                         : "mismatch: " + bad.front();
  return o;
}

// ---------------------------------------------------------------- criterion 8

std::string random_word(Rng& rng, std::size_t letters) {
  static const std::string alphabet = "abcdefgh";
  std::string w;
  for (std::size_t i = 0; i < letters; ++i) w += alphabet[uniform_index(rng, alphabet.size())];
  return w;
}

Outcome criterion_properties() {
  const auto t0 = Clock::now();
  std::size_t link_fail = 0, corrupt_fail = 0, ingest_fail = 0, saturated = 0;
  Rng rng(0x9e3779b9);

  const std::vector<std::string> alphabet{"p", "q", "r", "s", "t"};
  const auto vocab = Vocab::from_tokens(alphabet);
  for (int trial = 0; trial < 1000; ++trial) {
    EntityLexicon lex;
    const std::size_t forms = 1 + uniform_index(rng, 6);
    for (std::size_t f = 0; f < forms; ++f) {
      std::string form;
      const std::size_t len = 1 + uniform_index(rng, 3);
      for (std::size_t k = 0; k < len; ++k) form += (k ? " " : "") + alphabet[uniform_index(rng, alphabet.size())];
      lex.add(form, static_cast<EntityId>(uniform_index(rng, 8)));
    }
    std::string text;
    const std::size_t len = uniform_index(rng, 15);
    for (std::size_t k = 0; k < len; ++k) text += (k ? " " : "") + alphabet[uniform_index(rng, alphabet.size())];
    const auto ls = link(encode(vocab, text), lex);
    bool ok = true;
    std::size_t last_end = 0;
    for (const auto& a : ls.alignments) {
      ok = ok && a.start >= last_end && a.end > a.start && a.end <= ls.seq.ids.size();
      if (!ok) break;
      last_end = a.end;
      std::vector<std::string> span(ls.seq.tokens.begin() + static_cast<std::ptrdiff_t>(a.start),
                                    ls.seq.tokens.begin() + static_cast<std::ptrdiff_t>(a.end));
      const auto* ids = lex.lookup(span);
      ok = ids != nullptr && ids->count(a.entity) == 1;
    }
    link_fail += !ok;
  }

  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 5);
    const std::size_t rels = 1 + uniform_index(rng, 2);
    auto g = random_graph(rng, n, rels, 1 + uniform_index(rng, n * n * rels));
    if (g.triple_count() == 0) continue;
    const auto t = g.triples()[uniform_index(rng, g.triple_count())];
    const auto side = uniform_index(rng, 2) ? CorruptSide::kTail : CorruptSide::kHead;
    try {
      const auto c = corrupt_triple(g, t, side, rng);
      const bool same_rest = side == CorruptSide::kHead ? (c.relation == t.relation && c.object == t.object)
                                                        : (c.relation == t.relation && c.subject == t.subject);
      corrupt_fail += g.contains(c) || !same_rest;
    } catch (const Error& e) {
      // Saturation is only allowed when every replacement is a known fact.
      bool any_free = false;
      for (EntityId e2 = 0; e2 < g.entity_count(); ++e2) {
        Triple c = t;
        (side == CorruptSide::kHead ? c.subject : c.object) = e2;
        any_free = any_free || !g.contains(c);
      }
      corrupt_fail += e.kind() != ErrorKind::kSaturated || any_free;
      ++saturated;
    }
  }

  for (int trial = 0; trial < 1000; ++trial) {
    std::ostringstream src;
    const std::size_t n = 1 + uniform_index(rng, 12);
    for (std::size_t k = 0; k < n; ++k) {
      src << random_word(rng, 1 + uniform_index(rng, 2)) << '\t' << "rel_" << random_word(rng, 1) << '\t'
          << random_word(rng, 1 + uniform_index(rng, 2));
      if (uniform_index(rng, 3) == 0) src << '\t' << random_word(rng, 3) << ' ' << random_word(rng, 2);
      src << '\n';
      if (uniform_index(rng, 8) == 0) src << "# note\n\n";
    }
    std::istringstream in1(src.str());
    const auto g1 = ingest_tsv(in1, true);
    std::ostringstream w1;
    write_tsv(g1, w1);
    std::istringstream in2(w1.str());
    const auto g2 = ingest_tsv(in2, true);
    std::ostringstream w2;
    write_tsv(g2, w2);
    std::istringstream in3(src.str());
    ingest_fail += !(g1 == g2) || w1.str() != w2.str() || !(ingest_tsv(in3, true) == g1);
  }

  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = link_fail == 0 && corrupt_fail == 0 && ingest_fail == 0 && secs < 60.0;
  o.detail = "alignment non-overlap " + std::to_string(link_fail) + "/1000 failures; corruption never in graph " +
             std::to_string(corrupt_fail) + "/1000 (" + std::to_string(saturated) +
             " saturated, verified exhaustively); ingest idempotence " + std::to_string(ingest_fail) + "/1000; " +
             fmt("%.2f", secs) + " s (limit 60 s)";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> expect_fail, skip;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if ((a == "--expect-fail" || a == "--skip") && i + 1 < argc) {
      (a == "--skip" ? skip : expect_fail).insert(std::stoi(argv[++i]));
    } else {
      std::cerr << "usage: acceptance [--expect-fail N]... [--skip N]...\n";
      return 2;
    }
  }

  int unexpected = 0;
  auto report = [&](int id, const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " " << name << ": " << o.detail;
    if (!o.pass && expect_fail.count(id)) std::cout << " [known failure]";
    std::cout << std::endl;
    if (!o.pass && !expect_fail.count(id)) ++unexpected;
  };
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    if (skip.count(id)) {
      std::cout << "SKIP  criterion " << id << " " << name << std::endl;
      return;
    }
    try {
      report(id, name, fn());
    } catch (const std::exception& e) {
      report(id, name, Outcome{false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, "gradient oracle", criterion_gradients);
  guarded(2, "baseline equivalence", criterion_baseline_equivalence);
  guarded(3, "scorer separability", criterion_scorer);

  const bool need_runs = !(skip.count(4) && skip.count(6) && skip.count(7));
  const auto root = fs::temp_directory_path() / ("kgfuse_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  std::optional<ExperimentResult> first;
  double first_secs = 0.0;
  std::string run_error;
  if (need_runs) {
    try {
      const auto t0 = Clock::now();
      first = run_experiment(desk_run(), root / "run1", &std::cerr);
      first_secs = seconds_since(t0);
    } catch (const std::exception& e) {
      run_error = e.what();
    }
  }
  auto need_first = [&] {
    if (!first) throw std::runtime_error("pipeline run failed: " + run_error);
  };
  guarded(4, "direction of gain", [&] {
    need_first();
    return criterion_direction(*first, first_secs);
  });
  guarded(5, "metric oracles", criterion_metrics);
  guarded(6, "determinism", [&] {
    need_first();
    const auto t0 = Clock::now();
    run_experiment(desk_run(), root / "run2", &std::cerr);
    const double secs = first_secs + seconds_since(t0);
    const auto a = slurp(root / "run1" / "report.tsv");
    const auto b = slurp(root / "run2" / "report.tsv");
    Outcome o;
    o.pass = !a.empty() && a == b && secs < 1200.0;
    o.detail = std::string(a == b ? "report TSVs byte-identical" : "report TSVs differ") + " (" +
               std::to_string(a.size()) + " bytes) across two seeded runs; " + fmt("%.1f", secs) +
               " s (limit 1200 s)";
    return o;
  });
  guarded(7, "report fidelity", [&] {
    need_first();
    return criterion_report(root / "run1");
  });
  guarded(8, "linker/store properties", criterion_properties);
  fs::remove_all(root);
  return unexpected == 0 ? 0 : 1;
}
