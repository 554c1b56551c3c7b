// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <map>
#include <ostream>

#include "kgfuse/error.hpp"

namespace kgfuse {

namespace {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& toks, std::size_t n) {
  NgramCounts out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[Tokens(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

double harmonic(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }


std::string fixed1(double v) {
  // round first so that tiny negatives print as 0.0, not -0.0
  double r = std::round(v * 10.0) / 10.0;
  if (r == 0.0) r = 0.0;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", r);
  return buf;
}

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

Prf token_prf(std::string_view prediction, std::string_view gold) {
  const auto p = normalize_tokens(prediction);
  const auto g = normalize_tokens(gold);
  if (p.empty() && g.empty()) return {1.0, 1.0, 1.0};
  if (p.empty() || g.empty()) return {};
  std::map<std::string, std::size_t> gc;
  for (const auto& t : g) ++gc[t];
  std::size_t overlap = 0;
  for (const auto& t : p) {
    auto it = gc.find(t);
    if (it != gc.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  Prf out;
  out.precision = static_cast<double>(overlap) / static_cast<double>(p.size());
  out.recall = static_cast<double>(overlap) / static_cast<double>(g.size());
  out.f1 = harmonic(out.precision, out.recall);
  return out;
}

bool exact_match(std::string_view prediction, std::string_view gold) {
  return normalize_tokens(prediction) == normalize_tokens(gold);
}

BleuStats& BleuStats::operator+=(const BleuStats& other) {
  if (other.matched.size() != matched.size()) {
    throw Error(ErrorKind::kInvalidArgument, "bleu: cannot add statistics of different orders");
  }
  for (std::size_t n = 0; n < matched.size(); ++n) {
    matched[n] += other.matched[n];
    total[n] += other.total[n];
  }
  candidate_length += other.candidate_length;
  reference_length += other.reference_length;
  return *this;
}

BleuStats bleu_stats(std::string_view candidate, const std::vector<std::string>& references, std::size_t max_n) {
  if (references.empty()) throw Error(ErrorKind::kInvalidArgument, "bleu: empty reference list");
  if (max_n == 0) throw Error(ErrorKind::kInvalidArgument, "bleu: max_n must be >= 1");
  const auto cand = normalize_tokens(candidate);
  std::vector<Tokens> refs;
  for (const auto& r : references) refs.push_back(normalize_tokens(r));

  BleuStats s(max_n);
  s.candidate_length = cand.size();
  std::size_t best = refs[0].size();
  for (const auto& r : refs) {
    const auto diff = [&](std::size_t len) {
      return len > cand.size() ? len - cand.size() : cand.size() - len;
    };
    if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) best = r.size();
  }
  s.reference_length = best;

  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto cc = ngrams(cand, n);
    NgramCounts max_ref;
    for (const auto& r : refs) {
      for (const auto& [gram, count] : ngrams(r, n)) {
        auto& m = max_ref[gram];
        m = std::max(m, count);
      }
    }
    for (const auto& [gram, count] : cc) {
      s.total[n - 1] += count;
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) s.matched[n - 1] += std::min(count, it->second);
    }
  }
  return s;
}

double bleu(const BleuStats& stats) {
  if (stats.candidate_length == 0) return 0.0;
  double log_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t n = 0; n < stats.total.size(); ++n) {
    if (stats.total[n] == 0) continue;
    if (stats.matched[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(stats.matched[n]) / static_cast<double>(stats.total[n]));
    ++used;
  }
  const double c = static_cast<double>(stats.candidate_length);
  const double r = static_cast<double>(stats.reference_length);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(used));
}

double bleu(std::string_view candidate, const std::vector<std::string>& references, std::size_t max_n) {
  return bleu(bleu_stats(candidate, references, max_n));
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = normalize_tokens(candidate);
  const auto r = normalize_tokens(reference);
  if (c.empty() && r.empty()) return 1.0;
  if (c.empty() || r.empty()) return 0.0;
  const double l = static_cast<double>(lcs_length(c, r));
  return harmonic(l / static_cast<double>(c.size()), l / static_cast<double>(r.size()));
}

NllSum next_token_nll(const Tensor& logits, const std::vector<std::vector<TokenId>>& batch) {
  if (logits.rank() != 3 || logits.dim(0) != batch.size()) {
    throw Error(ErrorKind::kShape, "perplexity: logits of shape " + shape_str(logits.shape()) +
                                       " do not match a batch of " + std::to_string(batch.size()));
  }
  const std::size_t seq = logits.dim(1);
  const std::size_t vocab = logits.dim(2);
  const auto v = logits.values();
  NllSum out;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].size() > seq) throw Error(ErrorKind::kShape, "perplexity: sequence longer than the logits");
    for (std::size_t t = 1; t < batch[b].size(); ++t) {
      const TokenId target = batch[b][t];
      if (target == kPad) continue;
      if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
        throw Error(ErrorKind::kInvalidArgument, "perplexity: token id outside the vocabulary");
      }
      const double* row = v.data() + (b * seq + t - 1) * vocab;
      double mx = row[0];
      for (std::size_t k = 1; k < vocab; ++k) mx = std::max(mx, row[k]);
      double z = 0.0;
      for (std::size_t k = 0; k < vocab; ++k) z += std::exp(row[k] - mx);
      out.total += mx + std::log(z) - row[target];
      ++out.tokens;
    }
  }
  return out;
}

double perplexity(const NllSum& nll) {
  if (nll.tokens == 0) throw Error(ErrorKind::kInvalidArgument, "perplexity: no scored tokens");
  return std::exp(nll.total / static_cast<double>(nll.tokens));
}

bool answer_matches(std::string_view answer, EntityId gold, const EntityLexicon& lex) {
  const auto* ids = lex.lookup(normalize_tokens(answer));
  return ids != nullptr && ids->count(gold) > 0;
}

double factual_accuracy(const std::vector<std::string>& answers, const std::vector<QaExample>& qa,
                        const EntityLexicon& lex) {
  if (qa.empty()) throw Error(ErrorKind::kInvalidArgument, "factual accuracy: empty QA set");
  if (answers.size() != qa.size()) {
    throw Error(ErrorKind::kInvalidArgument, "factual accuracy: " + std::to_string(answers.size()) +
                                                 " answers for " + std::to_string(qa.size()) + " questions");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < qa.size(); ++i) correct += answer_matches(answers[i], qa[i].triple.object, lex);
  return static_cast<double>(correct) / static_cast<double>(qa.size());
}

QaOutcome score_qa(const QaExample& ex, std::string prediction, const EntityLexicon& lex) {
  QaOutcome o;
  o.question = ex.question;
  o.prf = token_prf(prediction, ex.answer);
  o.exact = exact_match(prediction, ex.answer);
  o.factual = answer_matches(prediction, ex.triple.object, lex);
  o.prediction = std::move(prediction);
  return o;
}

GenOutcome score_generation(std::string prompt, std::string prediction, const std::string& reference,
                            NllSum nll) {
  GenOutcome o;
  o.bleu = bleu_stats(prediction, {reference});
  o.rouge = rouge_l(prediction, reference);
  o.nll = nll;
  o.prompt = std::move(prompt);
  o.prediction = std::move(prediction);
  return o;
}

MetricsReport summarize(const EvalRun& run) {
  MetricsReport r;
  r.model = run.model;
  r.qa_count = run.qa.size();
  r.gen_count = run.gen.size();
  if (!run.qa.empty()) {
    const double n = static_cast<double>(run.qa.size());
    for (const auto& q : run.qa) {
      r.precision += q.prf.precision;
      r.recall += q.prf.recall;
      r.f1 += q.prf.f1;
      r.exact_match += q.exact ? 1.0 : 0.0;
      r.factual_accuracy += q.factual ? 1.0 : 0.0;
    }
    r.precision /= n;
    r.recall /= n;
    r.f1 /= n;
    r.exact_match /= n;
    r.factual_accuracy /= n;
  }
  if (!run.gen.empty()) {
    BleuStats total;
    NllSum nll;
    for (const auto& g : run.gen) {
      total += g.bleu;
      nll += g.nll;
      r.rouge_l += g.rouge;
    }
    r.bleu = bleu(total);
    r.rouge_l /= static_cast<double>(run.gen.size());
    r.perplexity = nll.tokens > 0 ? perplexity(nll) : 0.0;
  }
  return r;
}

double paired_bootstrap_p(const std::vector<double>& baseline, const std::vector<double>& model,
                          std::size_t resamples, std::uint64_t seed) {
  if (baseline.size() != model.size() || baseline.empty()) {
    throw Error(ErrorKind::kInvalidArgument, "bootstrap: paired samples must be non-empty and equal in size");
  }
  if (resamples == 0) throw Error(ErrorKind::kInvalidArgument, "bootstrap: resamples must be >= 1");
  const std::size_t n = model.size();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = model[i] - baseline[i];
  Rng rng = derive_rng(seed, 0x626f6f74);
  std::size_t not_better = 0;
  for (std::size_t b = 0; b < resamples; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += diff[uniform_index(rng, n)];
    not_better += s <= 0.0;
  }
  return static_cast<double>(1 + not_better) / static_cast<double>(1 + resamples);
}

PairReport evaluate_pair(const EvalRun& baseline, const EvalRun& model, std::uint64_t seed,
                         std::size_t resamples) {
  auto mismatch = [&](const std::string& what) {
    throw Error(ErrorKind::kInvalidArgument, "evaluate_pair: " + baseline.model + " and " + model.model +
                                                 " were evaluated on different " + what);
  };
  if (baseline.qa.size() != model.qa.size()) mismatch("QA sets");
  for (std::size_t i = 0; i < baseline.qa.size(); ++i) {
    if (baseline.qa[i].question != model.qa[i].question) mismatch("QA sets");
  }
  if (baseline.gen.size() != model.gen.size()) mismatch("generation sets");
  for (std::size_t i = 0; i < baseline.gen.size(); ++i) {
    if (baseline.gen[i].prompt != model.gen[i].prompt) mismatch("generation sets");
  }
  PairReport p;
  p.baseline = summarize(baseline);
  p.model = summarize(model);
  p.qa_gain = 100.0 * (p.model.f1 - p.baseline.f1);
  p.gen_gain = 100.0 * (p.model.bleu - p.baseline.bleu);
  p.factual_gain = 100.0 * (p.model.factual_accuracy - p.baseline.factual_accuracy);
  if (!baseline.qa.empty()) {
    std::vector<double> a, b;
    for (const auto& q : baseline.qa) a.push_back(q.factual ? 1.0 : 0.0);
    for (const auto& q : model.qa) b.push_back(q.factual ? 1.0 : 0.0);
    p.p_value = paired_bootstrap_p(a, b, resamples, seed);
  }
  return p;
}

std::string format_percent(double rate) { return fixed1(100.0 * rate) + "%"; }

std::string format_gain(double points) {
  const std::string body = fixed1(points);
  return (body[0] == '-' ? "" : "+") + body + "%";
}

void write_report_table(std::ostream& out, const std::vector<PairReport>& pairs, std::string_view mode) {
  if (pairs.empty()) throw Error(ErrorKind::kInvalidArgument, "report: nothing to compare");
  const auto& base = pairs.front().baseline;
  for (const auto& p : pairs) {
    if (p.baseline.model != base.model) {
      throw Error(ErrorKind::kInvalidArgument, "report: every comparison must share one baseline");
    }
  }
  std::size_t width = std::string_view("Model").size();
  width = std::max(width, base.model.size());
  for (const auto& p : pairs) width = std::max(width, p.model.model.size());
  width += 2;

  auto row = [&](const std::string& name, const std::vector<std::string>& cells) {
    out << std::left << std::setw(static_cast<int>(width)) << name;
    for (const auto& c : cells) out << std::right << std::setw(9) << c;
    out << '\n';
  };
  auto rule = [&] { out << std::string(width + 4 * 9, '-') << '\n'; };

  out << "QA performance (mode: " << mode << "; gain vs. baseline " << base.model << ")\n";
  rule();
  row("Model", {"Prec.", "Rec.", "F1", "Gain"});
  rule();
  auto qa_cells = [](const MetricsReport& m, double gain) {
    if (m.qa_count == 0) return std::vector<std::string>{"-", "-", "-", "-"};
    return std::vector<std::string>{format_percent(m.precision), format_percent(m.recall),
                                    format_percent(m.f1), format_gain(gain)};
  };
  row(base.model, qa_cells(base, 0.0));
  for (const auto& p : pairs) row(p.model.model, qa_cells(p.model, p.qa_gain));
  rule();
  out << '\n';

  out << "Text generation performance (mode: " << mode << "; gain vs. baseline " << base.model << ")\n";
  rule();
  row("Model", {"BLEU", "ROUGE", "PPL", "Gain"});
  rule();
  auto gen_cells = [](const MetricsReport& m, double gain) {
    if (m.gen_count == 0) return std::vector<std::string>{"-", "-", "-", "-"};
    return std::vector<std::string>{fixed1(100.0 * m.bleu), fixed1(100.0 * m.rouge_l), fixed1(m.perplexity),
                                    format_gain(gain)};
  };
  row(base.model, gen_cells(base, 0.0));
  for (const auto& p : pairs) row(p.model.model, gen_cells(p.model, p.gen_gain));
  rule();
  out << '\n';

  out << "Factual accuracy: " << base.model << " " << format_percent(base.factual_accuracy);
  for (const auto& p : pairs) {
    char pbuf[32];
    std::snprintf(pbuf, sizeof pbuf, "%.4f", p.p_value);
    out << "; " << p.model.model << " " << format_percent(p.model.factual_accuracy) << " ("
        << format_gain(p.factual_gain) << ", paired bootstrap p = " << pbuf << ")";
  }
  out << '\n';
}

void write_report_tsv(std::ostream& out, const std::vector<PairReport>& pairs) {
  if (pairs.empty()) throw Error(ErrorKind::kInvalidArgument, "report: nothing to compare");
  out << "model\tmetric\tvalue\n";
  auto metrics = [&](const MetricsReport& m) {
    const std::pair<const char*, double> rows[] = {
        {"qa_count", static_cast<double>(m.qa_count)},
        {"precision", m.precision},
        {"recall", m.recall},
        {"f1", m.f1},
        {"exact_match", m.exact_match},
        {"factual_accuracy", m.factual_accuracy},
        {"gen_count", static_cast<double>(m.gen_count)},
        {"bleu", m.bleu},
        {"rouge_l", m.rouge_l},
        {"perplexity", m.perplexity},
    };
    for (const auto& [k, v] : rows) out << m.model << '\t' << k << '\t' << g9(v) << '\n';
  };
  metrics(pairs.front().baseline);
  for (const auto& p : pairs) {
    metrics(p.model);
    out << p.model.model << "\tqa_gain\t" << g9(p.qa_gain) << '\n';
    out << p.model.model << "\tgen_gain\t" << g9(p.gen_gain) << '\n';
    out << p.model.model << "\tfactual_gain\t" << g9(p.factual_gain) << '\n';
    out << p.model.model << "\tp_value\t" << g9(p.p_value) << '\n';
  }
}

}  // namespace kgfuse
