// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "kgfuse/entity_linker.hpp"
#include "kgfuse/task_synth.hpp"
#include "kgfuse/tensor.hpp"

namespace kgfuse {

// All text metrics compare normalized whitespace tokens.

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Multiset token overlap. Both empty scores 1; one side empty scores 0.
Prf token_prf(std::string_view prediction, std::string_view gold);
bool exact_match(std::string_view prediction, std::string_view gold);

// Sufficient statistics for BLEU; corpus scores add them over examples.
struct BleuStats {
  std::vector<std::size_t> matched;  // clipped n-gram matches, index n - 1
  std::vector<std::size_t> total;    // candidate n-grams
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;  // closest reference length, ties to the shorter

  explicit BleuStats(std::size_t max_n = 4) : matched(max_n, 0), total(max_n, 0) {}
  BleuStats& operator+=(const BleuStats& other);
};

BleuStats bleu_stats(std::string_view candidate, const std::vector<std::string>& references,
                     std::size_t max_n = 4);
// Geometric mean of the modified precisions of every order that has candidate
// n-grams, times the brevity penalty. No smoothing: any zero precision gives 0.
double bleu(const BleuStats& stats);
double bleu(std::string_view candidate, const std::vector<std::string>& references, std::size_t max_n = 4);

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);
// LCS-based F1.
double rouge_l(std::string_view candidate, std::string_view reference);

// Summed next-token negative log-likelihood of logits (B, T, V) against the
// batch: position t predicts token t + 1, [PAD] targets are skipped.
struct NllSum {
  double total = 0.0;
  std::size_t tokens = 0;

  NllSum& operator+=(const NllSum& other) {
    total += other.total;
    tokens += other.tokens;
    return *this;
  }
};

NllSum next_token_nll(const Tensor& logits, const std::vector<std::vector<TokenId>>& batch);
// exp(total / tokens); rejects an empty corpus.
double perplexity(const NllSum& nll);

// True iff the normalized answer equals a surface form of `gold`.
bool answer_matches(std::string_view answer, EntityId gold, const EntityLexicon& lex);
double factual_accuracy(const std::vector<std::string>& answers, const std::vector<QaExample>& qa,
                        const EntityLexicon& lex);

// Per-example results; reports and bootstrap resampling work from these.
struct QaOutcome {
  std::string question;
  std::string prediction;
  Prf prf;
  bool exact = false;
  bool factual = false;
};

struct GenOutcome {
  std::string prompt;
  std::string prediction;
  BleuStats bleu;
  double rouge = 0.0;
  NllSum nll;
};

QaOutcome score_qa(const QaExample& ex, std::string prediction, const EntityLexicon& lex);
GenOutcome score_generation(std::string prompt, std::string prediction, const std::string& reference,
                            NllSum nll);

struct EvalRun {
  std::string model;
  std::vector<QaOutcome> qa;
  std::vector<GenOutcome> gen;
};

struct MetricsReport {
  std::string model;
  std::size_t qa_count = 0;
  std::size_t gen_count = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double exact_match = 0.0;
  double factual_accuracy = 0.0;
  double bleu = 0.0;
  double rouge_l = 0.0;
  double perplexity = 0.0;
};

// Macro averages over QA examples; corpus BLEU; mean ROUGE-L; pooled PPL.
MetricsReport summarize(const EvalRun& run);

// p = (1 + #{resamples with mean(model - baseline) <= 0}) / (1 + resamples).
double paired_bootstrap_p(const std::vector<double>& baseline, const std::vector<double>& model,
                          std::size_t resamples, std::uint64_t seed);

struct PairReport {
  MetricsReport baseline;
  MetricsReport model;
  // Percentage points of the primary metric (F1 for QA, BLEU for generation).
  double qa_gain = 0.0;
  double gen_gain = 0.0;
  double factual_gain = 0.0;
  // Paired bootstrap on per-example factual accuracy.
  double p_value = 1.0;
};

inline constexpr std::size_t kBootstrapResamples = 10000;

// Rejects runs over different task sets.
PairReport evaluate_pair(const EvalRun& baseline, const EvalRun& model, std::uint64_t seed,
                         std::size_t resamples = kBootstrapResamples);

// "94.7%" and "+6.2%" style renderings.
std::string format_percent(double rate);
std::string format_gain(double points);

// Two aligned tables (QA: Prec./Rec./F1/Gain, generation: BLEU/ROUGE/PPL/Gain)
// with the baseline first, then each compared model.
void write_report_table(std::ostream& out, const std::vector<PairReport>& pairs, std::string_view mode);
// model<TAB>metric<TAB>value rows.
void write_report_tsv(std::ostream& out, const std::vector<PairReport>& pairs);

}  // namespace kgfuse
