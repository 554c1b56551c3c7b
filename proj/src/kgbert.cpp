// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/kgbert.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "kgfuse/error.hpp"
#include "kgfuse/ops.hpp"
#include "kgfuse/optim.hpp"

namespace kgfuse {

namespace {

void append_span(SerializedTriple& out, std::string_view label, std::int32_t segment, const Vocab& vocab) {
  auto seq = encode(vocab, label);
  if (seq.ids.empty()) throw Error(ErrorKind::kInvalidArgument, "label tokenizes to nothing");
  for (TokenId id : seq.ids) {
    out.ids.push_back(id);
    out.segments.push_back(segment);
  }
  out.ids.push_back(kSep);
  out.segments.push_back(segment);
}

void check_scorer(const TransformerModel& m) {
  if (m.config().mode != AttentionMode::kBidirectional) {
    throw Error(ErrorKind::kInvalidArgument, "scorer: model is not bidirectional");
  }
  if (m.config().segment_vocab < kScorerSegments || !m.params().contains("head.w")) {
    throw Error(ErrorKind::kInvalidArgument, "scorer: model has no scoring head");
  }
}

ModelConfig scorer_config(ModelConfig config) {
  if (config.mode != AttentionMode::kBidirectional) {
    throw Error(ErrorKind::kInvalidArgument, "scorer: config mode must be bidirectional");
  }
  config.segment_vocab = std::max(config.segment_vocab, kScorerSegments);
  return config;
}

Tensor cls_states(const TransformerModel& m, std::span<const SerializedTriple> batch, Rng* rng = nullptr) {
  std::vector<std::vector<TokenId>> ids;
  std::vector<std::vector<std::int32_t>> segs;
  ids.reserve(batch.size());
  segs.reserve(batch.size());
  for (const auto& s : batch) {
    ids.push_back(s.ids);
    segs.push_back(s.segments);
  }
  ForwardOptions opts;
  opts.segments = &segs;
  opts.training = rng != nullptr;
  opts.rng = rng;
  auto result = m.forward(ids, opts);
  const std::size_t d = m.config().d_model;
  return ops::reshape(ops::slice(result.final_hidden, 1, 0, 1), {batch.size(), d});
}

std::string format_row(std::span<const double> v) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g", v[i]);
    if (i) out += ',';
    out += buf;
  }
  return out;
}

}  // namespace

SerializedTriple serialize_triple(const KnowledgeGraph& g, const Triple& t, const Vocab& vocab) {
  SerializedTriple out;
  out.ids.push_back(kCls);
  out.segments.push_back(0);
  append_span(out, g.entities().label(t.subject), 0, vocab);
  append_span(out, g.relations().label(t.relation), 1, vocab);
  append_span(out, g.entities().label(t.object), 2, vocab);
  return out;
}

SerializedTriple serialize_label(std::string_view label, std::int32_t segment, const Vocab& vocab) {
  SerializedTriple out;
  out.ids.push_back(kCls);
  out.segments.push_back(segment);
  append_span(out, label, segment, vocab);
  return out;
}

TransformerModel make_scorer(ModelConfig config, Rng& rng) {
  TransformerModel m(scorer_config(std::move(config)), rng);
  const std::size_t d = m.config().d_model;
  m.params().add_normal("head.w", {d, 1}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  m.params().add_zeros("head.b", {1});
  return m;
}

TransformerModel make_scorer(ModelConfig config) {
  TransformerModel m(scorer_config(std::move(config)));
  m.params().add_zeros("head.w", {m.config().d_model, 1});
  m.params().add_zeros("head.b", {1});
  return m;
}

Tensor score_logits(const TransformerModel& m, std::span<const SerializedTriple> batch, Rng* dropout_rng) {
  check_scorer(m);
  Tensor cls = cls_states(m, batch, dropout_rng);
  Tensor logits = ops::add(ops::matmul(cls, m.params().get("head.w")), m.params().get("head.b"));
  return ops::reshape(logits, {batch.size()});
}

double score_logit(const TransformerModel& m, const SerializedTriple& s) {
  NoGradGuard ng;
  return score_logits(m, std::span<const SerializedTriple>(&s, 1)).item();
}

double score_triple(const TransformerModel& m, const SerializedTriple& s) {
  NoGradGuard ng;
  return ops::sigmoid(score_logits(m, std::span<const SerializedTriple>(&s, 1))).item();
}

ScorerTrainResult train_scorer(const KnowledgeGraph& g, const Vocab& vocab, TransformerModel& m,
                               const ScorerTrainOptions& options, std::span<const Triple> positives) {
  check_scorer(m);
  if (options.batch_size == 0) throw Error(ErrorKind::kInvalidArgument, "train_scorer: batch size 0");
  std::vector<Triple> pos(positives.begin(), positives.end());
  if (pos.empty()) pos.assign(g.triples().begin(), g.triples().end());
  ScorerTrainResult result;
  if (options.epochs == 0 || pos.empty()) return result;

  const std::size_t per_epoch = pos.size() * (1 + options.negatives);
  const std::size_t steps_per_epoch = (per_epoch + options.batch_size - 1) / options.batch_size;
  AdamOptions ao;
  ao.lr = options.lr;
  ao.total_steps = steps_per_epoch * options.epochs;
  ao.clip_norm = options.clip_norm;
  Adam adam(ao, m.params().items());
  Rng rng = derive_rng(options.seed, 0x73636f72);
  auto& tape = Tape::current();

  std::vector<std::pair<Triple, double>> examples;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    examples.clear();
    for (const auto& t : pos) {
      examples.emplace_back(t, 1.0);
      for (std::size_t k = 0; k < options.negatives; ++k) {
        const auto side = uniform_index(rng, 2) == 0 ? CorruptSide::kHead : CorruptSide::kTail;
        examples.emplace_back(corrupt_triple(g, t, side, rng), 0.0);
      }
    }
    std::shuffle(examples.begin(), examples.end(), rng);
    for (std::size_t start = 0; start < examples.size(); start += options.batch_size) {
      const std::size_t end = std::min(examples.size(), start + options.batch_size);
      std::vector<SerializedTriple> batch;
      std::vector<double> labels;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(serialize_triple(g, examples[i].first, vocab));
        labels.push_back(examples[i].second);
      }
      tape.clear();
      adam.zero_grad();
      Tensor loss = ops::bce_with_logits(score_logits(m, batch, &rng), labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        tape.clear();
        throw Error(ErrorKind::kDiverged, "train_scorer: loss became " + std::to_string(value) + " at step " +
                                              std::to_string(result.losses.size()));
      }
      backward(loss);
      adam.step();
      result.losses.push_back(value);
      if (options.on_step) options.on_step(result.losses.size(), value);
    }
  }
  tape.clear();
  m.params().zero_grad();
  return result;
}

KgEmbeddingTable::KgEmbeddingTable(std::size_t dim, std::vector<std::string> entity_keys,
                                   std::vector<std::string> relation_keys)
    : dim_(dim),
      entity_keys_(std::move(entity_keys)),
      relation_keys_(std::move(relation_keys)),
      data_((entity_keys_.size() + relation_keys_.size()) * dim, 0.0) {}

std::span<const double> KgEmbeddingTable::entity(EntityId e) const {
  if (e >= entity_keys_.size()) throw Error(ErrorKind::kNotFound, "embedding table: unknown entity id");
  return std::span<const double>(data_).subspan(e * dim_, dim_);
}

std::span<const double> KgEmbeddingTable::relation(RelationId r) const {
  if (r >= relation_keys_.size()) throw Error(ErrorKind::kNotFound, "embedding table: unknown relation id");
  return std::span<const double>(data_).subspan((entity_keys_.size() + r) * dim_, dim_);
}

std::span<double> KgEmbeddingTable::mutable_entity(EntityId e) {
  auto s = entity(e);
  return {const_cast<double*>(s.data()), s.size()};
}

std::span<double> KgEmbeddingTable::mutable_relation(RelationId r) {
  auto s = relation(r);
  return {const_cast<double*>(s.data()), s.size()};
}

void KgEmbeddingTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << "d_kg=" << dim_ << '\n';
  for (EntityId e = 0; e < entity_count(); ++e) out << "E\t" << entity_keys_[e] << '\t' << format_row(entity(e)) << '\n';
  for (RelationId r = 0; r < relation_count(); ++r) {
    out << "R\t" << relation_keys_[r] << '\t' << format_row(relation(r)) << '\n';
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

KgEmbeddingTable KgEmbeddingTable::load(const std::filesystem::path& path, const KnowledgeGraph& g) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("d_kg=", 0) != 0) {
    throw Error(ErrorKind::kFormat, path.string() + ": missing d_kg header");
  }
  std::size_t dim = 0;
  try {
    dim = std::stoul(line.substr(5));
  } catch (const std::exception&) {
    throw Error(ErrorKind::kFormat, path.string() + ": bad d_kg header");
  }
  if (dim == 0) throw Error(ErrorKind::kFormat, path.string() + ": d_kg must be positive");

  std::vector<std::string> ents(g.entity_count()), rels(g.relation_count());
  for (EntityId e = 0; e < g.entity_count(); ++e) ents[e] = g.entities().key(e);
  for (RelationId r = 0; r < g.relation_count(); ++r) rels[r] = g.relations().key(r);
  KgEmbeddingTable table(dim, ents, rels);
  std::vector<bool> seen_e(ents.size(), false), seen_r(rels.size(), false);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto where = path.string() + " line " + std::to_string(lineno);
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw Error(ErrorKind::kFormat, where + ": expected 3 fields");
    const std::string kind = line.substr(0, t1);
    const std::string key = line.substr(t1 + 1, t2 - t1 - 1);
    std::vector<double> values;
    std::istringstream vs(line.substr(t2 + 1));
    std::string cell;
    while (std::getline(vs, cell, ',')) {
      char* endp = nullptr;
      const double v = std::strtod(cell.c_str(), &endp);
      if (endp == cell.c_str() || *endp != '\0' || !std::isfinite(v)) {
        throw Error(ErrorKind::kFormat, where + ": bad value '" + cell + "'");
      }
      values.push_back(v);
    }
    if (values.size() != dim) throw Error(ErrorKind::kFormat, where + ": expected " + std::to_string(dim) + " values");
    std::span<double> dst;
    if (kind == "E") {
      auto id = g.entities().find(key);
      if (!id) continue;
      dst = table.mutable_entity(*id);
      seen_e[*id] = true;
    } else if (kind == "R") {
      auto id = g.relations().find(key);
      if (!id) continue;
      dst = table.mutable_relation(*id);
      seen_r[*id] = true;
    } else {
      throw Error(ErrorKind::kFormat, where + ": row kind must be E or R");
    }
    std::copy(values.begin(), values.end(), dst.begin());
  }
  for (EntityId e = 0; e < ents.size(); ++e) {
    if (!seen_e[e]) throw Error(ErrorKind::kNotFound, path.string() + ": no vector for entity '" + ents[e] + "'");
  }
  for (RelationId r = 0; r < rels.size(); ++r) {
    if (!seen_r[r]) throw Error(ErrorKind::kNotFound, path.string() + ": no vector for relation '" + rels[r] + "'");
  }
  return table;
}

KgEmbeddingTable export_embeddings(const KnowledgeGraph& g, const Vocab& vocab, const TransformerModel& m) {
  check_scorer(m);
  std::vector<std::string> ents(g.entity_count()), rels(g.relation_count());
  for (EntityId e = 0; e < g.entity_count(); ++e) ents[e] = g.entities().key(e);
  for (RelationId r = 0; r < g.relation_count(); ++r) rels[r] = g.relations().key(r);
  const std::size_t d = m.config().d_model;
  KgEmbeddingTable table(d, std::move(ents), std::move(rels));

  NoGradGuard ng;
  std::vector<SerializedTriple> inputs;
  for (EntityId e = 0; e < g.entity_count(); ++e) inputs.push_back(serialize_label(g.entities().label(e), 0, vocab));
  for (RelationId r = 0; r < g.relation_count(); ++r) {
    inputs.push_back(serialize_label(g.relations().label(r), 1, vocab));
  }
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, inputs.size() - start);
    Tensor cls = cls_states(m, std::span<const SerializedTriple>(inputs).subspan(start, n));
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = start + i;
      auto dst = row < g.entity_count() ? table.mutable_entity(static_cast<EntityId>(row))
                                        : table.mutable_relation(static_cast<RelationId>(row - g.entity_count()));
      auto src = cls.values().subspan(i * d, d);
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  return table;
}

}  // namespace kgfuse
