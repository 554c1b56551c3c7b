// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/kg_fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kgfuse/error.hpp"
#include "kgfuse/nn.hpp"
#include "kgfuse/ops.hpp"

namespace kgfuse {

namespace {

constexpr std::string_view kModeNames[] = {"gated-injection", "kg-attention-layer", "cross-layer-adapter",
                                           "dedicated-head"};

std::size_t parse_count(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw Error(ErrorKind::kFormat, "fusion config key '" + key + "' is not a count: '" + value + "'");
  }
}

// Visibility of memory row r to query position i, one entry per (b, h, i, r).
std::vector<std::uint8_t> memory_mask(const std::vector<KgMemory>& memories, std::size_t heads, std::size_t seq,
                                      std::size_t rows) {
  const std::size_t bsz = memories.size();
  std::vector<std::uint8_t> mask(bsz * heads * seq * rows, 0);
  for (std::size_t b = 0; b < bsz; ++b) {
    const auto& mem = memories[b];
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        std::uint8_t* row = mask.data() + ((b * heads + h) * seq + i) * rows;
        for (std::size_t r = 0; r < mem.size(); ++r) row[r] = mem.rows[r].ready <= i;
      }
    }
  }
  return mask;
}

// 1 where position i of row b sees at least one memory row, shape (B, T, 1).
Tensor has_memory(const std::vector<KgMemory>& memories, std::size_t seq) {
  std::vector<double> m(memories.size() * seq, 0.0);
  for (std::size_t b = 0; b < memories.size(); ++b) {
    std::size_t first = std::numeric_limits<std::size_t>::max();
    for (const auto& row : memories[b].rows) first = std::min(first, row.ready);
    for (std::size_t i = first; i < seq; ++i) m[b * seq + i] = 1.0;
  }
  return Tensor::from({memories.size(), seq, 1}, std::move(m));
}

}  // namespace

std::string_view to_string(FusionMode mode) { return kModeNames[static_cast<int>(mode)]; }

FusionMode parse_fusion_mode(std::string_view name) {
  for (int i = 0; i < 4; ++i) {
    if (kModeNames[i] == name) return static_cast<FusionMode>(i);
  }
  throw Error(ErrorKind::kInvalidArgument, "unknown fusion mode '" + std::string(name) + "'");
}

std::size_t FusionConfig::site(const ModelConfig& lm) const {
  if (layer) return *layer;
  if (mode == FusionMode::kDedicatedHead) return lm.n_layers - 1;
  return (lm.n_layers - 1) / 2;
}

void FusionConfig::validate(const ModelConfig& lm) const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kInvalidArgument, "fusion config: " + what); };
  if (lm.mode != AttentionMode::kCausal) fail("the base model must be causal");
  if (radius < 1) fail("radius must be >= 1");
  const std::size_t l = site(lm);
  if (l >= lm.n_layers) {
    fail("layer " + std::to_string(l) + " is outside the model's " + std::to_string(lm.n_layers) + " layers");
  }
  if (mode == FusionMode::kDedicatedHead && l != lm.n_layers - 1) {
    fail("dedicated-head fuses in the final attention block (layer " + std::to_string(lm.n_layers - 1) + ")");
  }
  const std::size_t h = heads == 0 ? lm.n_heads : heads;
  if (lm.d_model % h != 0) fail("d_model must be divisible by the fusion head count");
}

std::map<std::string, std::string> FusionConfig::to_map() const {
  return {
      {"fusion.mode", std::string(to_string(mode))},
      {"fusion.layer", layer ? std::to_string(*layer) : "auto"},
      {"fusion.radius", std::to_string(radius)},
      {"fusion.heads", std::to_string(heads)},
      {"fusion.d_ff", std::to_string(d_ff)},
      {"fusion.cotrain_kg", cotrain_kg ? "true" : "false"},
  };
}

FusionConfig FusionConfig::from_map(const std::map<std::string, std::string>& kv) {
  FusionConfig c;
  if (auto it = kv.find("fusion.mode"); it != kv.end()) c.mode = parse_fusion_mode(it->second);
  if (auto it = kv.find("fusion.layer"); it != kv.end() && it->second != "auto") {
    c.layer = parse_count(it->first, it->second);
  }
  if (auto it = kv.find("fusion.radius"); it != kv.end()) c.radius = parse_count(it->first, it->second);
  if (auto it = kv.find("fusion.heads"); it != kv.end()) c.heads = parse_count(it->first, it->second);
  if (auto it = kv.find("fusion.d_ff"); it != kv.end()) c.d_ff = parse_count(it->first, it->second);
  if (auto it = kv.find("fusion.cotrain_kg"); it != kv.end()) {
    if (it->second != "true" && it->second != "false") {
      throw Error(ErrorKind::kFormat, "fusion.cotrain_kg must be true or false");
    }
    c.cotrain_kg = it->second == "true";
  }
  return c;
}

std::vector<double> KgMemory::values(const KgEmbeddingTable& table) const {
  const std::size_t k = table.dim();
  if (table_rows != table.entity_count() + table.relation_count()) {
    throw Error(ErrorKind::kShape, "memory was built for a different embedding table");
  }
  std::vector<double> out(rows.size() * k, 0.0);
  const auto& data = table.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < table_rows; ++c) {
      const double w = selection[r * table_rows + c];
      if (w == 0.0) continue;
      for (std::size_t j = 0; j < k; ++j) out[r * k + j] += w * data[c * k + j];
    }
  }
  return out;
}

KgMemory build_memory(std::span<const Alignment> alignments, const KnowledgeGraph& g,
                      const KgEmbeddingTable& table, const FusionConfig& cfg) {
  if (cfg.radius < 1) throw Error(ErrorKind::kInvalidArgument, "build_memory: radius must be >= 1");
  if (table.relation_count() != g.relation_count()) {
    throw Error(ErrorKind::kShape, "build_memory: embedding table does not cover the graph's relations");
  }
  std::map<EntityId, std::size_t> entities;
  for (const auto& a : alignments) {
    if (a.end <= a.start) throw Error(ErrorKind::kInvalidArgument, "build_memory: empty alignment");
    if (a.entity >= table.entity_count() || a.entity >= g.entity_count() ||
        table.entity_keys()[a.entity] != g.entities().key(a.entity)) {
      throw Error(ErrorKind::kNotFound, "build_memory: entity " + std::to_string(a.entity) +
                                            " has no vector in the embedding table");
    }
    auto [it, inserted] = entities.emplace(a.entity, a.end - 1);
    if (!inserted) it->second = std::min(it->second, a.end - 1);
  }
  std::map<Triple, std::size_t> triples;
  for (const auto& [e, ready] : entities) {
    for (const auto& t : neighbors(g, e, cfg.radius)) {
      auto [it, inserted] = triples.emplace(t, ready);
      if (!inserted) it->second = std::min(it->second, ready);
    }
  }
  KgMemory mem;
  const std::size_t ne = table.entity_count();
  mem.table_rows = ne + table.relation_count();
  mem.selection.assign((entities.size() + triples.size()) * mem.table_rows, 0.0);
  std::size_t r = 0;
  for (const auto& [e, ready] : entities) {
    MemoryRow row;
    row.kind = MemoryRow::Kind::kEntity;
    row.entity = e;
    row.ready = ready;
    mem.rows.push_back(row);
    mem.selection[r * mem.table_rows + e] = 1.0;
    ++r;
  }
  for (const auto& [t, ready] : triples) {
    MemoryRow row;
    row.kind = MemoryRow::Kind::kTriple;
    row.triple = t;
    row.ready = ready;
    mem.rows.push_back(row);
    double* sel = mem.selection.data() + r * mem.table_rows;
    sel[t.subject] += 1.0 / 3.0;
    sel[ne + t.relation] += 1.0 / 3.0;
    sel[t.object] += 1.0 / 3.0;
    ++r;
  }
  return mem;
}

FusionInput fusion_input(const LinkedSequence& ls) { return {ls.seq.ids, ls.alignments}; }

FusedModel::FusedModel(TransformerModel base, FusionConfig config, const KgEmbeddingTable& table, Rng& rng)
    : base_(std::move(base)),
      config_(std::move(config)),
      d_kg_(table.dim()),
      table_rows_(table.entity_count() + table.relation_count()) {
  config_.validate(base_.config());
  site_ = config_.site(base_.config());
  init_fusion(&rng);
  if (config_.cotrain_kg) {
    auto values = params().get("fusion.kg_table").mutable_values();
    std::copy(table.data().begin(), table.data().end(), values.begin());
  }
}

FusedModel::FusedModel(TransformerModel base, FusionConfig config, std::size_t d_kg, std::size_t table_rows)
    : base_(std::move(base)), config_(std::move(config)), d_kg_(d_kg), table_rows_(table_rows) {
  config_.validate(base_.config());
  site_ = config_.site(base_.config());
  init_fusion(nullptr);
}

void FusedModel::init_fusion(Rng* rng) {
  if (d_kg_ == 0) throw Error(ErrorKind::kInvalidArgument, "fused model: d_kg must be positive");
  const auto& lm = base_.config();
  const std::size_t d = lm.d_model;
  auto& p = params();
  auto weight = [&](const std::string& name, Shape shape, double stddev) {
    if (rng) {
      p.add_normal(name, std::move(shape), stddev, *rng);
    } else {
      p.add_zeros(name, std::move(shape));
    }
  };
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  p.add_zeros("fusion.alpha", {1});
  weight("fusion.wk", {d_kg_, d}, 1.0 / std::sqrt(static_cast<double>(d_kg_)));
  p.add_zeros("fusion.bk", {d});
  if (config_.cotrain_kg) p.add_zeros("fusion.kg_table", {table_rows_, d_kg_});

  switch (config_.mode) {
    case FusionMode::kGatedInjection:
      weight("fusion.gate.w", {2 * d, 1}, 1.0 / std::sqrt(2.0 * static_cast<double>(d)));
      p.add_zeros("fusion.gate.b", {1});
      break;
    case FusionMode::kKgAttentionLayer: {
      const std::size_t ff = config_.d_ff == 0 ? lm.d_ff : config_.d_ff;
      p.add_constant("fusion.attn.ln.gamma", {d}, 1.0);
      p.add_zeros("fusion.attn.ln.beta", {d});
      for (const char* w : {"wq", "wk", "wv", "wo"}) weight(std::string("fusion.attn.") + w, {d, d}, sd);
      for (const char* b : {"bq", "bk", "bv", "bo"}) p.add_zeros(std::string("fusion.attn.") + b, {d});
      p.add_constant("fusion.ffn.ln.gamma", {d}, 1.0);
      p.add_zeros("fusion.ffn.ln.beta", {d});
      weight("fusion.ffn.w1", {d, ff}, sd);
      p.add_zeros("fusion.ffn.b1", {ff});
      weight("fusion.ffn.w2", {ff, d}, 1.0 / std::sqrt(static_cast<double>(ff)));
      p.add_zeros("fusion.ffn.b2", {d});
      break;
    }
    case FusionMode::kCrossLayerAdapter:
      p.add_constant("fusion.adapter.ln.gamma", {d}, 1.0);
      p.add_zeros("fusion.adapter.ln.beta", {d});
      for (const char* w : {"wq", "wk", "wv", "wa"}) weight(std::string("fusion.adapter.") + w, {d, d}, sd);
      for (const char* b : {"bq", "bk", "bv"}) p.add_zeros(std::string("fusion.adapter.") + b, {d});
      break;
    case FusionMode::kDedicatedHead: {
      const std::size_t dh = d / lm.n_heads;
      for (const char* w : {"wq", "wk", "wv"}) weight(std::string("fusion.head.") + w, {d, dh}, sd);
      for (const char* b : {"bq", "bk", "bv"}) p.add_zeros(std::string("fusion.head.") + b, {dh});
      weight("fusion.head.wo", {dh, d}, 1.0 / std::sqrt(static_cast<double>(dh)));
      break;
    }
  }
}

void FusedModel::set_alpha(double value) { params().get("fusion.alpha").mutable_values()[0] = value; }

FusedResult FusedModel::forward(const std::vector<FusionInput>& batch, const std::vector<KgMemory>& memories,
                                const KgEmbeddingTable& table, const ForwardOptions& options) const {
  if (batch.size() != memories.size()) {
    throw Error(ErrorKind::kShape, "fused forward: " + std::to_string(batch.size()) + " inputs but " +
                                       std::to_string(memories.size()) + " memories");
  }
  if (!config_.cotrain_kg && (table.dim() != d_kg_ || table.entity_count() + table.relation_count() != table_rows_)) {
    throw Error(ErrorKind::kShape, "fused forward: embedding table does not match the model");
  }
  const auto& lm = base_.config();
  const auto& p = params();
  const std::size_t bsz = batch.size();
  std::size_t seq = 0;
  std::size_t rows = 0;
  for (const auto& in : batch) seq = std::max(seq, in.ids.size());
  for (const auto& m : memories) {
    if (!m.empty() && m.table_rows != table_rows_) {
      throw Error(ErrorKind::kShape, "fused forward: memory built for a different embedding table");
    }
    rows = std::max(rows, m.size());
  }

  FusedResult result;
  result.gates.assign(bsz * seq, std::numeric_limits<double>::quiet_NaN());
  Tensor table_t = config_.cotrain_kg ? p.get("fusion.kg_table")
                                      : Tensor::from({table_rows_, d_kg_}, table.data());
  const Tensor& alpha = p.get("fusion.alpha");

  // Projected memory (B, M, d); padded rows are never visible.
  Tensor memory;
  if (rows > 0) {
    std::vector<double> sel(bsz * rows * table_rows_, 0.0);
    for (std::size_t b = 0; b < bsz; ++b) {
      std::copy(memories[b].selection.begin(), memories[b].selection.end(),
                sel.begin() + static_cast<std::ptrdiff_t>(b * rows * table_rows_));
    }
    Tensor s = Tensor::from({bsz, rows, table_rows_}, std::move(sel));
    memory = nn::linear(ops::matmul(s, table_t), p.get("fusion.wk"), p.get("fusion.bk"));
  }

  FusionHooks hooks;
  auto run_attention = [&](const Tensor& query_in, const char* prefix, std::size_t heads) {
    auto w = [&](const char* suffix) -> const Tensor& { return p.get(std::string(prefix) + suffix); };
    Tensor q = nn::split_heads(nn::linear(query_in, w("wq"), w("bq")), heads);
    Tensor k = nn::split_heads(nn::linear(memory, w("wk"), w("bk")), heads);
    Tensor v = nn::split_heads(nn::linear(memory, w("wv"), w("bv")), heads);
    auto mask = memory_mask(memories, heads, seq, rows);
    auto att = nn::attend(q, k, v, mask);
    result.attention = att.weights;
    return nn::merge_heads(att.out);
  };

  switch (config_.mode) {
    case FusionMode::kGatedInjection: {
      std::vector<double> sel(bsz * seq * table_rows_, 0.0);
      std::vector<double> at(bsz * seq, 0.0);
      bool any = false;
      for (std::size_t b = 0; b < bsz; ++b) {
        for (const auto& a : batch[b].alignments) {
          if (a.end == 0 || a.end > batch[b].ids.size() || a.entity >= table_rows_) {
            throw Error(ErrorKind::kShape, "fused forward: alignment outside the sequence or table");
          }
          const std::size_t pos = b * seq + a.end - 1;
          sel[pos * table_rows_ + a.entity] = 1.0;
          at[pos] = 1.0;
          any = true;
        }
      }
      if (!any) break;
      Tensor s = Tensor::from({bsz, seq, table_rows_}, std::move(sel));
      Tensor aligned = Tensor::from({bsz, seq, 1}, std::move(at));
      hooks.after_layer = [&, s, aligned](std::size_t layer, const Tensor& h) {
        if (layer != site_) return h;
        Tensor proj = nn::linear(ops::matmul(s, table_t), p.get("fusion.wk"), p.get("fusion.bk"));
        Tensor gate = ops::sigmoid(
            nn::linear(ops::concat({h, proj}, 2), p.get("fusion.gate.w"), p.get("fusion.gate.b")));
        const auto gv = gate.values();
        const auto av = aligned.values();
        for (std::size_t i = 0; i < gv.size(); ++i) {
          if (av[i] != 0.0) result.gates[i] = gv[i];
        }
        Tensor delta = ops::mul(ops::mul(aligned, ops::affine(gate, -1.0, 1.0)), ops::sub(proj, h));
        return ops::add(h, ops::mul(alpha, delta));
      };
      break;
    }
    case FusionMode::kKgAttentionLayer: {
      if (rows == 0) break;
      const std::size_t heads = config_.heads == 0 ? lm.n_heads : config_.heads;
      Tensor visible = has_memory(memories, seq);
      hooks.after_layer = [&, heads, visible](std::size_t layer, const Tensor& h) {
        if (layer != site_) return h;
        Tensor normed = ops::layer_norm(h, p.get("fusion.attn.ln.gamma"), p.get("fusion.attn.ln.beta"));
        Tensor u = nn::linear(run_attention(normed, "fusion.attn.", heads), p.get("fusion.attn.wo"),
                              p.get("fusion.attn.bo"));
        Tensor un = ops::layer_norm(u, p.get("fusion.ffn.ln.gamma"), p.get("fusion.ffn.ln.beta"));
        Tensor ff = nn::linear(ops::gelu(nn::linear(un, p.get("fusion.ffn.w1"), p.get("fusion.ffn.b1"))),
                               p.get("fusion.ffn.w2"), p.get("fusion.ffn.b2"));
        Tensor block = ops::mul(visible, ops::add(u, ff));
        return ops::add(h, ops::mul(alpha, block));
      };
      break;
    }
    case FusionMode::kCrossLayerAdapter: {
      if (rows == 0) break;
      Tensor visible = has_memory(memories, seq);
      // Causal mean over the positions that can see memory.
      std::vector<double> avg(bsz * seq * seq, 0.0);
      const auto vis = visible.values();
      for (std::size_t b = 0; b < bsz; ++b) {
        double count = 0.0;
        for (std::size_t i = 0; i < seq; ++i) {
          count += vis[b * seq + i];
          if (count == 0.0) continue;
          for (std::size_t j = 0; j <= i; ++j) avg[(b * seq + i) * seq + j] = vis[b * seq + j] / count;
        }
      }
      Tensor pool = Tensor::from({bsz, seq, seq}, std::move(avg));
      hooks.after_layer = [&, visible, pool](std::size_t layer, const Tensor& h) {
        if (layer != site_) return h;
        Tensor normed = ops::layer_norm(h, p.get("fusion.adapter.ln.gamma"), p.get("fusion.adapter.ln.beta"));
        Tensor context = ops::matmul(pool, run_attention(normed, "fusion.adapter.", 1));
        Tensor out = ops::mul(visible, ops::tanh(nn::linear(context, p.get("fusion.adapter.wa"))));
        return ops::add(h, ops::mul(alpha, out));
      };
      break;
    }
    case FusionMode::kDedicatedHead: {
      if (rows == 0) break;
      hooks.extra_head_layer = site_;
      hooks.extra_head_proj = p.get("fusion.head.wo");
      hooks.extra_head = [&](const Tensor& normed) {
        Tensor out = run_attention(normed, "fusion.head.", 1);
        return ops::mul(alpha, out);
      };
      break;
    }
  }

  ForwardOptions opts = options;
  opts.hooks = (hooks.after_layer || hooks.extra_head) ? &hooks : nullptr;
  std::vector<std::vector<TokenId>> ids;
  ids.reserve(bsz);
  for (const auto& in : batch) ids.push_back(in.ids);
  result.lm = base_.forward(ids, opts);
  return result;
}

FusedResult FusedModel::forward(const std::vector<LinkedSequence>& batch, const KnowledgeGraph& g,
                                const KgEmbeddingTable& table, const ForwardOptions& options) const {
  std::vector<FusionInput> inputs;
  std::vector<KgMemory> memories;
  for (const auto& ls : batch) {
    inputs.push_back(fusion_input(ls));
    memories.push_back(build_memory(ls, g, table, config_));
  }
  return forward(inputs, memories, table, options);
}

std::vector<TokenId> FusedModel::generate(std::span<const TokenId> prompt, std::span<const Alignment> alignments,
                                          const KnowledgeGraph& g, const KgEmbeddingTable& table,
                                          std::size_t max_new) const {
  NoGradGuard ng;
  std::vector<KgMemory> memories{build_memory(alignments, g, table, config_)};
  std::vector<Alignment> align(alignments.begin(), alignments.end());
  return greedy_decode(
      [&](const std::vector<TokenId>& seq) {
        auto r = forward({FusionInput{seq, align}}, memories, table);
        return logits_at(r.lm, 0, seq.size() - 1);
      },
      prompt, max_new, config().max_seq);
}

FusedModel FusedModel::clone() const {
  FusedModel copy(*this);
  copy.base_ = base_.clone();
  return copy;
}

}  // namespace kgfuse
