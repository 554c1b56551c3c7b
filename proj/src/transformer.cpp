// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "kgfuse/error.hpp"
#include "kgfuse/nn.hpp"
#include "kgfuse/ops.hpp"

namespace kgfuse {

namespace {

std::string block(std::size_t layer, const char* suffix) {
  return "blocks." + std::to_string(layer) + "." + suffix;
}

std::size_t parse_size(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw Error(ErrorKind::kFormat, "model config is missing '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw Error(ErrorKind::kFormat, "model config key '" + key + "' is not an integer");
  }
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kInvalidArgument, "model config: " + what); };
  if (vocab_size <= kReservedTokens) fail("vocab_size must exceed the reserved tokens");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (d_ff == 0) fail("d_ff must be >= 1");
  if (max_seq < 2) fail("max_seq must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  char dropout_buf[32];
  std::snprintf(dropout_buf, sizeof dropout_buf, "%.17g", dropout);
  return {
      {"model.vocab_size", std::to_string(vocab_size)},
      {"model.d_model", std::to_string(d_model)},
      {"model.layers", std::to_string(n_layers)},
      {"model.heads", std::to_string(n_heads)},
      {"model.d_ff", std::to_string(d_ff)},
      {"model.max_seq", std::to_string(max_seq)},
      {"model.mode", mode == AttentionMode::kCausal ? "causal" : "bidirectional"},
      {"model.dropout", dropout_buf},
      {"model.segments", std::to_string(segment_vocab)},
  };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.vocab_size = parse_size(kv, "model.vocab_size");
  c.d_model = parse_size(kv, "model.d_model");
  c.n_layers = parse_size(kv, "model.layers");
  c.n_heads = parse_size(kv, "model.heads");
  c.d_ff = parse_size(kv, "model.d_ff");
  c.max_seq = parse_size(kv, "model.max_seq");
  c.segment_vocab = parse_size(kv, "model.segments");
  auto mode = kv.find("model.mode");
  if (mode == kv.end() || (mode->second != "causal" && mode->second != "bidirectional")) {
    throw Error(ErrorKind::kFormat, "model config has no valid 'model.mode'");
  }
  c.mode = mode->second == "causal" ? AttentionMode::kCausal : AttentionMode::kBidirectional;
  auto dropout = kv.find("model.dropout");
  c.dropout = dropout == kv.end() ? 0.0 : std::stod(dropout->second);
  c.validate();
  return c;
}

TransformerModel::TransformerModel(ModelConfig config, Rng& rng) : config_(std::move(config)) {
  config_.validate();
  init(&rng);
}

TransformerModel::TransformerModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  init(nullptr);
}

void TransformerModel::init(Rng* rng) {
  const std::size_t d = config_.d_model;
  const std::size_t ff = config_.d_ff;
  const double emb_std = 0.1;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = in_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  const double ff_out_std = 1.0 / std::sqrt(static_cast<double>(ff)) /
                            std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  auto weight = [&](const std::string& name, Shape shape, double stddev) {
    if (rng) {
      params_.add_normal(name, std::move(shape), stddev, *rng);
    } else {
      params_.add_zeros(name, std::move(shape));
    }
  };
  weight("tok_emb", {config_.vocab_size, d}, emb_std);
  weight("pos_emb", {config_.max_seq, d}, emb_std);
  if (config_.segment_vocab > 0) weight("seg_emb", {config_.segment_vocab, d}, emb_std);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    params_.add_constant(block(l, "ln1.gamma"), {d}, 1.0);
    params_.add_zeros(block(l, "ln1.beta"), {d});
    weight(block(l, "attn.wq"), {d, d}, in_std);
    weight(block(l, "attn.wk"), {d, d}, in_std);
    weight(block(l, "attn.wv"), {d, d}, in_std);
    weight(block(l, "attn.wo"), {d, d}, out_std);
    params_.add_zeros(block(l, "attn.bq"), {d});
    params_.add_zeros(block(l, "attn.bk"), {d});
    params_.add_zeros(block(l, "attn.bv"), {d});
    params_.add_zeros(block(l, "attn.bo"), {d});
    params_.add_constant(block(l, "ln2.gamma"), {d}, 1.0);
    params_.add_zeros(block(l, "ln2.beta"), {d});
    weight(block(l, "ffn.w1"), {d, ff}, in_std);
    params_.add_zeros(block(l, "ffn.b1"), {ff});
    weight(block(l, "ffn.w2"), {ff, d}, ff_out_std);
    params_.add_zeros(block(l, "ffn.b2"), {d});
  }
  params_.add_constant("ln_f.gamma", {d}, 1.0);
  params_.add_zeros("ln_f.beta", {d});
  params_.add_zeros("lm_head.bias", {config_.vocab_size});
}

TransformerModel TransformerModel::clone() const {
  TransformerModel copy(config_);
  copy.params_ = params_.clone();
  return copy;
}

ForwardResult TransformerModel::forward(const std::vector<std::vector<TokenId>>& batch,
                                        const ForwardOptions& options) const {
  if (batch.empty()) throw Error(ErrorKind::kInvalidArgument, "forward: empty batch");
  std::size_t seq = 0;
  for (const auto& s : batch) {
    if (s.empty()) throw Error(ErrorKind::kInvalidArgument, "forward: empty sequence");
    seq = std::max(seq, s.size());
  }
  if (seq > config_.max_seq) {
    throw Error(ErrorKind::kInvalidArgument, "forward: sequence length " + std::to_string(seq) +
                                                 " exceeds max_seq " + std::to_string(config_.max_seq));
  }
  if (options.training && config_.dropout > 0.0 && options.rng == nullptr) {
    throw Error(ErrorKind::kInvalidArgument, "forward: training with dropout needs an rng");
  }
  const std::size_t bsz = batch.size();
  const std::size_t d = config_.d_model;
  const std::size_t heads = config_.n_heads;
  const bool causal = config_.mode == AttentionMode::kCausal;
  const double drop = options.training ? config_.dropout : 0.0;

  std::vector<std::int32_t> ids(bsz * seq, kPad);
  std::vector<std::int32_t> positions(bsz * seq);
  std::vector<std::int32_t> segments(bsz * seq, 0);
  std::vector<std::uint8_t> key_valid(bsz * seq, 0);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      positions[b * seq + t] = static_cast<std::int32_t>(t);
      if (t < batch[b].size()) {
        ids[b * seq + t] = batch[b][t];
        key_valid[b * seq + t] = batch[b][t] != kPad;
      }
    }
    if (options.segments && config_.segment_vocab > 0) {
      const auto& seg = (*options.segments).at(b);
      if (seg.size() != batch[b].size()) {
        throw Error(ErrorKind::kShape, "forward: segment ids do not match sequence length");
      }
      std::copy(seg.begin(), seg.end(), segments.begin() + static_cast<std::ptrdiff_t>(b * seq));
    }
  }

  std::vector<std::uint8_t> mask(bsz * heads * seq * seq, 0);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        std::uint8_t* row = mask.data() + ((b * heads + h) * seq + i) * seq;
        for (std::size_t j = 0; j < seq; ++j) {
          row[j] = key_valid[b * seq + j] && (!causal || j <= i);
        }
      }
    }
  }

  Rng* rng = options.rng;
  auto maybe_drop = [&](const Tensor& x) { return drop > 0.0 ? ops::dropout(x, drop, *rng) : x; };

  Tensor x = ops::add(ops::embedding_lookup(params_.get("tok_emb"), ids),
                      ops::embedding_lookup(params_.get("pos_emb"), positions));
  if (config_.segment_vocab > 0) {
    x = ops::add(x, ops::embedding_lookup(params_.get("seg_emb"), segments));
  }
  x = maybe_drop(ops::reshape(x, {bsz, seq, d}));

  const FusionHooks* hooks = options.hooks;
  ForwardResult result;
  result.batch = bsz;
  result.seq = seq;
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    auto p = [&](const char* suffix) -> const Tensor& { return params_.get(block(l, suffix)); };
    Tensor normed = ops::layer_norm(x, p("ln1.gamma"), p("ln1.beta"));
    Tensor q = nn::split_heads(nn::linear(normed, p("attn.wq"), p("attn.bq")), heads);
    Tensor k = nn::split_heads(nn::linear(normed, p("attn.wk"), p("attn.bk")), heads);
    Tensor v = nn::split_heads(nn::linear(normed, p("attn.wv"), p("attn.bv")), heads);
    Tensor attn = nn::merge_heads(nn::attend(q, k, v, mask).out);
    Tensor wo = p("attn.wo");
    if (hooks && hooks->extra_head && hooks->extra_head_layer == l) {
      Tensor extra = hooks->extra_head(normed);
      if (extra.rank() != 3 || extra.dim(0) != bsz || extra.dim(1) != seq ||
          extra.dim(2) != hooks->extra_head_proj.dim(0)) {
        throw Error(ErrorKind::kShape, "forward: extra head returned shape " + shape_str(extra.shape()));
      }
      attn = ops::concat({attn, extra}, 2);
      wo = ops::concat({wo, hooks->extra_head_proj}, 0);
    }
    x = ops::add(x, maybe_drop(nn::linear(attn, wo, p("attn.bo"))));
    Tensor normed2 = ops::layer_norm(x, p("ln2.gamma"), p("ln2.beta"));
    Tensor ff = nn::linear(ops::gelu(nn::linear(normed2, p("ffn.w1"), p("ffn.b1"))), p("ffn.w2"),
                           p("ffn.b2"));
    x = ops::add(x, maybe_drop(ff));
    if (hooks && hooks->after_layer) {
      Tensor replaced = hooks->after_layer(l, x);
      if (!replaced.defined() || replaced.shape() != x.shape()) {
        throw Error(ErrorKind::kShape, "forward: hook after layer " + std::to_string(l) +
                                           " changed shape " + shape_str(x.shape()) + " to " +
                                           (replaced.defined() ? shape_str(replaced.shape()) : "undefined"));
      }
      x = replaced;
    }
    result.layer_hidden.push_back(x);
  }
  result.final_hidden = ops::layer_norm(x, params_.get("ln_f.gamma"), params_.get("ln_f.beta"));
  result.logits = ops::add(ops::matmul(result.final_hidden, ops::transpose(params_.get("tok_emb"))),
                           params_.get("lm_head.bias"));
  return result;
}

std::vector<double> logits_at(const ForwardResult& result, std::size_t row, std::size_t position) {
  const std::size_t v = result.logits.shape().back();
  const auto values = result.logits.values();
  const std::size_t offset = (row * result.seq + position) * v;
  return {values.begin() + static_cast<std::ptrdiff_t>(offset),
          values.begin() + static_cast<std::ptrdiff_t>(offset + v)};
}

std::vector<TokenId> greedy_decode(
    const std::function<std::vector<double>(const std::vector<TokenId>&)>& next_logits,
    std::span<const TokenId> prompt, std::size_t max_new, std::size_t max_seq) {
  if (prompt.empty()) throw Error(ErrorKind::kInvalidArgument, "generate: empty prompt");
  if (prompt.size() > max_seq) {
    throw Error(ErrorKind::kInvalidArgument, "generate: prompt length " + std::to_string(prompt.size()) +
                                                 " exceeds max_seq " + std::to_string(max_seq));
  }
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < max_new && seq.size() < max_seq; ++step) {
    const auto logits = next_logits(seq);
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    seq.push_back(static_cast<TokenId>(best));
    if (best == kEos) break;
  }
  return seq;
}

std::vector<TokenId> generate(const TransformerModel& model, std::span<const TokenId> prompt,
                              std::size_t max_new) {
  if (model.config().mode != AttentionMode::kCausal) {
    throw Error(ErrorKind::kInvalidArgument, "generate: model is not causal");
  }
  NoGradGuard no_grad;
  return greedy_decode(
      [&](const std::vector<TokenId>& seq) {
        auto result = model.forward({seq});
        return logits_at(result, 0, seq.size() - 1);
      },
      prompt, max_new, model.config().max_seq);
}

}  // namespace kgfuse
