// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kgfuse/params.hpp"
#include "kgfuse/rng.hpp"
#include "kgfuse/tensor.hpp"
#include "kgfuse/text.hpp"

namespace kgfuse {

enum class AttentionMode { kBidirectional, kCausal };

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_seq = 64;
  AttentionMode mode = AttentionMode::kCausal;
  double dropout = 0.0;
  // Number of segment embeddings; 0 disables them.
  std::size_t segment_vocab = 0;

  void validate() const;
  // Stable key=value rendering used in checkpoint headers.
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);

  bool operator==(const ModelConfig&) const = default;
};

inline constexpr std::size_t kNoLayer = std::numeric_limits<std::size_t>::max();

// Extension points used by the fusion layer.
struct FusionHooks {
  // Runs on the hidden state (B, T, d) after block `layer`; the returned tensor
  // replaces it and must have the same shape.
  std::function<Tensor(std::size_t layer, const Tensor& hidden)> after_layer;

  // Adds one attention head to block `extra_head_layer`. Given the block's
  // normalized input (B, T, d) it returns the head output (B, T, h), which is
  // concatenated with the standard heads; `extra_head_proj` (h, d) supplies
  // the matching rows of the output projection.
  std::size_t extra_head_layer = kNoLayer;
  std::function<Tensor(const Tensor& normed)> extra_head;
  Tensor extra_head_proj;
};

struct ForwardOptions {
  bool training = false;  // enables dropout; requires rng
  Rng* rng = nullptr;
  const FusionHooks* hooks = nullptr;
  // Per-sequence segment ids, parallel to the token ids.
  const std::vector<std::vector<std::int32_t>>* segments = nullptr;
};

struct ForwardResult {
  Tensor logits;                     // (B, T, V)
  Tensor final_hidden;               // (B, T, d) after the final layer norm
  std::vector<Tensor> layer_hidden;  // block outputs, after hooks
  std::size_t batch = 0;
  std::size_t seq = 0;
};

// Pre-LayerNorm transformer with learned positions and an LM head tied to the
// token embeddings. Causal mode is the language model; bidirectional mode is
// the triple encoder.
class TransformerModel {
 public:
  TransformerModel(ModelConfig config, Rng& rng);
  // All-zero parameters with the manifest of `config`; used before loading.
  explicit TransformerModel(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  // Right-pads the batch with [PAD] to its longest sequence. [PAD] keys are
  // masked; in causal mode position i only attends to positions <= i.
  ForwardResult forward(const std::vector<std::vector<TokenId>>& batch,
                        const ForwardOptions& options = {}) const;

  TransformerModel clone() const;

 private:
  void init(Rng* rng);

  ModelConfig config_;
  ParamSet params_;
};

// Greedy decoding shared by the base and fused models. `next_logits` returns
// the vocabulary logits at the last position of the given sequence. Appends
// argmax tokens (ties to the lower id) until [EOS], max_new tokens, or the
// length limit; returns prompt + generated tokens.
std::vector<TokenId> greedy_decode(
    const std::function<std::vector<double>(const std::vector<TokenId>&)>& next_logits,
    std::span<const TokenId> prompt, std::size_t max_new, std::size_t max_seq);

std::vector<TokenId> generate(const TransformerModel& model, std::span<const TokenId> prompt,
                              std::size_t max_new);

// Vocabulary logits of one (row, position) of a forward result.
std::vector<double> logits_at(const ForwardResult& result, std::size_t row, std::size_t position);

}  // namespace kgfuse
