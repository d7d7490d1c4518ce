#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ntq/autodiff.hpp"
#include "ntq/rng.hpp"
#include "ntq/tensor.hpp"
#include "ntq/tokens.hpp"

namespace ntq {

enum class NormKind { kLayerNorm, kRmsNorm };

std::string norm_kind_name(NormKind k);
NormKind norm_kind_from_name(const std::string& name);

struct ModelConfig {
  int vocab_size = 512;
  int hidden = 128;
  int n_layers = 4;
  int n_heads = 4;
  int max_seq_len = 128;
  NormKind norm_kind = NormKind::kLayerNorm;
  float eps = 1e-5f;

  int head_dim() const { return hidden / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct NormParams {
  Tensor gamma;
  Tensor beta;  // empty for rmsnorm
  bool has_beta() const { return !beta.empty(); }
};

// Pre-norm decoder block: x + Attn(Norm1(x)), then + MLP(Norm2(.)).
// Linear weights are stored [in, out]; attention projections are hxh, the MLP
// expands to 4h and back.
struct TransformerBlock {
  NormParams ln1, ln2;
  Tensor wq, wk, wv, wo;
  Tensor w_up, w_down;
};

struct TransformerModel {
  ModelConfig config;
  Tensor tok_emb;  // [vocab, h]; also the tied output head
  Tensor pos_emb;  // [max_seq_len, h]
  std::vector<TransformerBlock> blocks;
  NormParams final_norm;
};

// Per-block input/output capture for one batch.
struct BlockTrace {
  std::vector<Tensor> inputs;
  std::vector<Tensor> outputs;
};

struct SamplingPolicy {
  enum class Kind { kGreedy, kTemperature, kTopK };
  Kind kind = Kind::kGreedy;
  double temperature = 1.0;
  int top_k = 0;
};

struct TrainOptions {
  int batch = 8;
  int seq_len = 64;
};

struct TrainStats {
  float loss_start = 0;
  float loss_end = 0;
  int steps = 0;
};

TransformerModel init_model(const ModelConfig& config, Rng& rng);

// Token + learned absolute position embeddings -> [B,T,h].
Tensor embed_tokens(const TransformerModel& model, const TokenMatrix& tokens);

// Tape-free float forward of a single block. When `tape` is given, the
// forward is recorded with only this block's gamma/beta watched.
Tensor block_forward(const TransformerBlock& block, const Tensor& x, const ModelConfig& config);
Var block_forward_diff(Tape& tape, const TransformerBlock& block, const Tensor& x, const ModelConfig& config,
                       const std::string& prefix);

std::pair<Tensor, BlockTrace> forward_with_trace(const TransformerModel& model, const TokenMatrix& tokens);

// Logits for the full batch, [B,T,vocab].
Tensor model_logits(const TransformerModel& model, const TokenMatrix& tokens);

std::vector<int> sample(const TransformerModel& model, const std::vector<int>& prompt, int n_tokens,
                        const SamplingPolicy& policy, Rng& rng);

// Next-token cross-entropy training with full-parameter Adam; the one place
// the tape watches every weight. Mutates the model in place.
TrainStats train_toy(TransformerModel& model, std::span<const int> corpus, int steps, float lr, Rng& rng,
                     const TrainOptions& opts = {});

// Deterministic (name, tensor) enumeration of all trainable parameters;
// shared by training, checkpointing, and the freeze-invariant checks.
std::vector<std::pair<std::string, Tensor*>> named_params(TransformerModel& model);
std::vector<std::pair<std::string, const Tensor*>> named_params(const TransformerModel& model);

// Picks one token from a logit row according to the policy. Greedy and top-k
// ties break toward the lowest token id.
int pick_token(const float* logits, int vocab, const SamplingPolicy& policy, Rng& rng);

}  // namespace ntq
