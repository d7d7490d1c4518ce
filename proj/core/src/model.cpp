#include "ntq/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ntq/block_graph.hpp"
#include "ntq/optim.hpp"

namespace ntq {

std::string norm_kind_name(NormKind k) { return k == NormKind::kLayerNorm ? "layernorm" : "rmsnorm"; }

NormKind norm_kind_from_name(const std::string& name) {
  if (name == "layernorm") return NormKind::kLayerNorm;
  if (name == "rmsnorm") return NormKind::kRmsNorm;
  throw ConfigError("unknown norm kind '" + name + "' (expected layernorm|rmsnorm)");
}

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  if (vocab_size <= 0) bad.push_back("vocab_size must be positive");
  if (hidden <= 0) bad.push_back("hidden must be positive");
  if (n_layers <= 0) bad.push_back("n_layers must be positive");
  if (n_heads <= 0) bad.push_back("n_heads must be positive");
  if (n_heads > 0 && hidden > 0 && hidden % n_heads != 0) bad.push_back("hidden must be divisible by n_heads");
  if (max_seq_len < 2) bad.push_back("max_seq_len must be >= 2");
  if (!(eps > 0)) bad.push_back("eps must be positive");
  if (!bad.empty()) {
    std::ostringstream os;
    for (size_t i = 0; i < bad.size(); ++i) os << (i ? "; " : "") << bad[i];
    throw ConfigError("invalid model config: " + os.str());
  }
}

namespace {

NormParams init_norm(const ModelConfig& cfg) {
  NormParams n;
  n.gamma = Tensor::full({cfg.hidden}, 1.0f);
  if (cfg.norm_kind == NormKind::kLayerNorm) n.beta = Tensor::zeros({cfg.hidden});
  return n;
}

}  // namespace

TransformerModel init_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  TransformerModel m;
  m.config = config;
  const int h = config.hidden;
  m.tok_emb = Tensor::randn({config.vocab_size, h}, rng, 0.02);
  m.pos_emb = Tensor::randn({config.max_seq_len, h}, rng, 0.01);
  // Residual-path projections are scaled down with depth, GPT-2 style.
  const double res_std = 0.02 / std::sqrt(2.0 * config.n_layers);
  m.blocks.resize(static_cast<size_t>(config.n_layers));
  for (auto& b : m.blocks) {
    b.ln1 = init_norm(config);
    b.ln2 = init_norm(config);
    b.wq = Tensor::randn({h, h}, rng, 0.02);
    b.wk = Tensor::randn({h, h}, rng, 0.02);
    b.wv = Tensor::randn({h, h}, rng, 0.02);
    b.wo = Tensor::randn({h, h}, rng, res_std);
    b.w_up = Tensor::randn({h, 4 * h}, rng, 0.02);
    b.w_down = Tensor::randn({4 * h, h}, rng, res_std);
  }
  m.final_norm = init_norm(config);
  return m;
}

Tensor embed_tokens(const TransformerModel& model, const TokenMatrix& tokens) {
  if (tokens.cols > model.config.max_seq_len) {
    throw ContractError("embed_tokens: sequence length " + std::to_string(tokens.cols) + " exceeds max_seq_len " +
                        std::to_string(model.config.max_seq_len));
  }
  Var tok = embedding<float>(nullptr, tokens, constant(model.tok_emb));
  TokenMatrix pos(tokens.rows, tokens.cols);
  for (int r = 0; r < tokens.rows; ++r) {
    for (int c = 0; c < tokens.cols; ++c) pos.at(r, c) = c;
  }
  Var pemb = embedding<float>(nullptr, pos, constant(model.pos_emb));
  return add(tok.value, pemb.value);
}

Tensor block_forward(const TransformerBlock& block, const Tensor& x, const ModelConfig& config) {
  BlockVars<float> p = block_constants<float>(block);
  return block_graph<float>(nullptr, p, constant(x), config, /*act_bits=*/0).value;
}

Var block_forward_diff(Tape& tape, const TransformerBlock& block, const Tensor& x, const ModelConfig& config,
                       const std::string& prefix) {
  BlockVars<float> p = block_constants<float>(block);
  p.ln1.gamma = tape.watch(block.ln1.gamma, prefix + ".ln1.gamma");
  if (block.ln1.has_beta()) p.ln1.beta = tape.watch(block.ln1.beta, prefix + ".ln1.beta");
  p.ln2.gamma = tape.watch(block.ln2.gamma, prefix + ".ln2.gamma");
  if (block.ln2.has_beta()) p.ln2.beta = tape.watch(block.ln2.beta, prefix + ".ln2.beta");
  return block_graph<float>(&tape, p, constant(x), config, /*act_bits=*/0);
}

namespace {

Tensor head_logits(const TransformerModel& model, const Tensor& hidden) {
  const int B = hidden.dim(0), T = hidden.dim(1), h = hidden.dim(2);
  Tensor x = hidden;
  if (model.config.norm_kind == NormKind::kLayerNorm) {
    x = layernorm_forward(x, model.final_norm.gamma, model.final_norm.beta, model.config.eps);
  } else {
    x = rmsnorm_forward(x, model.final_norm.gamma, model.config.eps);
  }
  Tensor logits = matmul_nt(x.reshaped({B * T, h}), model.tok_emb);
  return logits.reshaped({B, T, model.config.vocab_size});
}

}  // namespace

std::pair<Tensor, BlockTrace> forward_with_trace(const TransformerModel& model, const TokenMatrix& tokens) {
  for (const int id : tokens.ids) {
    if (id < 0 || id >= model.config.vocab_size) {
      throw InputError("forward_with_trace: token id " + std::to_string(id) + " out of range");
    }
  }
  BlockTrace trace;
  Tensor x = embed_tokens(model, tokens);
  for (const TransformerBlock& b : model.blocks) {
    trace.inputs.push_back(x);
    x = block_forward(b, x, model.config);
    trace.outputs.push_back(x);
  }
  return {head_logits(model, x), std::move(trace)};
}

Tensor model_logits(const TransformerModel& model, const TokenMatrix& tokens) {
  return forward_with_trace(model, tokens).first;
}

int pick_token(const float* logits, int vocab, const SamplingPolicy& policy, Rng& rng) {
  switch (policy.kind) {
    case SamplingPolicy::Kind::kGreedy: {
      int best = 0;
      for (int j = 1; j < vocab; ++j) {
        if (logits[j] > logits[best]) best = j;
      }
      return best;
    }
    case SamplingPolicy::Kind::kTemperature: {
      const double tau = std::max(policy.temperature, 1e-9);
      double mx = logits[0];
      for (int j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
      std::vector<double> p(static_cast<size_t>(vocab));
      double sum = 0;
      for (int j = 0; j < vocab; ++j) {
        p[static_cast<size_t>(j)] = std::exp((logits[j] - mx) / tau);
        sum += p[static_cast<size_t>(j)];
      }
      const double u = rng.next_double() * sum;
      double cum = 0;
      for (int j = 0; j < vocab; ++j) {
        cum += p[static_cast<size_t>(j)];
        if (u < cum) return j;
      }
      return vocab - 1;
    }
    case SamplingPolicy::Kind::kTopK: {
      const int k = std::min(std::max(policy.top_k, 1), vocab);
      std::vector<int> idx(static_cast<size_t>(vocab));
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;
      });
      const double tau = std::max(policy.temperature, 1e-9);
      double mx = logits[idx[0]];
      std::vector<double> p(static_cast<size_t>(k));
      double sum = 0;
      for (int j = 0; j < k; ++j) {
        p[static_cast<size_t>(j)] = std::exp((logits[idx[static_cast<size_t>(j)]] - mx) / tau);
        sum += p[static_cast<size_t>(j)];
      }
      const double u = rng.next_double() * sum;
      double cum = 0;
      for (int j = 0; j < k; ++j) {
        cum += p[static_cast<size_t>(j)];
        if (u < cum) return idx[static_cast<size_t>(j)];
      }
      return idx[static_cast<size_t>(k - 1)];
    }
  }
  throw ContractError("pick_token: unknown policy");
}

std::vector<int> sample(const TransformerModel& model, const std::vector<int>& prompt, int n_tokens,
                        const SamplingPolicy& policy, Rng& rng) {
  if (prompt.empty()) throw ContractError("sample: prompt must be non-empty");
  if (n_tokens < 1) throw ContractError("sample: n_tokens must be >= 1");
  std::vector<int> seq = prompt;
  for (int step = 0; step < n_tokens; ++step) {
    const int ctx_len = std::min<int>(static_cast<int>(seq.size()), model.config.max_seq_len);
    TokenMatrix ctx(1, ctx_len);
    std::copy(seq.end() - ctx_len, seq.end(), ctx.ids.begin());
    Tensor logits = model_logits(model, ctx);
    const float* last = logits.data() + static_cast<size_t>(ctx_len - 1) * model.config.vocab_size;
    seq.push_back(pick_token(last, model.config.vocab_size, policy, rng));
  }
  return seq;
}

std::vector<std::pair<std::string, Tensor*>> named_params(TransformerModel& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("tok_emb", &model.tok_emb);
  out.emplace_back("pos_emb", &model.pos_emb);
  for (size_t l = 0; l < model.blocks.size(); ++l) {
    TransformerBlock& b = model.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gamma", &b.ln1.gamma);
    if (b.ln1.has_beta()) out.emplace_back(p + "ln1.beta", &b.ln1.beta);
    out.emplace_back(p + "ln2.gamma", &b.ln2.gamma);
    if (b.ln2.has_beta()) out.emplace_back(p + "ln2.beta", &b.ln2.beta);
    out.emplace_back(p + "wq", &b.wq);
    out.emplace_back(p + "wk", &b.wk);
    out.emplace_back(p + "wv", &b.wv);
    out.emplace_back(p + "wo", &b.wo);
    out.emplace_back(p + "w_up", &b.w_up);
    out.emplace_back(p + "w_down", &b.w_down);
  }
  out.emplace_back("final_norm.gamma", &model.final_norm.gamma);
  if (model.final_norm.has_beta()) out.emplace_back("final_norm.beta", &model.final_norm.beta);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_params(const TransformerModel& model) {
  auto mut = named_params(const_cast<TransformerModel&>(model));
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(n, t);
  return out;
}

TrainStats train_toy(TransformerModel& model, std::span<const int> corpus, int steps, float lr, Rng& rng,
                     const TrainOptions& opts) {
  if (static_cast<int64_t>(corpus.size()) < 10LL * model.config.max_seq_len) {
    throw ContractError("train_toy: corpus must hold at least 10*max_seq_len tokens");
  }
  for (const int id : corpus) {
    if (id < 0 || id >= model.config.vocab_size) throw InputError("train_toy: corpus token id out of range");
  }
  const int T = std::min(opts.seq_len, model.config.max_seq_len);
  const int B = std::max(1, opts.batch);
  if (static_cast<int64_t>(corpus.size()) < T + 2) throw ContractError("train_toy: corpus shorter than seq_len");

  TrainStats stats;
  stats.steps = steps;
  AdamState adam;
  auto params = named_params(model);

  for (int step = 0; step < steps; ++step) {
    TokenMatrix inputs(B, T);
    std::vector<int> targets(static_cast<size_t>(B) * T);
    for (int b = 0; b < B; ++b) {
      const auto start = rng.uniform_int(corpus.size() - static_cast<size_t>(T) - 1);
      for (int t = 0; t < T; ++t) {
        inputs.at(b, t) = corpus[start + static_cast<size_t>(t)];
        targets[static_cast<size_t>(b) * T + t] = corpus[start + static_cast<size_t>(t) + 1];
      }
    }

    Tape tape;
    std::map<std::string, Var> vars;
    for (auto& [name, tensor] : params) vars.emplace(name, tape.watch(*tensor, name));

    TokenMatrix pos(B, T);
    for (int b = 0; b < B; ++b) {
      for (int t = 0; t < T; ++t) pos.at(b, t) = t;
    }
    Var x = add(&tape, embedding(&tape, inputs, vars.at("tok_emb")), embedding(&tape, pos, vars.at("pos_emb")));
    for (size_t l = 0; l < model.blocks.size(); ++l) {
      const TransformerBlock& b = model.blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      BlockVars<float> bv;
      bv.ln1.gamma = vars.at(p + "ln1.gamma");
      if (b.ln1.has_beta()) {
        bv.ln1.beta = vars.at(p + "ln1.beta");
        bv.ln1.has_beta = true;
      }
      bv.ln2.gamma = vars.at(p + "ln2.gamma");
      if (b.ln2.has_beta()) {
        bv.ln2.beta = vars.at(p + "ln2.beta");
        bv.ln2.has_beta = true;
      }
      bv.wq = vars.at(p + "wq");
      bv.wk = vars.at(p + "wk");
      bv.wv = vars.at(p + "wv");
      bv.wo = vars.at(p + "wo");
      bv.w_up = vars.at(p + "w_up");
      bv.w_down = vars.at(p + "w_down");
      x = block_graph(&tape, bv, x, model.config, /*act_bits=*/0);
    }
    Var hidden = x;
    Var normed = model.config.norm_kind == NormKind::kLayerNorm
                     ? layernorm(&tape, hidden, vars.at("final_norm.gamma"), vars.at("final_norm.beta"),
                                 model.config.eps)
                     : rmsnorm(&tape, hidden, vars.at("final_norm.gamma"), model.config.eps);
    Var logits = matmul_nt(&tape, reshape(&tape, normed, {B * T, model.config.hidden}), vars.at("tok_emb"));
    Var loss = cross_entropy(&tape, logits, targets);

    const float loss_val = loss.value[0];
    if (!std::isfinite(loss_val)) {
      throw NumericError("train_toy: training diverged, non-finite loss at step " + std::to_string(step));
    }
    if (step == 0) stats.loss_start = loss_val;
    stats.loss_end = loss_val;

    auto grads = tape.backward(loss);
    adam_step(params, grads, adam, lr);
  }
  return stats;
}

}  // namespace ntq
