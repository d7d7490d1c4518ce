#pragma once

#include <cmath>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ntq/calib.hpp"
#include "ntq/model.hpp"
#include "ntq/quant.hpp"
#include "ntq/stats.hpp"

namespace ntq {

struct EvalResult {
  double ppl = 0;            // exp(mean next-token NLL)
  double last_word_acc = -1;  // -1 when not evaluated
  int64_t n_tokens = 0;
  std::string dataset;
};

// Per-layer divergence between two models on the same batch, each run along
// its own pipeline.
struct DivergenceReport {
  std::vector<double> dmu;   // mean_c |mu_f - mu_q| per layer
  std::vector<double> dvar;  // mean_c |var_f - var_q| per layer
  std::string model_a, model_b;
  int n_rows = 0;

  double mean_dmu() const;
  std::string render_text() const;
};

namespace eval_detail {

template <class M>
double window_nll(const M& model, std::span<const int> tokens, int stride, int64_t* scored) {
  const int W = model.config.max_seq_len;
  const int64_t len = static_cast<int64_t>(tokens.size());
  double nll = 0;
  int64_t count = 0;
  int64_t next = 1;  // first unscored target
  for (int64_t s = 0; next < len; s += stride) {
    const int64_t end = std::min<int64_t>(s + W, len);
    TokenMatrix ctx(1, static_cast<int>(end - s));
    for (int64_t t = s; t < end; ++t) ctx.at(0, static_cast<int>(t - s)) = tokens[static_cast<size_t>(t)];
    const Tensor logits = model_logits(model, ctx);
    const int V = model.config.vocab_size;
    for (int64_t t = std::max<int64_t>(next, s + 1); t < end; ++t) {
      const float* row = logits.data() + static_cast<size_t>(t - 1 - s) * V;
      double mx = row[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double sum = 0;
      for (int j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
      nll += -(row[tokens[static_cast<size_t>(t)]] - mx - std::log(sum));
      ++count;
    }
    next = end;
    if (end == len) break;
  }
  *scored = count;
  return count > 0 ? nll / static_cast<double>(count) : 0.0;
}

}  // namespace eval_detail

// Sliding-window perplexity; every position past the first window's start is
// scored exactly once.
template <class M>
EvalResult perplexity(const M& model, std::span<const int> tokens, int stride, std::string dataset = "") {
  if (static_cast<int>(tokens.size()) < model.config.max_seq_len) {
    throw ContractError("perplexity: text shorter than max_seq_len");
  }
  if (stride <= 0) throw ContractError("perplexity: stride must be positive");
  EvalResult r;
  r.dataset = std::move(dataset);
  r.ppl = std::exp(eval_detail::window_nll(model, tokens, stride, &r.n_tokens));
  return r;
}

using ClozeItem = std::pair<std::vector<int>, int>;  // (context, target)

// Fraction of items whose greedy next-token prediction hits the target;
// argmax ties break toward the lowest token id.
template <class M>
EvalResult last_word_accuracy(const M& model, const std::vector<ClozeItem>& items, std::string dataset = "") {
  if (items.empty()) throw ContractError("last_word_accuracy: no items");
  int hits = 0;
  for (const auto& [context, target] : items) {
    if (context.empty()) throw ContractError("last_word_accuracy: empty context");
    const int T = std::min<int>(static_cast<int>(context.size()), model.config.max_seq_len);
    TokenMatrix ctx(1, T);
    std::copy(context.end() - T, context.end(), ctx.ids.begin());
    const Tensor logits = model_logits(model, ctx);
    const int V = model.config.vocab_size;
    const float* row = logits.data() + static_cast<size_t>(T - 1) * V;
    int best = 0;
    for (int j = 1; j < V; ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best == target) ++hits;
  }
  EvalResult r;
  r.dataset = std::move(dataset);
  r.ppl = -1;
  r.last_word_acc = static_cast<double>(hits) / static_cast<double>(items.size());
  r.n_tokens = static_cast<int64_t>(items.size());
  return r;
}

// Deterministic cloze items: evenly spaced windows with the following token
// as the target.
std::vector<ClozeItem> make_cloze_items(std::span<const int> tokens, int context_len, int n_items);

template <class M>
DivergenceReport divergence_profile(const TransformerModel& float_model, const M& other,
                                    const CalibrationSet& batch) {
  if (!(float_model.config == other.config)) {
    throw ContractError("divergence_profile: model configs differ");
  }
  DivergenceReport rep;
  BlockTrace ta, tb;
  if (batch.is_gaussian()) {
    Tensor xa = batch.gaussian_batch, xb = batch.gaussian_batch;
    for (int l = 0; l < float_model.config.n_layers; ++l) {
      xa = block_forward(float_model.blocks[static_cast<size_t>(l)], xa, float_model.config);
      ta.outputs.push_back(xa);
    }
    for (int l = 0; l < other.config.n_layers; ++l) {
      if constexpr (std::is_same_v<M, TransformerModel>) {
        xb = block_forward(other.blocks[static_cast<size_t>(l)], xb, other.config);
      } else {
        xb = block_forward(other.blocks[static_cast<size_t>(l)], xb, other.config, other.qcfg.act_bits);
      }
      tb.outputs.push_back(xb);
    }
    rep.n_rows = batch.gaussian_batch.dim(0) * batch.gaussian_batch.dim(1);
  } else {
    const TokenMatrix toks = batch.token_matrix();
    ta = forward_with_trace(float_model, toks).second;
    tb = forward_with_trace(other, toks).second;
    rep.n_rows = toks.rows * toks.cols;
  }
  for (size_t l = 0; l < ta.outputs.size(); ++l) {
    const ActivationStats sa = channel_stats(ta.outputs[l]);
    const ActivationStats sb = channel_stats(tb.outputs[l]);
    rep.dmu.push_back(mean_abs_diff(sa.mu, sb.mu));
    rep.dvar.push_back(mean_abs_diff(sa.var, sb.var));
  }
  return rep;
}

// Side-by-side method comparison over datasets; text and CSV renderings agree
// to 4 fractional digits.
using AnyModelRef = std::variant<const TransformerModel*, const QuantizedModel*>;

struct CompareRow {
  std::string method;
  std::string dataset;
  EvalResult result;
};

struct ComparisonTable {
  std::vector<CompareRow> rows;
  std::string render_text() const;
  std::string render_csv() const;
};

ComparisonTable compare(const std::vector<std::pair<std::string, AnyModelRef>>& methods,
                        const std::vector<std::pair<std::string, std::vector<int>>>& datasets, int stride,
                        int cloze_items_per_dataset = 64);

}  // namespace ntq
