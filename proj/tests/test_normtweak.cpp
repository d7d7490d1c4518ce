#include <doctest.h>

#include <cmath>

#include "ntq/normtweak.hpp"

using namespace ntq;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.vocab_size = 64;
  c.hidden = 32;
  c.n_layers = 3;
  c.n_heads = 4;
  c.max_seq_len = 32;
  return c;
}

CalibrationSet toy_calib(const TransformerModel& model, int n = 4, int len = 16) {
  CalibrationConfig cfg;
  cfg.n_samples = n;
  cfg.token_length = len;
  cfg.first_token_whitelist = {1, 2, 3, 5, 8};
  return generate_calibration(model, cfg, Rng(1001));
}

bool same_codes(const QuantizedLinear& a, const QuantizedLinear& b) {
  return a.codes == b.codes && a.scales == b.scales;
}

}  // namespace

TEST_CASE("channel_stats: hand values and contracts") {
  const Tensor c = Tensor::full({2, 3}, 4.5f);
  const ActivationStats s = channel_stats(c);
  for (int j = 0; j < 3; ++j) {
    CHECK(s.mu[j] == doctest::Approx(4.5));
    CHECK(s.var[j] == doctest::Approx(0.0));
  }

  const Tensor two = Tensor::from({2, 1}, {1, 3});
  const ActivationStats s2 = channel_stats(two);
  CHECK(s2.mu[0] == doctest::Approx(2.0));
  CHECK(s2.var[0] == doctest::Approx(1.0));  // population variance

  CHECK_THROWS_AS(channel_stats(Tensor::from({1, 4}, {1, 2, 3, 4})), ContractError);
}

TEST_CASE("channel_stats: invariant under position permutation") {
  Rng rng(81);
  const Tensor x = Tensor::randn({8, 5}, rng);
  Tensor perm({8, 5});
  const int order[8] = {3, 7, 1, 0, 6, 2, 5, 4};
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 5; ++c) perm.at(r, c) = x.at(order[r], c);
  }
  const ActivationStats a = channel_stats(x), b = channel_stats(perm);
  for (int c = 0; c < 5; ++c) {
    CHECK(a.mu[c] == doctest::Approx(b.mu[c]).epsilon(1e-6));
    CHECK(a.var[c] == doctest::Approx(b.var[c]).epsilon(1e-5));
  }
}

TEST_CASE("loss_dist: trivial and hand-computed values") {
  ActivationStats f, q;
  f.mu = Tensor::from({2}, {1, 2});
  f.var = Tensor::from({2}, {0.5f, 0.25f});
  q = f;
  CHECK(loss_dist(f, q) == doctest::Approx(0.0));

  ActivationStats f1, q1;
  f1.mu = Tensor::from({1}, {0});
  f1.var = Tensor::from({1}, {1});
  q1.mu = Tensor::from({1}, {1});
  q1.var = Tensor::from({1}, {1});
  CHECK(loss_dist(f1, q1) == doctest::Approx(1.0));

  // C=2, mu diffs (0.5, -0.5), var diffs (0.25, 0) -> 0.625
  ActivationStats f2, q2;
  f2.mu = Tensor::from({2}, {1.0f, 1.0f});
  q2.mu = Tensor::from({2}, {0.5f, 1.5f});
  f2.var = Tensor::from({2}, {1.0f, 2.0f});
  q2.var = Tensor::from({2}, {0.75f, 2.0f});
  CHECK(loss_dist(f2, q2) == doctest::Approx(0.625));

  ActivationStats wrong;
  wrong.mu = Tensor({3});
  wrong.var = Tensor({3});
  CHECK_THROWS_AS(loss_dist(f2, wrong), ContractError);
}

TEST_CASE("loss_dist: symmetric under identical channel permutation") {
  Rng rng(82);
  const int C = 12;
  ActivationStats f, q;
  f.mu = Tensor::randn({C}, rng);
  f.var = Tensor::randn({C}, rng, 0.3);
  q.mu = Tensor::randn({C}, rng);
  q.var = Tensor::randn({C}, rng, 0.3);
  const double base = loss_dist(f, q);
  ActivationStats fp = f, qp = q;
  for (int c = 0; c < C; ++c) {
    fp.mu[c] = f.mu[(c + 5) % C];
    fp.var[c] = f.var[(c + 5) % C];
    qp.mu[c] = q.mu[(c + 5) % C];
    qp.var[c] = q.var[(c + 5) % C];
  }
  CHECK(loss_dist(fp, qp) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("loss_mse / loss_kl: trivial values and non-negativity") {
  const Tensor a = Tensor::from({1, 2}, {0, 0});
  const Tensor b = Tensor::from({1, 2}, {1, 1});
  CHECK(loss_mse(a, a) == doctest::Approx(0.0));
  CHECK(loss_mse(a, b) == doctest::Approx(1.0));
  CHECK(loss_kl(a, a) == doctest::Approx(0.0));

  Rng rng(83);
  for (int t = 0; t < 10; ++t) {
    Rng r = rng.substream(static_cast<uint64_t>(t));
    const Tensor f = Tensor::randn({4, 8}, r);
    const Tensor q = Tensor::randn({4, 8}, r);
    CHECK(loss_kl(f, q) >= -1e-12);
  }
}

TEST_CASE("traced losses match their scalar forms") {
  Rng rng(84);
  const Tensor f = Tensor::randn({3, 4, 6}, rng);
  const Tensor q = Tensor::randn({3, 4, 6}, rng);
  Tape t1;
  Var qv = t1.watch(q, "q");
  CHECK(loss_dist_graph<float>(&t1, f, qv).value[0] ==
        doctest::Approx(loss_dist(channel_stats(f), channel_stats(q))).epsilon(1e-4));
  Tape t2;
  Var qv2 = t2.watch(q, "q");
  CHECK(loss_mse_graph<float>(&t2, f, qv2).value[0] == doctest::Approx(loss_mse(f, q)).epsilon(1e-4));
  Tape t3;
  Var qv3 = t3.watch(q, "q");
  CHECK(loss_kl_graph<float>(&t3, f, qv3).value[0] == doctest::Approx(loss_kl(f, q)).epsilon(1e-3));
}

TEST_CASE("layer_lr: exact schedule") {
  TweakConfig cfg;
  CHECK(layer_lr(cfg, 0, 4) == doctest::Approx(1e-5).epsilon(1e-12));

  TweakConfig flat;
  flat.lr_scale = 0;
  for (int i = 0; i < 4; ++i) CHECK(layer_lr(flat, i, 4) == 1e-5);

  TweakConfig stepped;
  stepped.lr0 = 1e-5;
  stepped.lr_scale = 1.0;
  // i ranges below L, so the max attained value is lr0 * (1 + (L-1)/L).
  CHECK(layer_lr(stepped, 3, 4) == doctest::Approx(1e-5 * 1.75).epsilon(1e-12));
  const TweakSchedule sched = make_schedule(stepped, 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(sched.lr[static_cast<size_t>(i)] == 1e-5 * (1.0 + static_cast<double>(i) / 8.0));
    if (i > 0) CHECK(sched.lr[static_cast<size_t>(i)] >= sched.lr[static_cast<size_t>(i - 1)]);
  }
  CHECK_THROWS_AS(layer_lr(cfg, 4, 4), ContractError);
}

TEST_CASE("adam_step: zero gradient, hand value, elementwise independence") {
  Tensor p = Tensor::from({2}, {1.0f, -2.0f});
  std::vector<std::pair<std::string, Tensor*>> params{{"p", &p}};
  AdamState st;
  std::map<std::string, Tensor> grads;
  grads.emplace("p", Tensor::zeros({2}));
  adam_step(params, grads, st, 1e-3);
  CHECK(p == Tensor::from({2}, {1.0f, -2.0f}));

  // First step with g=1: update = -lr * 1/(1 + eps') ~ -9.99999e-4.
  Tensor q = Tensor::from({2}, {0.0f, 0.0f});
  std::vector<std::pair<std::string, Tensor*>> params2{{"q", &q}};
  AdamState st2;
  std::map<std::string, Tensor> grads2;
  grads2.emplace("q", Tensor::full({2}, 1.0f));
  adam_step(params2, grads2, st2, 1e-3);
  CHECK(q[0] == doctest::Approx(-9.99999e-4).epsilon(1e-6));
  CHECK(q[0] == q[1]);  // identical gradients update identically

  std::map<std::string, Tensor> nan_grads;
  Tensor bad = Tensor::full({2}, 1.0f);
  bad[0] = std::numeric_limits<float>::quiet_NaN();
  nan_grads.emplace("q", bad);
  CHECK_THROWS_AS(adam_step(params2, nan_grads, st2, 1e-3), NumericError);
}

TEST_CASE("tweak config validation") {
  TweakConfig bad;
  bad.lr0 = 0;
  bad.iters = -1;
  try {
    bad.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("lr0") != std::string::npos);
    CHECK(msg.find("iters") != std::string::npos);
  }
}

TEST_CASE("tweak_model: passthrough quantizer leaves norms in place, loss 0") {
  const ModelConfig mc = toy_config();
  Rng rng(85);
  const TransformerModel fm = init_model(mc, rng);
  const CalibrationSet calib = toy_calib(fm);

  QuantConfig qcfg;
  qcfg.bits = 16;
  TweakConfig tcfg;  // defaults: one iteration, dist loss
  const TweakOutput out = tweak_model(fm, QuantizerKind::kNone, calib, qcfg, tcfg);

  for (const auto& l : out.report.layers) {
    CHECK(l.loss_pre == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(l.loss_post == doctest::Approx(0.0).epsilon(1e-9));
  }
  for (size_t l = 0; l < fm.blocks.size(); ++l) {
    CHECK(out.model.blocks[l].f.ln1.gamma == fm.blocks[l].ln1.gamma);
    CHECK(out.model.blocks[l].f.ln2.beta == fm.blocks[l].ln2.beta);
  }
  TokenMatrix toks = calib.token_matrix();
  const Tensor ref = model_logits(fm, toks);
  const Tensor got = model_logits(out.model, toks);
  for (int64_t i = 0; i < ref.numel(); ++i) CHECK(std::abs(ref[i] - got[i]) <= 1e-4f);
}

TEST_CASE("tweak_model: freeze invariant, only norm parameters move") {
  const ModelConfig mc = toy_config();
  Rng rng(86);
  const TransformerModel fm = init_model(mc, rng);
  const CalibrationSet calib = toy_calib(fm);

  QuantConfig qcfg;
  qcfg.bits = 2;
  qcfg.granularity = Granularity::kPerGroup;
  qcfg.group_size = 16;
  TweakConfig plain;
  plain.iters = 0;
  TweakConfig tweak;
  tweak.iters = 2;
  tweak.lr0 = 1e-3;  // large enough that norm movement is visible

  // RTN codes depend only on the float weights, so the tweaked run must
  // reproduce the plain run's quantized tensors bitwise.
  const TweakOutput base = tweak_model(fm, QuantizerKind::kRtn, calib, qcfg, plain);
  const TweakOutput tuned = tweak_model(fm, QuantizerKind::kRtn, calib, qcfg, tweak);

  REQUIRE(base.model.blocks.size() == tuned.model.blocks.size());
  bool any_norm_moved = false;
  for (size_t l = 0; l < base.model.blocks.size(); ++l) {
    const QuantizedBlock& a = base.model.blocks[l];
    const QuantizedBlock& b = tuned.model.blocks[l];
    CHECK(same_codes(a.qwq, b.qwq));
    CHECK(same_codes(a.qwk, b.qwk));
    CHECK(same_codes(a.qwv, b.qwv));
    CHECK(same_codes(a.qwo, b.qwo));
    CHECK(same_codes(a.qw_up, b.qw_up));
    CHECK(same_codes(a.qw_down, b.qw_down));
    CHECK(a.f.wq == b.f.wq);
    CHECK(a.f.w_down == b.f.w_down);
    if (!(a.f.ln1.gamma == b.f.ln1.gamma) || !(a.f.ln2.gamma == b.f.ln2.gamma)) any_norm_moved = true;
  }
  CHECK(base.model.tok_emb == tuned.model.tok_emb);
  CHECK(base.model.pos_emb == tuned.model.pos_emb);
  CHECK(any_norm_moved);
  for (const auto& l : tuned.report.layers) CHECK(l.steps_applied == 2);

  // GPTQ codes at layer l depend on tweaked inputs from layers below, so the
  // freeze check uses the fingerprint recorded at quantize time.
  const TweakOutput gq = tweak_model(fm, QuantizerKind::kGptq, calib, qcfg, tweak);
  for (size_t l = 0; l < gq.model.blocks.size(); ++l) {
    CHECK(quantized_block_fingerprint(gq.model.blocks[l], false) == gq.report.layers[l].quant_fingerprint);
  }
}

TEST_CASE("tweak_model: deterministic given identical inputs") {
  const ModelConfig mc = toy_config();
  Rng rng(87);
  const TransformerModel fm = init_model(mc, rng);
  const CalibrationSet calib = toy_calib(fm);
  QuantConfig qcfg;
  qcfg.bits = 2;
  qcfg.granularity = Granularity::kPerGroup;
  qcfg.group_size = 16;
  TweakConfig tcfg;
  const TweakOutput a = tweak_model(fm, QuantizerKind::kGptq, calib, qcfg, tcfg);
  const TweakOutput b = tweak_model(fm, QuantizerKind::kGptq, calib, qcfg, tcfg);
  for (size_t l = 0; l < a.model.blocks.size(); ++l) {
    CHECK(a.model.blocks[l].f.ln1.gamma == b.model.blocks[l].f.ln1.gamma);
    CHECK(a.model.blocks[l].f.ln2.gamma == b.model.blocks[l].f.ln2.gamma);
    CHECK(same_codes(a.model.blocks[l].qwq, b.model.blocks[l].qwq));
  }
  for (size_t l = 0; l < a.report.layers.size(); ++l) {
    CHECK(a.report.layers[l].loss_pre == b.report.layers[l].loss_pre);
    CHECK(a.report.layers[l].loss_post == b.report.layers[l].loss_post);
  }
}

TEST_CASE("tweak_model: per-layer loss drops on the calibration batch") {
  const ModelConfig mc = toy_config();
  Rng rng(88);
  const TransformerModel fm = init_model(mc, rng);
  const CalibrationSet calib = toy_calib(fm, 4, 16);
  QuantConfig qcfg;
  qcfg.bits = 2;
  qcfg.granularity = Granularity::kPerGroup;
  qcfg.group_size = 16;
  TweakConfig tcfg;
  tcfg.iters = 8;
  tcfg.lr0 = 1e-3;  // exaggerated rate to make the descent visible at toy scale
  const TweakOutput out = tweak_model(fm, QuantizerKind::kGptq, calib, qcfg, tcfg);
  int improved = 0;
  for (const auto& l : out.report.layers) {
    if (l.loss_post < l.loss_pre) ++improved;
  }
  CHECK(improved * 10 >= static_cast<int>(out.report.layers.size()) * 8);  // >= 80% of layers
}

TEST_CASE("tweak_model: quantizer kinds and act quantization run end to end") {
  const ModelConfig mc = toy_config();
  Rng rng(89);
  const TransformerModel fm = init_model(mc, rng);
  const CalibrationSet calib = toy_calib(fm);

  QuantConfig w4a8;
  w4a8.bits = 4;
  w4a8.act_bits = 8;
  TweakConfig tcfg;
  const TweakOutput sq = tweak_model(fm, QuantizerKind::kSmoothQuant, calib, w4a8, tcfg);
  CHECK(sq.report.layers.size() == static_cast<size_t>(mc.n_layers));
  TokenMatrix toks = calib.token_matrix();
  CHECK(model_logits(sq.model, toks).all_finite());

  QuantConfig w4;
  w4.bits = 4;
  const TweakOutput rtn = tweak_model(fm, QuantizerKind::kRtn, calib, w4, tcfg);
  CHECK(model_logits(rtn.model, toks).all_finite());
}

TEST_CASE("tweak_model: gaussian calibration batch drives the pipeline") {
  const ModelConfig mc = toy_config();
  Rng rng(90);
  const TransformerModel fm = init_model(mc, rng);
  const CalibrationSet real = toy_calib(fm, 4, 16);
  const Tensor emb = calibration_embeddings(fm, real);
  CalibrationConfig gcfg;
  gcfg.source = CalibSource::kRandomGaussian;
  gcfg.n_samples = 4;
  gcfg.token_length = 16;
  const CalibrationSet gauss = random_gaussian(channel_stats(emb), gcfg, mc.hidden, Rng(31));

  QuantConfig qcfg;
  qcfg.bits = 4;
  TweakConfig tcfg;
  const TweakOutput out = tweak_model(fm, QuantizerKind::kGptq, gauss, qcfg, tcfg);
  CHECK(out.report.layers.size() == static_cast<size_t>(mc.n_layers));
}

TEST_CASE("tweak_model: lr grid search picks a candidate and stays deterministic") {
  const ModelConfig mc = toy_config();
  Rng rng(91);
  const TransformerModel fm = init_model(mc, rng);
  const CalibrationSet calib = toy_calib(fm, 6, 16);
  QuantConfig qcfg;
  qcfg.bits = 2;
  qcfg.granularity = Granularity::kPerGroup;
  qcfg.group_size = 16;
  TweakConfig tcfg;
  tcfg.lr_search = {3e-6, 1e-5, 3e-5};
  const TweakOutput a = tweak_model(fm, QuantizerKind::kRtn, calib, qcfg, tcfg);
  const TweakOutput b = tweak_model(fm, QuantizerKind::kRtn, calib, qcfg, tcfg);
  CHECK(a.report.lr0 == b.report.lr0);
  const bool in_grid = a.report.lr0 == 3e-6 || a.report.lr0 == 1e-5 || a.report.lr0 == 3e-5;
  CHECK(in_grid);
}
