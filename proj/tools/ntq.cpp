// ntq — train, quantize, norm-tweak and evaluate toy decoder-only
// transformers. Every command reads one JSON run config; flags override
// individual fields, and all outputs under --out are byte-reproducible for a
// fixed config+seed (wall-clock timings go to a separate timing.json).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ntq/checkpoint.hpp"
#include "ntq/eval.hpp"
#include "ntq/normtweak.hpp"
#include "ntq/runconfig.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ntq;

namespace {

struct CliState {
  RunConfig cfg;
  std::string bits_flag;       // set via --bits
  std::string calib_flag;      // set via --calib
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw InputError("write failed for '" + path.string() + "'");
}

json provenance(const RunConfig& cfg) { return json::parse(cfg.provenance_json()); }

void require(std::vector<std::string>& errs, bool ok, const std::string& msg) {
  if (!ok) errs.push_back(msg);
}

void finish_validation(const std::vector<std::string>& errs) {
  if (errs.empty()) return;
  std::string msg;
  for (size_t i = 0; i < errs.size(); ++i) msg += (i ? "; " : "") + errs[i];
  throw ConfigError(msg);
}

QuantConfig quant_config(const RunConfig& cfg) {
  QuantConfig q = cfg.quant;
  q.granularity = q.group_size > 0 ? Granularity::kPerGroup : Granularity::kPerChannel;
  return q;
}

CalibrationConfig calibration_config(const RunConfig& cfg) {
  CalibrationConfig c;
  c.n_samples = cfg.calib.n_samples;
  c.token_length = cfg.calib.token_length;
  c.top_fraction = cfg.calib.top_fraction;
  c.stage1_len = cfg.calib.stage1_len;
  c.stage1_temperature = cfg.calib.stage1_temperature;
  c.stage2_top_k = cfg.calib.stage2_top_k;
  c.stage2_policy =
      cfg.calib.stage2 == "top_k" ? SamplingPolicy::Kind::kTopK : SamplingPolicy::Kind::kGreedy;
  if (cfg.calib.source == "generated") {
    c.source = CalibSource::kGenerated;
  } else if (cfg.calib.source == "gaussian") {
    c.source = CalibSource::kRandomGaussian;
  } else if (cfg.calib.source.rfind("real:", 0) == 0) {
    c.source = CalibSource::kReal;
    c.real_path = cfg.calib.source.substr(5);
  } else {
    throw ConfigError("calib.source must be generated, gaussian, or real:<path>");
  }
  return c;
}

std::string calib_corpus_path(const RunConfig& cfg) {
  return cfg.calib.corpus.empty() ? cfg.train.corpus : cfg.calib.corpus;
}

fs::path sidecar_of(const std::string& bin_path) {
  fs::path p(bin_path);
  p.replace_extension(".json");
  return p;
}

int cmd_train(const RunConfig& cfg) {
  std::vector<std::string> errs;
  require(errs, !cfg.train.corpus.empty(), "train.corpus is required");
  require(errs, cfg.train.corpus.empty() || fs::exists(cfg.train.corpus),
          "train.corpus '" + cfg.train.corpus + "' does not exist");
  require(errs, cfg.train.steps >= 0, "train.steps must be >= 0");
  require(errs, cfg.train.lr > 0, "train.lr must be positive");
  finish_validation(errs);
  cfg.model.validate();

  Rng rng(cfg.seed);
  Rng init_rng = rng.substream("init");
  Rng train_rng = rng.substream("train");
  TransformerModel model = init_model(cfg.model, init_rng);
  const std::vector<int> corpus = load_corpus(cfg.train.corpus);
  TrainOptions opts;
  opts.batch = cfg.train.batch;
  opts.seq_len = cfg.train.seq_len;
  const TrainStats stats =
      train_toy(model, corpus, cfg.train.steps, static_cast<float>(cfg.train.lr), train_rng, opts);

  const fs::path out(cfg.out);
  save_checkpoint(model, (out / "model").string());
  write_text(out / "model" / "provenance.json", provenance(cfg).dump(2) + "\n");
  json rep;
  rep["loss_start"] = stats.loss_start;
  rep["loss_end"] = stats.loss_end;
  rep["steps"] = stats.steps;
  rep["corpus_tokens"] = corpus.size();
  rep["provenance"] = provenance(cfg);
  write_text(out / "train_report.json", rep.dump(2) + "\n");
  std::cout << "trained " << stats.steps << " steps, loss " << stats.loss_start << " -> " << stats.loss_end
            << ", checkpoint at " << (out / "model").string() << "\n";
  return 0;
}

int cmd_gendata(const RunConfig& cfg) {
  std::vector<std::string> errs;
  require(errs, !cfg.checkpoint.empty(), "checkpoint is required");
  require(errs, cfg.checkpoint.empty() || fs::exists(cfg.checkpoint),
          "checkpoint '" + cfg.checkpoint + "' does not exist");
  CalibrationConfig ccfg = calibration_config(cfg);
  if (ccfg.source != CalibSource::kReal) {
    const std::string corpus = calib_corpus_path(cfg);
    require(errs, !corpus.empty(), "calib.corpus (or train.corpus) is required for whitelist/reference stats");
    require(errs, corpus.empty() || fs::exists(corpus), "corpus '" + corpus + "' does not exist");
  } else {
    require(errs, fs::exists(ccfg.real_path), "real calibration file '" + ccfg.real_path + "' does not exist");
  }
  finish_validation(errs);

  TransformerModel model = load_checkpoint(cfg.checkpoint);
  Rng rng = Rng(cfg.seed).substream("gendata");
  CalibrationSet set;
  if (ccfg.source == CalibSource::kGenerated) {
    const std::vector<int> corpus = load_corpus(calib_corpus_path(cfg));
    ccfg.first_token_whitelist = build_whitelist(corpus, ccfg.top_fraction);
    set = generate_calibration(model, ccfg, rng);
  } else if (ccfg.source == CalibSource::kReal) {
    set = load_real(ccfg.real_path, ccfg, model.config.vocab_size, rng);
  } else {
    // Gaussian control: reference stats come from real windows of the corpus.
    const std::vector<int> corpus = load_corpus(calib_corpus_path(cfg));
    CalibrationConfig ref_cfg = ccfg;
    ref_cfg.source = CalibSource::kReal;
    CalibrationSet ref = load_real(calib_corpus_path(cfg), ref_cfg, model.config.vocab_size, rng.substream("ref"));
    const Tensor emb = embed_tokens(model, ref.token_matrix());
    set = random_gaussian(channel_stats(emb), ccfg, model.config.hidden, rng);
  }

  const fs::path out(cfg.out);
  const std::string bin = cfg.calib.file.empty() ? (out / "calib.bin").string() : cfg.calib.file;
  fs::create_directories(fs::path(bin).parent_path().empty() ? out : fs::path(bin).parent_path());
  save_calibration(set, bin, sidecar_of(bin).string());
  // Re-emit the sidecar with provenance attached.
  std::ifstream side_in(sidecar_of(bin));
  json side;
  side_in >> side;
  side["provenance"] = provenance(cfg);
  write_text(sidecar_of(bin), side.dump(2) + "\n");
  std::cout << "calibration set (" << set.source << ", " << set.n_samples() << " samples) at " << bin << "\n";
  return 0;
}

CalibrationSet load_calib_for(const RunConfig& cfg) {
  const std::string bin = cfg.calib.file;
  if (bin.empty()) throw ConfigError("calib.file is required (run gendata first)");
  if (!fs::exists(bin)) throw ConfigError("calibration file '" + bin + "' does not exist");
  return load_calibration(bin, sidecar_of(bin).string());
}

json report_to_json(const TweakReport& rep, bool with_timing) {
  json layers = json::array();
  for (const TweakLayerReport& l : rep.layers) {
    json e;
    e["layer"] = l.layer;
    e["lr"] = l.lr;
    e["loss_pre"] = l.loss_pre;
    e["loss_post"] = l.loss_post;
    e["dmu_pre"] = l.dmu_pre;
    e["dmu_post"] = l.dmu_post;
    e["steps_applied"] = l.steps_applied;
    if (!l.warning.empty()) e["warning"] = l.warning;
    if (with_timing) e["wall_ms"] = l.wall_ms;
    layers.push_back(std::move(e));
  }
  json j;
  j["quantizer"] = rep.quantizer;
  j["loss"] = rep.loss_kind;
  j["iters"] = rep.iters;
  j["lr0"] = rep.lr0;
  j["lr_scale"] = rep.lr_scale;
  j["layers"] = std::move(layers);
  if (with_timing) j["total_ms"] = rep.total_ms;
  return j;
}

int run_quant_pipeline(const RunConfig& cfg, int iters, const char* report_name) {
  std::vector<std::string> errs;
  require(errs, !cfg.checkpoint.empty(), "checkpoint is required");
  require(errs, cfg.checkpoint.empty() || fs::exists(cfg.checkpoint),
          "checkpoint '" + cfg.checkpoint + "' does not exist");
  const QuantizerKind kind = quantizer_from_name(cfg.quantizer);
  const QuantConfig qcfg = quant_config(cfg);
  const bool needs_calib = iters > 0 || kind == QuantizerKind::kGptq || kind == QuantizerKind::kSmoothQuant;
  if (needs_calib) {
    require(errs, !cfg.calib.file.empty(), "calib.file is required for this quantizer");
    require(errs, cfg.calib.file.empty() || fs::exists(cfg.calib.file),
            "calibration file '" + cfg.calib.file + "' does not exist");
  }
  finish_validation(errs);

  TransformerModel model = load_checkpoint(cfg.checkpoint);
  TweakConfig tcfg = cfg.tweak;
  tcfg.iters = iters;

  TweakOutput out;
  if (needs_calib) {
    out = tweak_model(model, kind, load_calib_for(cfg), qcfg, tcfg);
  } else {
    out.model = quantize_model_direct(model, qcfg, kind);
  }

  const fs::path outdir(cfg.out);
  save_quantized_checkpoint(out.model, (outdir / "quantized").string());
  write_text(outdir / "quantized" / "provenance.json", provenance(cfg).dump(2) + "\n");
  json rep = report_to_json(out.report, /*with_timing=*/false);
  rep["provenance"] = provenance(cfg);
  write_text(outdir / report_name, rep.dump(2) + "\n");
  // Wall-clock timings are the one non-reproducible output; they live apart
  // so the artifact tree stays byte-comparable across runs.
  json timing;
  timing["total_ms"] = out.report.total_ms;
  json per_layer = json::array();
  for (const TweakLayerReport& l : out.report.layers) per_layer.push_back(l.wall_ms);
  timing["layer_ms"] = per_layer;
  write_text(outdir / "timing.json", timing.dump(2) + "\n");
  std::cout << quantizer_name(kind) << " b=" << qcfg.bits << (iters > 0 ? " + norm tweak" : "")
            << ", checkpoint at " << (outdir / "quantized").string() << "\n";
  return 0;
}

int cmd_quantize(const RunConfig& cfg) { return run_quant_pipeline(cfg, 0, "quant_report.json"); }

int cmd_tweak(const RunConfig& cfg) {
  if (cfg.tweak.iters < 1) throw ConfigError("tweak.iters must be >= 1 for the tweak command");
  return run_quant_pipeline(cfg, cfg.tweak.iters, "tweak_report.json");
}

int cmd_eval(const RunConfig& cfg) {
  std::vector<std::string> errs;
  const std::string target = cfg.quantized.empty() ? cfg.checkpoint : cfg.quantized;
  require(errs, !target.empty(), "checkpoint or quantized is required");
  require(errs, target.empty() || fs::exists(target), "model '" + target + "' does not exist");
  require(errs, !cfg.eval.text.empty(), "eval.text is required");
  require(errs, cfg.eval.text.empty() || fs::exists(cfg.eval.text),
          "eval text '" + cfg.eval.text + "' does not exist");
  require(errs, cfg.eval.stride > 0, "eval.stride must be positive");
  finish_validation(errs);

  const std::vector<int> text = load_corpus(cfg.eval.text);
  AnyModel model = load_any_checkpoint(target);
  EvalResult ppl;
  double acc = -1;
  std::visit(
      [&](const auto& m) {
        ppl = perplexity(m, std::span<const int>(text), cfg.eval.stride, cfg.eval.text);
        const int ctx = std::min(m.config.max_seq_len, 64);
        if (cfg.eval.cloze_items > 0 && static_cast<int>(text.size()) > ctx + 1) {
          const auto items = make_cloze_items(std::span<const int>(text), ctx, cfg.eval.cloze_items);
          acc = last_word_accuracy(m, items).last_word_acc;
        }
      },
      model);

  json j;
  j["model"] = target;
  j["dataset"] = cfg.eval.text;
  j["ppl"] = ppl.ppl;
  j["n_tokens"] = ppl.n_tokens;
  j["stride"] = cfg.eval.stride;
  if (acc >= 0) j["last_word_acc"] = acc;
  j["provenance"] = provenance(cfg);
  write_text(fs::path(cfg.out) / "eval.json", j.dump(2) + "\n");
  std::cout << "ppl " << ppl.ppl << " over " << ppl.n_tokens << " tokens"
            << (acc >= 0 ? " (last-word acc " + std::to_string(acc) + ")" : "") << "\n";
  return 0;
}

int cmd_compare(const RunConfig& cfg) {
  std::vector<std::string> errs;
  require(errs, !cfg.compare.methods.empty(), "compare.methods must list at least one method");
  require(errs, !cfg.compare.datasets.empty(), "compare.datasets must list at least one dataset");
  for (const auto& [name, path] : cfg.compare.methods) {
    require(errs, fs::exists(path), "method '" + name + "' checkpoint '" + path + "' does not exist");
  }
  for (const auto& [name, path] : cfg.compare.datasets) {
    require(errs, fs::exists(path), "dataset '" + name + "' file '" + path + "' does not exist");
  }
  finish_validation(errs);

  std::vector<AnyModel> storage;
  storage.reserve(cfg.compare.methods.size());
  std::vector<std::pair<std::string, AnyModelRef>> methods;
  for (const auto& [name, path] : cfg.compare.methods) {
    storage.push_back(load_any_checkpoint(path));
    AnyModelRef ref = std::visit([](const auto& m) -> AnyModelRef { return &m; }, storage.back());
    methods.emplace_back(name, ref);
  }
  std::vector<std::pair<std::string, std::vector<int>>> datasets;
  for (const auto& [name, path] : cfg.compare.datasets) datasets.emplace_back(name, load_corpus(path));

  const ComparisonTable table = compare(methods, datasets, cfg.eval.stride, cfg.eval.cloze_items);
  const fs::path out(cfg.out);
  write_text(out / "compare.csv", table.render_csv());
  std::string text = table.render_text();
  text += "run_id " + cfg.run_id() + "\n";
  write_text(out / "compare.txt", text);
  std::cout << table.render_text();
  return 0;
}

int cmd_divergence(const RunConfig& cfg) {
  std::vector<std::string> errs;
  require(errs, !cfg.checkpoint.empty(), "checkpoint (float reference) is required");
  require(errs, cfg.checkpoint.empty() || fs::exists(cfg.checkpoint),
          "checkpoint '" + cfg.checkpoint + "' does not exist");
  require(errs, !cfg.quantized.empty(), "quantized (comparison model) is required");
  require(errs, cfg.quantized.empty() || fs::exists(cfg.quantized),
          "quantized '" + cfg.quantized + "' does not exist");
  require(errs, !cfg.calib.file.empty(), "calib.file is required");
  require(errs, cfg.calib.file.empty() || fs::exists(cfg.calib.file),
          "calibration file '" + cfg.calib.file + "' does not exist");
  finish_validation(errs);

  TransformerModel fm = load_checkpoint(cfg.checkpoint);
  AnyModel other = load_any_checkpoint(cfg.quantized);
  const CalibrationSet batch = load_calib_for(cfg);
  DivergenceReport rep = std::visit([&](const auto& m) { return divergence_profile(fm, m, batch); }, other);
  rep.model_a = cfg.checkpoint;
  rep.model_b = cfg.quantized;

  json j;
  j["model_a"] = rep.model_a;
  j["model_b"] = rep.model_b;
  j["dmu"] = rep.dmu;
  j["dvar"] = rep.dvar;
  j["mean_dmu"] = rep.mean_dmu();
  j["n_rows"] = rep.n_rows;
  j["provenance"] = provenance(cfg);
  const fs::path out(cfg.out);
  write_text(out / "divergence.json", j.dump(2) + "\n");
  write_text(out / "divergence.txt", rep.render_text());
  std::cout << rep.render_text();
  return 0;
}

void add_shared_flags(CLI::App* sub, CliState& st) {
  sub->add_option("--config", [&st](const std::vector<std::string>&) { return true; },
                  "JSON run config (applied before flag overrides)");
  sub->add_option("--seed", st.cfg.seed, "run seed; all randomness derives from it");
  sub->add_option("--out", st.cfg.out, "output directory");
  sub->add_option("--bits", st.cfg.quant.bits, "weight bit width {2,3,4,8} (16 = passthrough)");
  sub->add_option("--group-size", st.cfg.quant.group_size, "group size along the input dim (0 = per-channel)");
  sub->add_option("--quantizer", st.cfg.quantizer, "rtn|gptq|smoothquant");
  sub->add_option("--loss", [&st](const std::vector<std::string>& v) {
        st.cfg.tweak.loss_kind = loss_kind_from_name(v.front());
        return true;
      },
      "tweak loss: dist|mse|kl");
  sub->add_option("--iters", st.cfg.tweak.iters, "tweak iterations per layer");
  sub->add_option("--lr0", st.cfg.tweak.lr0, "tweak base learning rate");
  sub->add_option("--lr-scale", st.cfg.tweak.lr_scale, "layer-stepped lr factor");
  sub->add_option("--calib", st.cfg.calib.source, "generated|real:<path>|gaussian");
  sub->add_option("--calib-file", st.cfg.calib.file, "calibration token file (.bin)");
  sub->add_option("--checkpoint", st.cfg.checkpoint, "float checkpoint directory");
  sub->add_option("--quantized", st.cfg.quantized, "quantized checkpoint directory");
  sub->add_option("--act-bits", st.cfg.quant.act_bits, "activation bits (0 or 8)");
}

}  // namespace

int main(int argc, char** argv) {
  CliState st;
  // The config file is applied before CLI11 runs so flags override it.
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      try {
        st.cfg = RunConfig::from_file(argv[i + 1]);
      } catch (const std::exception& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "ntq: error: " << msg << "\n";
        return 1;
      }
    }
  }

  CLI::App app{"post-training quantization toolkit for toy decoder-only transformers"};
  app.require_subcommand(1);
  CLI::App* train = app.add_subcommand("train", "train a float toy model");
  train->add_option("--corpus", st.cfg.train.corpus, "training token file");
  train->add_option("--steps", st.cfg.train.steps, "optimizer steps");
  train->add_option("--lr", st.cfg.train.lr, "learning rate");
  CLI::App* gendata = app.add_subcommand("gendata", "build a calibration set");
  gendata->add_option("--corpus", st.cfg.calib.corpus, "corpus for whitelist / reference stats");
  gendata->add_option("--n-samples", st.cfg.calib.n_samples, "number of calibration sequences");
  gendata->add_option("--token-length", st.cfg.calib.token_length, "tokens per sequence");
  CLI::App* quantize = app.add_subcommand("quantize", "quantize without tweaking");
  CLI::App* tweak = app.add_subcommand("tweak", "quantize then tweak normalization parameters");
  CLI::App* eval = app.add_subcommand("eval", "perplexity and last-word accuracy");
  eval->add_option("--text", st.cfg.eval.text, "evaluation token file");
  eval->add_option("--stride", st.cfg.eval.stride, "sliding-window stride");
  CLI::App* cmp = app.add_subcommand("compare", "side-by-side method table");
  CLI::App* div = app.add_subcommand("divergence", "per-layer activation divergence profile");
  for (CLI::App* sub : {train, gendata, quantize, tweak, eval, cmp, div}) add_shared_flags(sub, st);

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train(st.cfg);
    if (gendata->parsed()) return cmd_gendata(st.cfg);
    if (quantize->parsed()) return cmd_quantize(st.cfg);
    if (tweak->parsed()) return cmd_tweak(st.cfg);
    if (eval->parsed()) return cmd_eval(st.cfg);
    if (cmp->parsed()) return cmd_compare(st.cfg);
    if (div->parsed()) return cmd_divergence(st.cfg);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "ntq: error: " << msg << "\n";
    return 1;
  }
}
