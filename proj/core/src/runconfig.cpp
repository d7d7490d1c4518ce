#include "ntq/runconfig.hpp"

#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

namespace ntq {

using nlohmann::json;

uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : bytes) {
    h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["model"] = {{"vocab_size", c.model.vocab_size}, {"hidden", c.model.hidden},
                {"n_layers", c.model.n_layers},     {"n_heads", c.model.n_heads},
                {"max_seq_len", c.model.max_seq_len}, {"norm_kind", norm_kind_name(c.model.norm_kind)},
                {"eps", c.model.eps}};
  j["train"] = {{"corpus", c.train.corpus},
                {"steps", c.train.steps},
                {"lr", c.train.lr},
                {"batch", c.train.batch},
                {"seq_len", c.train.seq_len}};
  j["checkpoint"] = c.checkpoint;
  j["quantized"] = c.quantized;
  j["quantizer"] = c.quantizer;
  j["quant"] = {{"bits", c.quant.bits},
                {"group_size", c.quant.group_size},
                {"act_bits", c.quant.act_bits},
                {"smooth_alpha", c.quant.smooth_alpha},
                {"damping", c.quant.damping}};
  j["tweak"] = {{"lr0", c.tweak.lr0},
                {"lr_scale", c.tweak.lr_scale},
                {"iters", c.tweak.iters},
                {"loss", loss_kind_name(c.tweak.loss_kind)},
                {"lr_search", c.tweak.lr_search},
                {"ref_from_quant_input", c.tweak.ref_from_quant_input}};
  j["calib"] = {{"source", c.calib.source},
                {"n_samples", c.calib.n_samples},
                {"token_length", c.calib.token_length},
                {"top_fraction", c.calib.top_fraction},
                {"stage1_len", c.calib.stage1_len},
                {"stage1_temperature", c.calib.stage1_temperature},
                {"stage2", c.calib.stage2},
                {"stage2_top_k", c.calib.stage2_top_k},
                {"corpus", c.calib.corpus},
                {"file", c.calib.file}};
  j["eval"] = {{"text", c.eval.text}, {"stride", c.eval.stride}, {"cloze_items", c.eval.cloze_items}};
  json methods = json::array(), datasets = json::array();
  for (const auto& [n, p] : c.compare.methods) methods.push_back({{"name", n}, {"path", p}});
  for (const auto& [n, p] : c.compare.datasets) datasets.push_back({{"name", n}, {"path", p}});
  j["compare"] = {{"methods", methods}, {"datasets", datasets}};
  return j;
}

template <class T>
void get_if_present(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void apply_json(RunConfig& c, const json& j) {
  get_if_present(j, "seed", c.seed);
  get_if_present(j, "out", c.out);
  if (j.contains("model")) {
    const json& m = j.at("model");
    get_if_present(m, "vocab_size", c.model.vocab_size);
    get_if_present(m, "hidden", c.model.hidden);
    get_if_present(m, "n_layers", c.model.n_layers);
    get_if_present(m, "n_heads", c.model.n_heads);
    get_if_present(m, "max_seq_len", c.model.max_seq_len);
    if (m.contains("norm_kind")) c.model.norm_kind = norm_kind_from_name(m.at("norm_kind").get<std::string>());
    get_if_present(m, "eps", c.model.eps);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    get_if_present(t, "corpus", c.train.corpus);
    get_if_present(t, "steps", c.train.steps);
    get_if_present(t, "lr", c.train.lr);
    get_if_present(t, "batch", c.train.batch);
    get_if_present(t, "seq_len", c.train.seq_len);
  }
  get_if_present(j, "checkpoint", c.checkpoint);
  get_if_present(j, "quantized", c.quantized);
  get_if_present(j, "quantizer", c.quantizer);
  if (j.contains("quant")) {
    const json& q = j.at("quant");
    get_if_present(q, "bits", c.quant.bits);
    get_if_present(q, "group_size", c.quant.group_size);
    get_if_present(q, "act_bits", c.quant.act_bits);
    get_if_present(q, "smooth_alpha", c.quant.smooth_alpha);
    get_if_present(q, "damping", c.quant.damping);
  }
  if (j.contains("tweak")) {
    const json& t = j.at("tweak");
    get_if_present(t, "lr0", c.tweak.lr0);
    get_if_present(t, "lr_scale", c.tweak.lr_scale);
    get_if_present(t, "iters", c.tweak.iters);
    if (t.contains("loss")) c.tweak.loss_kind = loss_kind_from_name(t.at("loss").get<std::string>());
    get_if_present(t, "lr_search", c.tweak.lr_search);
    get_if_present(t, "ref_from_quant_input", c.tweak.ref_from_quant_input);
  }
  if (j.contains("calib")) {
    const json& k = j.at("calib");
    get_if_present(k, "source", c.calib.source);
    get_if_present(k, "n_samples", c.calib.n_samples);
    get_if_present(k, "token_length", c.calib.token_length);
    get_if_present(k, "top_fraction", c.calib.top_fraction);
    get_if_present(k, "stage1_len", c.calib.stage1_len);
    get_if_present(k, "stage1_temperature", c.calib.stage1_temperature);
    get_if_present(k, "stage2", c.calib.stage2);
    get_if_present(k, "stage2_top_k", c.calib.stage2_top_k);
    get_if_present(k, "corpus", c.calib.corpus);
    get_if_present(k, "file", c.calib.file);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    get_if_present(e, "text", c.eval.text);
    get_if_present(e, "stride", c.eval.stride);
    get_if_present(e, "cloze_items", c.eval.cloze_items);
  }
  if (j.contains("compare")) {
    const json& cm = j.at("compare");
    if (cm.contains("methods")) {
      c.compare.methods.clear();
      for (const json& m : cm.at("methods")) {
        c.compare.methods.emplace_back(m.at("name").get<std::string>(), m.at("path").get<std::string>());
      }
    }
    if (cm.contains("datasets")) {
      c.compare.datasets.clear();
      for (const json& d : cm.at("datasets")) {
        c.compare.datasets.emplace_back(d.at("name").get<std::string>(), d.at("path").get<std::string>());
      }
    }
  }
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  try {
    apply_json(c, j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config field: ") + e.what());
  }
  return c;
}

std::string RunConfig::canonical_json() const { return to_json(*this).dump(); }

uint64_t RunConfig::config_hash() const { return fnv1a64(canonical_json()); }

std::string RunConfig::run_id() const {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(config_hash()));
  return buf;
}

std::string RunConfig::provenance_json() const {
  json j;
  j["seed"] = seed;
  j["config_hash"] = run_id();
  j["version"] = kArtifactVersion;
  j["run_id"] = run_id();
  return j.dump();
}

}  // namespace ntq
