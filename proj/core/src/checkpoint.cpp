#include "ntq/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace ntq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct BlobWriter {
  std::vector<char> bytes;
  json entries = json::array();

  void add_f32(const std::string& name, const Tensor& t) {
    json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["dtype"] = "f32";
    e["offset"] = bytes.size();
    const size_t len = sizeof(float) * static_cast<size_t>(t.numel());
    e["length"] = len;
    const size_t off = bytes.size();
    bytes.resize(off + len);
    std::memcpy(bytes.data() + off, t.data(), len);
    entries.push_back(std::move(e));
  }

  void add_i8(const std::string& name, const Int8Tensor& t) {
    json e;
    e["name"] = name;
    e["shape"] = t.shape;
    e["dtype"] = "i8";
    e["offset"] = bytes.size();
    const size_t len = t.data.size();
    e["length"] = len;
    const size_t off = bytes.size();
    bytes.resize(off + len);
    std::memcpy(bytes.data() + off, t.data.data(), len);
    entries.push_back(std::move(e));
  }
};

struct BlobReader {
  std::vector<char> bytes;
  std::map<std::string, json> entries;
  std::string dir;

  const json& entry(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw FormatError("checkpoint '" + dir + "': missing tensor '" + name + "'");
    }
    return it->second;
  }

  void check_entry(const std::string& name, const json& e, size_t elem_size) const {
    const Shape shape = e.at("shape").get<Shape>();
    const size_t offset = e.at("offset").get<size_t>();
    const size_t length = e.at("length").get<size_t>();
    const int64_t n = shape_numel(shape);
    if (length != elem_size * static_cast<size_t>(n)) {
      throw FormatError("checkpoint '" + dir + "': tensor '" + name + "' length " + std::to_string(length) +
                        " does not match shape " + shape_str(shape));
    }
    if (offset + length > bytes.size()) {
      throw FormatError("checkpoint '" + dir + "': tensor '" + name + "' extends past end of weights.bin");
    }
  }

  Tensor read_f32(const std::string& name) const {
    const json& e = entry(name);
    if (e.at("dtype").get<std::string>() != "f32") {
      throw FormatError("checkpoint '" + dir + "': tensor '" + name + "' is not f32");
    }
    check_entry(name, e, sizeof(float));
    const Shape shape = e.at("shape").get<Shape>();
    Tensor t(shape);
    std::memcpy(t.data(), bytes.data() + e.at("offset").get<size_t>(), e.at("length").get<size_t>());
    return t;
  }

  Int8Tensor read_i8(const std::string& name) const {
    const json& e = entry(name);
    if (e.at("dtype").get<std::string>() != "i8") {
      throw FormatError("checkpoint '" + dir + "': tensor '" + name + "' is not i8");
    }
    check_entry(name, e, 1);
    Int8Tensor t(e.at("shape").get<Shape>());
    std::memcpy(t.data.data(), bytes.data() + e.at("offset").get<size_t>(), e.at("length").get<size_t>());
    return t;
  }
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw InputError("write failed for '" + path.string() + "'");
}

void write_blob(const fs::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for '" + path.string() + "'");
}

json load_json(const fs::path& path, const std::string& dir) {
  std::ifstream in(path);
  if (!in) throw FormatError("checkpoint '" + dir + "': missing " + path.filename().string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw FormatError("checkpoint '" + dir + "': bad " + path.filename().string() + ": " + e.what());
  }
}

std::vector<char> load_blob(const fs::path& path, const std::string& dir) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint '" + dir + "': missing weights.bin");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json config_to_json(const ModelConfig& c) {
  json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden"] = c.hidden;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["max_seq_len"] = c.max_seq_len;
  j["norm_kind"] = norm_kind_name(c.norm_kind);
  j["eps"] = c.eps;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.norm_kind = norm_kind_from_name(j.at("norm_kind").get<std::string>());
  c.eps = j.at("eps").get<float>();
  c.validate();
  return c;
}

const char* kLinearNames[6] = {"wq", "wk", "wv", "wo", "w_up", "w_down"};

QuantizedLinear* linear_of(QuantizedBlock& b, int i) {
  QuantizedLinear* ls[6] = {&b.qwq, &b.qwk, &b.qwv, &b.qwo, &b.qw_up, &b.qw_down};
  return ls[i];
}

Tensor* float_weight_of(TransformerBlock& b, int i) {
  Tensor* ws[6] = {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down};
  return ws[i];
}

}  // namespace

void save_checkpoint(const TransformerModel& model, const std::string& dir) {
  fs::create_directories(dir);
  BlobWriter w;
  for (const auto& [name, t] : named_params(model)) w.add_f32(name, *t);
  write_file(fs::path(dir) / "config.json", config_to_json(model.config).dump(2) + "\n");
  write_file(fs::path(dir) / "manifest.json", w.entries.dump(2) + "\n");
  write_blob(fs::path(dir) / "weights.bin", w.bytes);
}

TransformerModel load_checkpoint(const std::string& dir) {
  const json manifest = load_json(fs::path(dir) / "manifest.json", dir);
  if (!manifest.is_array()) {
    throw FormatError("checkpoint '" + dir + "': manifest is not a float-model tensor array");
  }
  BlobReader r;
  r.dir = dir;
  r.bytes = load_blob(fs::path(dir) / "weights.bin", dir);
  for (const json& e : manifest) r.entries[e.at("name").get<std::string>()] = e;

  TransformerModel model;
  model.config = config_from_json(load_json(fs::path(dir) / "config.json", dir));
  Rng scratch(0);
  model = init_model(model.config, scratch);  // allocates the right shapes
  for (auto& [name, t] : named_params(model)) {
    Tensor loaded = r.read_f32(name);
    if (!loaded.same_shape(*t)) {
      throw FormatError("checkpoint '" + dir + "': tensor '" + name + "' has shape " + shape_str(loaded.shape()) +
                        ", expected " + shape_str(t->shape()));
    }
    *t = std::move(loaded);
  }
  return model;
}

void save_quantized_checkpoint(const QuantizedModel& model, const std::string& dir) {
  fs::create_directories(dir);
  BlobWriter w;
  w.add_f32("tok_emb", model.tok_emb);
  w.add_f32("pos_emb", model.pos_emb);
  const bool passthrough = model.qcfg.passthrough();
  for (size_t l = 0; l < model.blocks.size(); ++l) {
    const QuantizedBlock& b = model.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    w.add_f32(p + "ln1.gamma", b.f.ln1.gamma);
    if (b.f.ln1.has_beta()) w.add_f32(p + "ln1.beta", b.f.ln1.beta);
    w.add_f32(p + "ln2.gamma", b.f.ln2.gamma);
    if (b.f.ln2.has_beta()) w.add_f32(p + "ln2.beta", b.f.ln2.beta);
    for (int i = 0; i < 6; ++i) {
      auto& qb = const_cast<QuantizedBlock&>(b);
      if (passthrough) {
        w.add_f32(p + kLinearNames[i], *float_weight_of(qb.f, i));
      } else {
        const QuantizedLinear* ql = linear_of(qb, i);
        w.add_i8(p + kLinearNames[i] + ".codes", ql->codes);
        w.add_f32(p + kLinearNames[i] + ".scales", ql->scales);
      }
    }
  }
  w.add_f32("final_norm.gamma", model.final_norm.gamma);
  if (model.final_norm.has_beta()) w.add_f32("final_norm.beta", model.final_norm.beta);

  json manifest;
  manifest["kind"] = "quantized_checkpoint";
  manifest["bits"] = model.qcfg.bits;
  manifest["granularity"] = model.qcfg.granularity == Granularity::kPerGroup ? "per_group" : "per_channel";
  manifest["group_size"] = model.qcfg.group_size;
  manifest["act_bits"] = model.qcfg.act_bits;
  manifest["smooth_alpha"] = model.qcfg.smooth_alpha;
  manifest["damping"] = model.qcfg.damping;
  manifest["quantizer"] = quantizer_name(model.quantizer);
  manifest["tensors"] = std::move(w.entries);
  write_file(fs::path(dir) / "config.json", config_to_json(model.config).dump(2) + "\n");
  write_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
  write_blob(fs::path(dir) / "weights.bin", w.bytes);
}

QuantizedModel load_quantized_checkpoint(const std::string& dir) {
  const json manifest = load_json(fs::path(dir) / "manifest.json", dir);
  if (!manifest.is_object() || manifest.value("kind", "") != "quantized_checkpoint") {
    throw FormatError("checkpoint '" + dir + "': not a quantized checkpoint");
  }
  QuantizedModel model;
  model.config = config_from_json(load_json(fs::path(dir) / "config.json", dir));
  model.qcfg.bits = manifest.at("bits").get<int>();
  model.qcfg.granularity =
      manifest.at("granularity").get<std::string>() == "per_group" ? Granularity::kPerGroup : Granularity::kPerChannel;
  model.qcfg.group_size = manifest.at("group_size").get<int>();
  model.qcfg.act_bits = manifest.at("act_bits").get<int>();
  model.qcfg.smooth_alpha = manifest.at("smooth_alpha").get<float>();
  model.qcfg.damping = manifest.at("damping").get<double>();
  model.quantizer = quantizer_from_name(manifest.at("quantizer").get<std::string>());

  BlobReader r;
  r.dir = dir;
  r.bytes = load_blob(fs::path(dir) / "weights.bin", dir);
  for (const json& e : manifest.at("tensors")) r.entries[e.at("name").get<std::string>()] = e;

  model.tok_emb = r.read_f32("tok_emb");
  model.pos_emb = r.read_f32("pos_emb");
  const bool passthrough = model.qcfg.passthrough();
  const bool has_beta = model.config.norm_kind == NormKind::kLayerNorm;
  model.blocks.resize(static_cast<size_t>(model.config.n_layers));
  for (size_t l = 0; l < model.blocks.size(); ++l) {
    QuantizedBlock& b = model.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    b.f.ln1.gamma = r.read_f32(p + "ln1.gamma");
    if (has_beta) b.f.ln1.beta = r.read_f32(p + "ln1.beta");
    b.f.ln2.gamma = r.read_f32(p + "ln2.gamma");
    if (has_beta) b.f.ln2.beta = r.read_f32(p + "ln2.beta");
    for (int i = 0; i < 6; ++i) {
      if (passthrough) {
        *float_weight_of(b.f, i) = r.read_f32(p + kLinearNames[i]);
      } else {
        QuantizedLinear* ql = linear_of(b, i);
        ql->codes = r.read_i8(p + kLinearNames[i] + ".codes");
        ql->scales = r.read_f32(p + kLinearNames[i] + ".scales");
        ql->bits = model.qcfg.bits;
        ql->granularity = model.qcfg.granularity;
        ql->group_size = model.qcfg.granularity == Granularity::kPerGroup ? model.qcfg.group_size : 0;
      }
    }
    if (!passthrough) b.refresh_dequant();
  }
  model.final_norm.gamma = r.read_f32("final_norm.gamma");
  if (has_beta) model.final_norm.beta = r.read_f32("final_norm.beta");
  return model;
}

bool is_quantized_checkpoint(const std::string& dir) {
  const json manifest = load_json(fs::path(dir) / "manifest.json", dir);
  return manifest.is_object() && manifest.value("kind", "") == "quantized_checkpoint";
}

AnyModel load_any_checkpoint(const std::string& dir) {
  if (is_quantized_checkpoint(dir)) return load_quantized_checkpoint(dir);
  return load_checkpoint(dir);
}

}  // namespace ntq
