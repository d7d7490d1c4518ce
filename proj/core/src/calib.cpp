#include "ntq/calib.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

namespace ntq {

using nlohmann::json;

std::string calib_source_name(CalibSource s) {
  switch (s) {
    case CalibSource::kGenerated: return "generated";
    case CalibSource::kReal: return "real";
    case CalibSource::kRandomGaussian: return "gaussian";
  }
  return "?";
}

void CalibrationConfig::validate(const ModelConfig& model) const {
  std::vector<std::string> bad;
  if (n_samples <= 0) bad.push_back("n_samples must be positive");
  if (token_length <= 0) bad.push_back("token_length must be positive");
  if (token_length > model.max_seq_len) bad.push_back("token_length must not exceed model max_seq_len");
  if (source == CalibSource::kGenerated && first_token_whitelist.empty()) {
    bad.push_back("first_token_whitelist must be non-empty for generated data");
  }
  if (source == CalibSource::kReal && real_path.empty()) bad.push_back("real source requires a path");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) bad.push_back("top_fraction must be in (0,1]");
  if (stage1_len <= 0) bad.push_back("stage1_len must be positive");
  if (stage2_policy == SamplingPolicy::Kind::kTopK && stage2_top_k <= 0) {
    bad.push_back("stage2_top_k must be positive for top-k continuation");
  }
  for (const int id : first_token_whitelist) {
    if (id < 0 || id >= model.vocab_size) {
      bad.push_back("whitelist token " + std::to_string(id) + " out of vocab range");
      break;
    }
  }
  if (!bad.empty()) {
    std::string msg;
    for (size_t i = 0; i < bad.size(); ++i) msg += (i ? "; " : "") + bad[i];
    throw ConfigError("invalid calibration config: " + msg);
  }
}

TokenMatrix CalibrationSet::token_matrix() const {
  if (is_gaussian()) throw ContractError("token_matrix: gaussian calibration has no token sequences");
  if (sequences.empty()) throw ContractError("token_matrix: empty calibration set");
  TokenMatrix m(static_cast<int>(sequences.size()), static_cast<int>(sequences.front().size()));
  for (size_t r = 0; r < sequences.size(); ++r) {
    if (sequences[r].size() != sequences.front().size()) {
      throw ContractError("token_matrix: ragged calibration sequences");
    }
    for (size_t c = 0; c < sequences[r].size(); ++c) m.at(static_cast<int>(r), static_cast<int>(c)) = sequences[r][c];
  }
  return m;
}

std::vector<int> build_whitelist(std::span<const int> corpus, double top_fraction) {
  if (corpus.empty()) throw ContractError("build_whitelist: empty corpus");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) {
    throw ContractError("build_whitelist: top_fraction must be in (0,1]");
  }
  std::map<int, int64_t> freq;
  for (const int id : corpus) freq[id] += 1;
  std::vector<std::pair<int, int64_t>> order(freq.begin(), freq.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const double total = static_cast<double>(corpus.size());
  std::vector<int> picked;
  int64_t cum = 0;
  for (const auto& [id, count] : order) {
    picked.push_back(id);
    cum += count;
    if (static_cast<double>(cum) >= top_fraction * total) break;
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

CalibrationSet generate_calibration(const TransformerModel& model, const CalibrationConfig& cfg, Rng rng) {
  cfg.validate(model.config);
  if (cfg.source != CalibSource::kGenerated) {
    throw ContractError("generate_calibration: config source is not 'generated'");
  }
  const int n = cfg.n_samples, T = cfg.token_length, V = model.config.vocab_size;

  CalibrationSet set;
  set.source = "generated";
  set.seed = rng.seed();
  set.sequences.assign(static_cast<size_t>(n), {});

  std::vector<Rng> streams;
  streams.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) streams.push_back(rng.substream(static_cast<uint64_t>(i)));

  for (int i = 0; i < n; ++i) {
    const auto pick = streams[static_cast<size_t>(i)].uniform_int(cfg.first_token_whitelist.size());
    set.sequences[static_cast<size_t>(i)].push_back(cfg.first_token_whitelist[pick]);
  }

  SamplingPolicy stage1{SamplingPolicy::Kind::kTemperature, cfg.stage1_temperature, 0};
  SamplingPolicy stage2;
  stage2.kind = cfg.stage2_policy;
  stage2.top_k = cfg.stage2_top_k;

  // All samples advance in lockstep so each step is one batched forward.
  for (int t = 1; t < T; ++t) {
    const int ctx_len = std::min(t, model.config.max_seq_len);
    TokenMatrix ctx(n, ctx_len);
    for (int i = 0; i < n; ++i) {
      const auto& seq = set.sequences[static_cast<size_t>(i)];
      for (int c = 0; c < ctx_len; ++c) ctx.at(i, c) = seq[seq.size() - static_cast<size_t>(ctx_len) + c];
    }
    Tensor logits = model_logits(model, ctx);
    const SamplingPolicy& pol = t < cfg.stage1_len ? stage1 : stage2;
    for (int i = 0; i < n; ++i) {
      const float* row = logits.data() + (static_cast<size_t>(i) * ctx_len + (ctx_len - 1)) * V;
      set.sequences[static_cast<size_t>(i)].push_back(pick_token(row, V, pol, streams[static_cast<size_t>(i)]));
    }
  }
  return set;
}

CalibrationSet load_real(const std::string& path, const CalibrationConfig& cfg, int vocab_size, Rng rng) {
  const std::vector<int> tokens = load_corpus(path);
  if (static_cast<int>(tokens.size()) < cfg.token_length) {
    throw InputError("load_real: file '" + path + "' holds " + std::to_string(tokens.size()) +
                     " tokens, need at least " + std::to_string(cfg.token_length));
  }
  for (const int id : tokens) {
    if (id < 0 || id >= vocab_size) {
      throw InputError("load_real: token id " + std::to_string(id) + " out of vocab range");
    }
  }
  CalibrationSet set;
  set.source = "real:" + path;
  set.seed = rng.seed();
  const uint64_t span = tokens.size() - static_cast<size_t>(cfg.token_length) + 1;
  for (int i = 0; i < cfg.n_samples; ++i) {
    Rng stream = rng.substream(static_cast<uint64_t>(i));
    const auto start = stream.uniform_int(span);
    set.sequences.emplace_back(tokens.begin() + static_cast<int64_t>(start),
                               tokens.begin() + static_cast<int64_t>(start) + cfg.token_length);
  }
  return set;
}

CalibrationSet random_gaussian(const ActivationStats& reference, const CalibrationConfig& cfg, int hidden, Rng rng) {
  if (reference.channels() != hidden) {
    throw ContractError("random_gaussian: reference stats channel count != hidden size");
  }
  CalibrationSet set;
  set.source = "gaussian";
  set.seed = rng.seed();
  set.gaussian_batch = Tensor({cfg.n_samples, cfg.token_length, hidden});
  for (int i = 0; i < cfg.n_samples; ++i) {
    Rng stream = rng.substream(static_cast<uint64_t>(i));
    float* base = set.gaussian_batch.data() + static_cast<size_t>(i) * cfg.token_length * hidden;
    for (int t = 0; t < cfg.token_length; ++t) {
      for (int c = 0; c < hidden; ++c) {
        const double sd = std::sqrt(std::max(0.0, static_cast<double>(reference.var[c])));
        base[static_cast<size_t>(t) * hidden + c] = static_cast<float>(stream.gaussian(reference.mu[c], sd));
      }
    }
  }
  return set;
}

std::vector<int> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("load_corpus: cannot open '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<int> tokens;
  if (path.size() > 4 && path.compare(path.size() - 4, 4, ".bin") == 0) {
    if (bytes.size() % 2 != 0) throw FormatError("load_corpus: odd byte count in u16 token file '" + path + "'");
    tokens.reserve(bytes.size() / 2);
    for (size_t i = 0; i < bytes.size(); i += 2) {
      const auto lo = static_cast<uint8_t>(bytes[i]);
      const auto hi = static_cast<uint8_t>(bytes[i + 1]);
      tokens.push_back(static_cast<int>(lo) | (static_cast<int>(hi) << 8));
    }
  } else {
    tokens.reserve(bytes.size());
    for (const char b : bytes) tokens.push_back(static_cast<int>(static_cast<uint8_t>(b)));
  }
  if (tokens.empty()) throw InputError("load_corpus: '" + path + "' holds no tokens");
  return tokens;
}

void save_tokens_u16(const std::string& path, std::span<const int> tokens) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("save_tokens_u16: cannot open '" + path + "' for writing");
  for (const int id : tokens) {
    if (id < 0 || id > 0xffff) throw InputError("save_tokens_u16: token id out of u16 range");
    const char lo = static_cast<char>(id & 0xff);
    const char hi = static_cast<char>((id >> 8) & 0xff);
    out.put(lo);
    out.put(hi);
  }
  if (!out) throw InputError("save_tokens_u16: write failed for '" + path + "'");
}

void save_calibration(const CalibrationSet& set, const std::string& bin_path, const std::string& sidecar_path) {
  json sidecar;
  sidecar["n_samples"] = set.n_samples();
  sidecar["source"] = set.source;
  sidecar["seed"] = set.seed;
  if (set.is_gaussian()) {
    sidecar["token_length"] = set.gaussian_batch.dim(1);
    sidecar["hidden"] = set.gaussian_batch.dim(2);
    sidecar["dtype"] = "f32";
    std::ofstream out(bin_path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("save_calibration: cannot open '" + bin_path + "'");
    out.write(reinterpret_cast<const char*>(set.gaussian_batch.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(set.gaussian_batch.numel())));
    if (!out) throw InputError("save_calibration: write failed for '" + bin_path + "'");
  } else {
    sidecar["token_length"] = set.sequences.empty() ? 0 : static_cast<int>(set.sequences.front().size());
    sidecar["dtype"] = "u16";
    std::vector<int> flat;
    for (const auto& seq : set.sequences) flat.insert(flat.end(), seq.begin(), seq.end());
    save_tokens_u16(bin_path, flat);
  }
  std::ofstream side(sidecar_path, std::ios::trunc);
  if (!side) throw InputError("save_calibration: cannot open '" + sidecar_path + "'");
  side << sidecar.dump(2) << '\n';
}

CalibrationSet load_calibration(const std::string& bin_path, const std::string& sidecar_path) {
  std::ifstream side(sidecar_path);
  if (!side) throw InputError("load_calibration: cannot open '" + sidecar_path + "'");
  json sidecar;
  try {
    side >> sidecar;
  } catch (const json::exception& e) {
    throw FormatError("load_calibration: bad sidecar JSON: " + std::string(e.what()));
  }
  CalibrationSet set;
  set.source = sidecar.at("source").get<std::string>();
  set.seed = sidecar.at("seed").get<uint64_t>();
  const int n = sidecar.at("n_samples").get<int>();
  const int T = sidecar.at("token_length").get<int>();
  if (n <= 0 || T <= 0) throw FormatError("load_calibration: invalid sidecar dimensions");

  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw InputError("load_calibration: cannot open '" + bin_path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (sidecar.value("dtype", "u16") == "f32") {
    const int h = sidecar.at("hidden").get<int>();
    const size_t want = sizeof(float) * static_cast<size_t>(n) * T * h;
    if (bytes.size() != want) throw FormatError("load_calibration: gaussian blob size mismatch");
    set.gaussian_batch = Tensor({n, T, h});
    std::memcpy(set.gaussian_batch.data(), bytes.data(), want);
  } else {
    const size_t want = 2ull * static_cast<size_t>(n) * T;
    if (bytes.size() != want) throw FormatError("load_calibration: token blob size mismatch");
    set.sequences.assign(static_cast<size_t>(n), {});
    size_t off = 0;
    for (int i = 0; i < n; ++i) {
      auto& seq = set.sequences[static_cast<size_t>(i)];
      seq.reserve(static_cast<size_t>(T));
      for (int t = 0; t < T; ++t, off += 2) {
        const auto lo = static_cast<uint8_t>(bytes[off]);
        const auto hi = static_cast<uint8_t>(bytes[off + 1]);
        seq.push_back(static_cast<int>(lo) | (static_cast<int>(hi) << 8));
      }
    }
  }
  return set;
}

}  // namespace ntq
