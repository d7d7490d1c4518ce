#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ntq/model.hpp"
#include "ntq/normtweak.hpp"
#include "ntq/quant.hpp"

namespace ntq {

inline constexpr const char* kArtifactVersion = "0.1.0";

// One experiment run: every command reads the same JSON file; flags override
// individual fields. All randomness derives from `seed` through named
// substreams, so identical config+seed reproduces identical output bytes.
struct RunConfig {
  uint64_t seed = 1;
  std::string out = "out";
  ModelConfig model;

  struct Train {
    std::string corpus;
    int steps = 300;
    double lr = 1e-3;
    int batch = 8;
    int seq_len = 64;
  } train;

  std::string checkpoint;  // float checkpoint directory
  std::string quantized;   // quantized checkpoint directory

  std::string quantizer = "gptq";  // rtn | gptq | smoothquant
  QuantConfig quant;
  TweakConfig tweak;

  struct Calib {
    std::string source = "generated";  // generated | real:<path> | gaussian
    int n_samples = 16;
    int token_length = 128;
    double top_fraction = 0.9;
    int stage1_len = 4;
    double stage1_temperature = 1.0;
    std::string stage2 = "greedy";  // greedy | top_k
    int stage2_top_k = 5;
    std::string corpus;  // whitelist / gaussian reference source; defaults to train.corpus
    std::string file;    // calibration token file (.bin with .json sidecar)
  } calib;

  struct Eval {
    std::string text;
    int stride = 64;
    int cloze_items = 64;
  } eval;

  struct Compare {
    std::vector<std::pair<std::string, std::string>> methods;   // name -> checkpoint dir
    std::vector<std::pair<std::string, std::string>> datasets;  // name -> token file
  } compare;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_json_text(const std::string& text);

  std::string canonical_json() const;  // sorted keys, deterministic
  uint64_t config_hash() const;        // FNV-1a over canonical_json
  std::string run_id() const;          // fixed-width hex of config_hash
  std::string provenance_json() const;  // {seed, config_hash, version, run_id}
};

uint64_t fnv1a64(std::string_view bytes);

}  // namespace ntq
