#pragma once

#include <span>
#include <string>
#include <vector>

#include "ntq/model.hpp"
#include "ntq/stats.hpp"

namespace ntq {

enum class CalibSource { kGenerated, kReal, kRandomGaussian };

std::string calib_source_name(CalibSource s);

struct CalibrationConfig {
  int n_samples = 16;
  int token_length = 128;
  CalibSource source = CalibSource::kGenerated;
  std::string real_path;  // for kReal
  std::vector<int> first_token_whitelist;
  double top_fraction = 0.9;  // corpus frequency mass the whitelist must cover
  int stage1_len = 4;
  double stage1_temperature = 1.0;
  SamplingPolicy::Kind stage2_policy = SamplingPolicy::Kind::kGreedy;
  int stage2_top_k = 5;

  void validate(const ModelConfig& model) const;
};

// Token sequences (or, for the Gaussian control, a direct block-0 activation
// batch) used to drive quantization and tweaking.
struct CalibrationSet {
  std::vector<std::vector<int>> sequences;  // each exactly token_length long
  std::string source;
  uint64_t seed = 0;
  Tensor gaussian_batch;  // [n, T, h], set only for the Gaussian control

  bool is_gaussian() const { return !gaussian_batch.empty(); }
  int n_samples() const {
    return is_gaussian() ? gaussian_batch.dim(0) : static_cast<int>(sequences.size());
  }
  TokenMatrix token_matrix() const;
};

// Smallest set of most-frequent tokens whose cumulative corpus frequency
// reaches top_fraction; ties break toward the lower token id. Sorted
// ascending.
std::vector<int> build_whitelist(std::span<const int> corpus, double top_fraction);

// Model-self-generated calibration data: first token uniform from the
// whitelist, a short stochastic prefix, then deterministic continuation.
CalibrationSet generate_calibration(const TransformerModel& model, const CalibrationConfig& cfg, Rng rng);

// n_samples random contiguous windows from a real token stream.
CalibrationSet load_real(const std::string& path, const CalibrationConfig& cfg, int vocab_size, Rng rng);

// Gaussian control: injects activations with the reference per-channel
// mean/variance directly at block-0 input, bypassing the embedding table.
CalibrationSet random_gaussian(const ActivationStats& reference, const CalibrationConfig& cfg, int hidden, Rng rng);

// UTF-8 text (byte-level tokens) or .bin (little-endian u16 ids).
std::vector<int> load_corpus(const std::string& path);
void save_tokens_u16(const std::string& path, std::span<const int> tokens);

// Binary token file plus JSON sidecar ({n_samples, token_length, source,
// seed}); the Gaussian control persists its activation batch as f32 instead.
void save_calibration(const CalibrationSet& set, const std::string& bin_path, const std::string& sidecar_path);
CalibrationSet load_calibration(const std::string& bin_path, const std::string& sidecar_path);

}  // namespace ntq
