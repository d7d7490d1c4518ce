#pragma once

#include <string>
#include <variant>

#include "ntq/model.hpp"
#include "ntq/quant.hpp"

namespace ntq {

// Checkpoint directory layout: config.json (model config), manifest.json
// (tensor index: name/shape/dtype/offset/length in bytes) and weights.bin
// (concatenated little-endian raw values). Float checkpoints round-trip
// bit-exactly. Quantized checkpoints use the same scheme with i8 codes and
// f32 scales; the bit width and quantizer settings live in the manifest.
void save_checkpoint(const TransformerModel& model, const std::string& dir);
TransformerModel load_checkpoint(const std::string& dir);

void save_quantized_checkpoint(const QuantizedModel& model, const std::string& dir);
QuantizedModel load_quantized_checkpoint(const std::string& dir);

bool is_quantized_checkpoint(const std::string& dir);

using AnyModel = std::variant<TransformerModel, QuantizedModel>;
AnyModel load_any_checkpoint(const std::string& dir);

}  // namespace ntq
