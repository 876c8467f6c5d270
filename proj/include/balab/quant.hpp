#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "balab/tensor.hpp"

namespace balab {

// Weight-only int8 storage for a frozen linear layer: symmetric
// per-output-channel scales, dequantized at use, never on the tape.
struct QuantWeight {
    Tensor q;       // int8 [out x in]
    Tensor scales;  // float [out], dtype matches the model
    bool active() const { return q.defined(); }
};

// scale = max|row| / 127 (1.0 sentinel for all-zero rows); q = round(w/scale).
// All internal arithmetic in double so re-quantizing a dequantized weight is
// bit-exact.
QuantWeight quantize_weight(const Tensor& w, DType scale_dtype);

// [in x out] float view of the stored weight
Tensor dequantize_weight(const QuantWeight& qw, DType dt);

struct QuantLayerReport {
    std::string name;
    int out_channels = 0;
    int in_channels = 0;
    int64_t float_weight_bytes = 0;  // 4 bytes per scalar baseline
    int64_t quant_weight_bytes = 0;  // int8 payload + float32 scales
};

struct MemoryReport {
    std::vector<QuantLayerReport> layers;
    int64_t float_weight_bytes = 0;
    int64_t quant_weight_bytes = 0;
    double reduction_ratio() const {
        return quant_weight_bytes > 0
                   ? static_cast<double>(float_weight_bytes) / static_cast<double>(quant_weight_bytes)
                   : 1.0;
    }
};

}  // namespace balab
