#include "balab/quant.hpp"

#include <cmath>

namespace balab {

QuantWeight quantize_weight(const Tensor& w, DType scale_dtype) {
    if (w.ndim() != 2 || !is_float_dtype(w.dtype()))
        throw ContractError("quantize_weight: expects a 2-d float weight");
    const int in = w.rows(), out = w.cols();
    std::vector<int8_t> q(static_cast<size_t>(out) * static_cast<size_t>(in));
    std::vector<double> scales(static_cast<size_t>(out));
    for (int j = 0; j < out; ++j) {
        double amax = 0.0;
        for (int i = 0; i < in; ++i) amax = std::max(amax, std::abs(w.at(i, j)));
        const double s = amax == 0.0 ? 1.0 : amax / 127.0;
        scales[static_cast<size_t>(j)] = s;
        for (int i = 0; i < in; ++i) {
            const long long r = std::llround(w.at(i, j) / s);
            const long long clamped = r > 127 ? 127 : (r < -127 ? -127 : r);
            q[static_cast<size_t>(j) * in + i] = static_cast<int8_t>(clamped);
        }
    }
    QuantWeight qw;
    qw.q = Tensor::from_i8({out, in}, q);
    qw.scales = Tensor::from_values({out}, scales, scale_dtype);
    return qw;
}

Tensor dequantize_weight(const QuantWeight& qw, DType dt) {
    if (!qw.active()) throw ContractError("dequantize_weight: no quantized payload");
    const int out = qw.q.rows(), in = qw.q.cols();
    auto qs = qw.q.data<int8_t>();
    std::vector<double> vals(static_cast<size_t>(in) * static_cast<size_t>(out));
    for (int j = 0; j < out; ++j) {
        const double s = qw.scales.at(static_cast<size_t>(j));
        for (int i = 0; i < in; ++i)
            vals[static_cast<size_t>(i) * out + j] =
                static_cast<double>(qs[static_cast<size_t>(j) * in + i]) * s;
    }
    return Tensor::from_values({in, out}, vals, dt);
}

}  // namespace balab
