#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "balab/ops.hpp"
#include "balab/tensor.hpp"

namespace balab {

// Residual adapter families. All share one contract: forward maps [n x c] to
// [n x c], parameters are counted exactly, and zero-initialized output
// projections make the forward the identity map.
enum class AdapterFamily {
    bottleneck,
    bottleneck_weight_scaled,
    concat,
    router_mixture,
    loha_plain,
    loha_routed,
    loha_silu,
};

const char* family_name(AdapterFamily f);
AdapterFamily family_from_string(const std::string& s);  // throws ConfigError

struct AdapterSpec {
    AdapterFamily family = AdapterFamily::bottleneck;
    int channel_dim = 64;            // c
    int bottleneck_dim = 16;         // d
    int groups = 2;                  // k, blocks of the grouped up-projection
    int rank = 4;                    // r, loha families
    double route_temperature = 10.0; // routed families

    void validate() const;  // throws SpecError
};

// exact trainable scalar count for one adapter instance
int64_t count_params(const AdapterSpec& spec);

struct Adapter {
    AdapterSpec spec;
    // stable registration order; names are local ("down.w", "up.w0", ...)
    std::vector<std::pair<std::string, Tensor>> params;

    // down/inner projections Kaiming-uniform (down_gain scales the limit),
    // up/output projections and all biases zero, so the adapter starts as the
    // identity
    static Adapter init(const AdapterSpec& spec, DType dt, uint64_t seed, double down_gain = 1.0);

    Tensor forward(Graph& g, const Tensor& z) const;

    const Tensor& p(const std::string& name) const;
    int64_t param_count() const;  // enumerated from actual tensors
    // fill every parameter with small uniform noise; used by gradient checks
    // to exercise branches that are dead at identity-init
    void randomize_all(uint64_t seed);
};

// Block-diagonal linear map: columns of z split into k contiguous groups,
// group i multiplied by blocks[i], results concatenated, bias added.
Tensor grouped_linear(Graph& g, const Tensor& z, const std::vector<Tensor>& blocks,
                      const Tensor& bias);

// Hadamard product of two rank-r outer products: (x1 y1^T) . (x2 y2^T)
Tensor loha_compose(Graph& g, const Tensor& x1, const Tensor& y1, const Tensor& x2,
                    const Tensor& y2);

// softmax(mean-pooled(z) * router / tau); returns a [1 x 2] distribution
Tensor route_weights(Graph& g, const Tensor& z, const Tensor& router_w, const Tensor& router_b,
                     double tau);

}  // namespace balab
