#pragma once

#include <cstdint>
#include <vector>

#include "balab/model.hpp"
#include "balab/rng.hpp"
#include "balab/tasks.hpp"

namespace balab {

struct SampleConfig {
    double temperature = 0.1;
    double top_p = 0.75;
    int max_new_tokens = 4;
    uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

// Nucleus sampling: scale logits by 1/temperature (0 means argmax), keep the
// smallest descending-probability prefix whose mass reaches top_p (ties broken
// by ascending token id), renormalize, draw. Excluded ids are never returned.
int top_p_sample(const std::vector<double>& logits, const SampleConfig& cfg, Rng& rng);

// Autoregressive decode from a fused prompt until the end token or
// max_new_tokens. Deterministic given the rng state.
std::vector<int> generate(const Model& model, const Sample& prompt, const SampleConfig& cfg,
                          Rng& rng);

std::vector<int> generate_greedy(const Model& model, const Sample& prompt, int max_new_tokens);

}  // namespace balab
