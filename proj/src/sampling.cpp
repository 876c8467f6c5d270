#include "balab/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "balab/ops.hpp"

namespace balab {

void SampleConfig::validate() const {
    if (temperature < 0.0) throw ConfigError("sample.temperature must be non-negative");
    if (top_p <= 0.0 || top_p > 1.0) throw ConfigError("sample.top_p must be in (0, 1]");
    if (max_new_tokens < 0) throw ConfigError("sample.max_new_tokens must be non-negative");
}

int top_p_sample(const std::vector<double>& logits, const SampleConfig& cfg, Rng& rng) {
    cfg.validate();
    const int m = static_cast<int>(logits.size());
    if (m == 0) throw ContractError("top_p_sample: empty logits");
    for (double v : logits)
        if (!std::isfinite(v)) throw NumericError("top_p_sample: non-finite logit");

    if (cfg.temperature == 0.0) {
        int best = 0;
        for (int i = 1; i < m; ++i)
            if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
        return best;
    }

    std::vector<double> probs(static_cast<size_t>(m));
    double mx = logits[0] / cfg.temperature;
    for (int i = 1; i < m; ++i) mx = std::max(mx, logits[static_cast<size_t>(i)] / cfg.temperature);
    double denom = 0.0;
    for (int i = 0; i < m; ++i) {
        probs[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] / cfg.temperature - mx);
        denom += probs[static_cast<size_t>(i)];
    }
    for (double& p : probs) p /= denom;

    std::vector<int> order(static_cast<size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double pa = probs[static_cast<size_t>(a)], pb = probs[static_cast<size_t>(b)];
        if (pa != pb) return pa > pb;
        return a < b;  // deterministic boundary ties
    });

    // smallest prefix reaching the mass threshold
    int kept = 0;
    double cum = 0.0;
    for (int i = 0; i < m; ++i) {
        cum += probs[static_cast<size_t>(order[static_cast<size_t>(i)])];
        kept = i + 1;
        if (cum >= cfg.top_p - 1e-12) break;
    }

    double kept_mass = 0.0;
    for (int i = 0; i < kept; ++i) kept_mass += probs[static_cast<size_t>(order[static_cast<size_t>(i)])];
    const double u = rng.uniform() * kept_mass;
    double walk = 0.0;
    for (int i = 0; i < kept; ++i) {
        walk += probs[static_cast<size_t>(order[static_cast<size_t>(i)])];
        if (u < walk) return order[static_cast<size_t>(i)];
    }
    return order[static_cast<size_t>(kept - 1)];
}

std::vector<int> generate(const Model& model, const Sample& prompt, const SampleConfig& cfg,
                          Rng& rng) {
    cfg.validate();
    Graph g;
    g.enabled = false;
    Tensor rows = model.prompt_rows(g, prompt);
    if (rows.rows() + cfg.max_new_tokens > model.cfg.max_seq)
        throw InputError("generate: prompt of " + std::to_string(rows.rows()) + " rows plus " +
                         std::to_string(cfg.max_new_tokens) + " new tokens exceeds max_seq " +
                         std::to_string(model.cfg.max_seq));
    std::vector<int> out;
    for (int t = 0; t < cfg.max_new_tokens; ++t) {
        Tensor logits = model.lm_forward(g, rows);
        const int s = logits.rows(), m = logits.cols();
        std::vector<double> last(static_cast<size_t>(m));
        for (int j = 0; j < m; ++j) last[static_cast<size_t>(j)] = logits.at(s - 1, j);
        const int id = top_p_sample(last, cfg, rng);
        if (id == kEosId) break;
        out.push_back(id);
        rows = concat_rows(g, {rows, model.embed_tokens(g, {id})});
    }
    return out;
}

std::vector<int> generate_greedy(const Model& model, const Sample& prompt, int max_new_tokens) {
    SampleConfig cfg;
    cfg.temperature = 0.0;
    cfg.top_p = 1.0;
    cfg.max_new_tokens = max_new_tokens;
    Rng rng(0);
    return generate(model, prompt, cfg, rng);
}

}  // namespace balab
