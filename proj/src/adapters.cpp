#include "balab/adapters.hpp"

#include <cmath>

#include "balab/rng.hpp"

namespace balab {

const char* family_name(AdapterFamily f) {
    switch (f) {
        case AdapterFamily::bottleneck: return "bottleneck";
        case AdapterFamily::bottleneck_weight_scaled: return "bottleneck_weight_scaled";
        case AdapterFamily::concat: return "concat";
        case AdapterFamily::router_mixture: return "router_mixture";
        case AdapterFamily::loha_plain: return "loha_plain";
        case AdapterFamily::loha_routed: return "loha_routed";
        case AdapterFamily::loha_silu: return "loha_silu";
    }
    return "?";
}

AdapterFamily family_from_string(const std::string& s) {
    for (AdapterFamily f :
         {AdapterFamily::bottleneck, AdapterFamily::bottleneck_weight_scaled, AdapterFamily::concat,
          AdapterFamily::router_mixture, AdapterFamily::loha_plain, AdapterFamily::loha_routed,
          AdapterFamily::loha_silu})
        if (s == family_name(f)) return f;
    throw ConfigError("unknown adapter family '" + s + "'");
}

void AdapterSpec::validate() const {
    if (channel_dim <= 0) throw SpecError("adapter channel_dim must be positive");
    if (bottleneck_dim <= 0) throw SpecError("adapter bottleneck_dim must be positive");
    if (groups <= 0) throw SpecError("adapter groups must be positive");
    if (rank <= 0) throw SpecError("adapter rank must be positive");
    if (route_temperature <= 0.0) throw SpecError("adapter route_temperature must be positive");
    if (bottleneck_dim >= channel_dim)
        throw SpecError("adapter bottleneck_dim " + std::to_string(bottleneck_dim) +
                        " must be smaller than channel_dim " + std::to_string(channel_dim));
    if (bottleneck_dim % groups != 0)
        throw SpecError("adapter groups " + std::to_string(groups) + " must divide bottleneck_dim " +
                        std::to_string(bottleneck_dim));
    if (channel_dim % groups != 0)
        throw SpecError("adapter groups " + std::to_string(groups) + " must divide channel_dim " +
                        std::to_string(channel_dim));
    if (family == AdapterFamily::concat) {
        if (channel_dim % 2 != 0) throw SpecError("concat adapter requires an even channel_dim");
        if ((channel_dim / 2) % groups != 0)
            throw SpecError("concat adapter requires groups to divide channel_dim/2");
    }
}

int64_t count_params(const AdapterSpec& spec) {
    spec.validate();
    const int64_t c = spec.channel_dim, d = spec.bottleneck_dim, k = spec.groups, r = spec.rank;
    const int64_t bottleneck = c * d + d + d * c / k + c;  // dense down + grouped up
    const int64_t router = 2 * c + 2;
    switch (spec.family) {
        case AdapterFamily::bottleneck: return bottleneck;
        case AdapterFamily::bottleneck_weight_scaled: return 2 * bottleneck + router;
        case AdapterFamily::concat: return 2 * (c * d + d + d * (c / 2) / k + c / 2);
        case AdapterFamily::router_mixture: return c * d + d + 2 * (d * c / k + c) + router;
        case AdapterFamily::loha_plain: return 4 * c * r;
        case AdapterFamily::loha_routed: return 8 * c * r + router;
        case AdapterFamily::loha_silu: return 8 * c * r;
    }
    throw SpecError("unreachable adapter family");
}

Tensor grouped_linear(Graph& g, const Tensor& z, const std::vector<Tensor>& blocks,
                      const Tensor& bias) {
    const int k = static_cast<int>(blocks.size());
    if (k == 0) throw SpecError("grouped_linear: no blocks");
    const int c_in = z.cols();
    const int c_out = bias.dim(0);
    if (c_in % k != 0)
        throw SpecError("grouped_linear: " + std::to_string(k) + " groups do not divide input width " +
                        std::to_string(c_in));
    if (c_out % k != 0)
        throw SpecError("grouped_linear: " + std::to_string(k) + " groups do not divide output width " +
                        std::to_string(c_out));
    const int gi = c_in / k, go = c_out / k;
    for (const Tensor& b : blocks)
        if (b.rows() != gi || b.cols() != go)
            throw DimensionError("grouped_linear: block shape " + shape_str(b.shape()) + ", expected [" +
                                 std::to_string(gi) + "x" + std::to_string(go) + "]");
    if (k == 1) return add_rowvec(g, matmul(g, z, blocks[0]), bias);
    std::vector<Tensor> parts;
    parts.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i)
        parts.push_back(matmul(g, slice_cols(g, z, i * gi, (i + 1) * gi), blocks[i]));
    return add_rowvec(g, concat_cols(g, parts), bias);
}

Tensor loha_compose(Graph& g, const Tensor& x1, const Tensor& y1, const Tensor& x2,
                    const Tensor& y2) {
    if (x1.cols() != y1.cols() || x2.cols() != y2.cols() || x1.cols() != x2.cols())
        throw SpecError("loha_compose: factor ranks disagree (" + std::to_string(x1.cols()) + ", " +
                        std::to_string(y1.cols()) + ", " + std::to_string(x2.cols()) + ", " +
                        std::to_string(y2.cols()) + ")");
    Tensor a = matmul(g, x1, transpose(g, y1));
    Tensor b = matmul(g, x2, transpose(g, y2));
    return mul(g, a, b);
}

Tensor route_weights(Graph& g, const Tensor& z, const Tensor& router_w, const Tensor& router_b,
                     double tau) {
    if (tau <= 0.0) throw SpecError("route_weights: temperature must be positive");
    Tensor pooled = mean_rows(g, z);
    Tensor logits = add_rowvec(g, matmul(g, pooled, router_w), router_b);
    return softmax(g, scale(g, logits, 1.0 / tau));
}

namespace {

Rng named_rng(uint64_t seed, const std::string& name) { return Rng(seed ^ fnv1a64(name)); }

Tensor kaiming_uniform(std::vector<int> shape, int fan_in, DType dt, Rng& rng, double gain = 1.0) {
    const double limit = gain * std::sqrt(6.0 / fan_in);
    size_t n = 1;
    for (int e : shape) n *= static_cast<size_t>(e);
    std::vector<double> vals(n);
    for (double& v : vals) v = rng.uniform(-limit, limit);
    return Tensor::from_values(std::move(shape), vals, dt);
}

// factor scale chosen so a fully random composed Hadamard weight lands near
// Kaiming variance 2/c
Tensor loha_factor(int c, int r, DType dt, Rng& rng) {
    const double var = std::sqrt(std::sqrt(2.0 / c) / r);
    const double limit = std::sqrt(3.0 * var);
    std::vector<double> vals(static_cast<size_t>(c) * static_cast<size_t>(r));
    for (double& v : vals) v = rng.uniform(-limit, limit);
    return Tensor::from_values({c, r}, vals, dt);
}

}  // namespace

Adapter Adapter::init(const AdapterSpec& spec, DType dt, uint64_t seed, double down_gain) {
    spec.validate();
    Adapter a;
    (void)down_gain;
    a.spec = spec;
    const int c = spec.channel_dim, d = spec.bottleneck_dim, k = spec.groups, r = spec.rank;

    auto push = [&](const std::string& name, Tensor t) { a.params.emplace_back(name, std::move(t)); };
    auto zeros = [&](std::vector<int> shape) { return Tensor::zeros(std::move(shape), dt); };
    auto kaiming = [&](const std::string& name, std::vector<int> shape, int fan_in) {
        Rng rng = named_rng(seed, name);
        return kaiming_uniform(std::move(shape), fan_in, dt, rng, down_gain);
    };

    // dense down projection c->d plus k zero up blocks mapping d/k -> c_out/k
    auto push_bottleneck_branch = [&](const std::string& prefix, int c_out) {
        push(prefix + "down.w", kaiming(prefix + "down.w", {c, d}, c));
        push(prefix + "down.b", zeros({d}));
        for (int i = 0; i < k; ++i) push(prefix + "up.w" + std::to_string(i), zeros({d / k, c_out / k}));
        push(prefix + "up.b", zeros({c_out}));
    };
    auto push_router = [&] {
        push("router.w", zeros({c, 2}));
        push("router.b", zeros({2}));
    };
    // y1 stays zero so the composed weight starts at zero; the other factors
    // are random so y1 receives gradient from the first step
    auto push_loha_weight = [&](const std::string& prefix, bool live) {
        Rng r1 = named_rng(seed, prefix + "x1");
        Rng r2 = named_rng(seed, prefix + "x2");
        Rng r3 = named_rng(seed, prefix + "y2");
        push(prefix + "x1", loha_factor(c, r, dt, r1));
        if (live) {
            Rng r4 = named_rng(seed, prefix + "y1");
            push(prefix + "y1", loha_factor(c, r, dt, r4));
        } else {
            push(prefix + "y1", zeros({c, r}));
        }
        push(prefix + "x2", loha_factor(c, r, dt, r2));
        push(prefix + "y2", loha_factor(c, r, dt, r3));
    };

    switch (spec.family) {
        case AdapterFamily::bottleneck:
            push_bottleneck_branch("", c);
            break;
        case AdapterFamily::bottleneck_weight_scaled:
            push_bottleneck_branch("b1.", c);
            push_bottleneck_branch("b2.", c);
            push_router();
            break;
        case AdapterFamily::concat:
            push_bottleneck_branch("b1.", c / 2);
            push_bottleneck_branch("b2.", c / 2);
            break;
        case AdapterFamily::router_mixture: {
            push("down.w", kaiming("down.w", {c, d}, c));
            push("down.b", zeros({d}));
            for (int i = 0; i < k; ++i) push("up1.w" + std::to_string(i), zeros({d / k, c / k}));
            push("up1.b", zeros({c}));
            for (int i = 0; i < k; ++i) push("up2.w" + std::to_string(i), zeros({d / k, c / k}));
            push("up2.b", zeros({c}));
            push_router();
            break;
        }
        case AdapterFamily::loha_plain:
            push_loha_weight("", false);
            break;
        case AdapterFamily::loha_routed:
            push_loha_weight("w1.", false);
            push_loha_weight("w2.", false);
            push_router();
            break;
        case AdapterFamily::loha_silu:
            push_loha_weight("inner.", true);
            push_loha_weight("outer.", false);
            break;
    }
    return a;
}

const Tensor& Adapter::p(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    throw ContractError("adapter has no parameter '" + name + "'");
}

int64_t Adapter::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += static_cast<int64_t>(t.numel());
    return n;
}

void Adapter::randomize_all(uint64_t seed) {
    for (auto& [name, t] : params) {
        Rng rng = named_rng(seed, "jiggle." + name);
        if (t.dtype() == DType::f64) {
            auto s = t.mutable_data<double>();
            for (auto& v : s) v = rng.uniform(-0.5, 0.5);
        } else {
            auto s = t.mutable_data<float>();
            for (auto& v : s) v = static_cast<float>(rng.uniform(-0.5, 0.5));
        }
    }
}

namespace {

std::vector<Tensor> up_blocks(const Adapter& a, const std::string& prefix, int k) {
    std::vector<Tensor> blocks;
    blocks.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) blocks.push_back(a.p(prefix + "w" + std::to_string(i)));
    return blocks;
}

Tensor bottleneck_branch(Graph& g, const Adapter& a, const std::string& prefix, const Tensor& z) {
    Tensor h = add_rowvec(g, matmul(g, z, a.p(prefix + "down.w")), a.p(prefix + "down.b"));
    return grouped_linear(g, h, up_blocks(a, prefix + "up.", a.spec.groups), a.p(prefix + "up.b"));
}

}  // namespace

Tensor Adapter::forward(Graph& g, const Tensor& z) const {
    if (z.ndim() != 2 || z.cols() != spec.channel_dim)
        throw DimensionError(std::string("adapter ") + family_name(spec.family) + ": input " +
                             shape_str(z.shape()) + " does not match channel_dim " +
                             std::to_string(spec.channel_dim));
    switch (spec.family) {
        case AdapterFamily::bottleneck:
            return add(g, z, bottleneck_branch(g, *this, "", z));
        case AdapterFamily::bottleneck_weight_scaled: {
            Tensor w = route_weights(g, z, p("router.w"), p("router.b"), spec.route_temperature);
            Tensor b1 = smul(g, bottleneck_branch(g, *this, "b1.", z), index(g, w, 0));
            Tensor b2 = smul(g, bottleneck_branch(g, *this, "b2.", z), index(g, w, 1));
            return add(g, z, add(g, b1, b2));
        }
        case AdapterFamily::concat: {
            Tensor b1 = bottleneck_branch(g, *this, "b1.", z);
            Tensor b2 = bottleneck_branch(g, *this, "b2.", z);
            return add(g, z, concat_cols(g, {b1, b2}));
        }
        case AdapterFamily::router_mixture: {
            Tensor h = add_rowvec(g, matmul(g, z, p("down.w")), p("down.b"));
            Tensor u1 = grouped_linear(g, h, up_blocks(*this, "up1.", spec.groups), p("up1.b"));
            Tensor u2 = grouped_linear(g, h, up_blocks(*this, "up2.", spec.groups), p("up2.b"));
            Tensor w = route_weights(g, z, p("router.w"), p("router.b"), spec.route_temperature);
            return add(g, z, add(g, smul(g, u1, index(g, w, 0)), smul(g, u2, index(g, w, 1))));
        }
        case AdapterFamily::loha_plain: {
            Tensor w = loha_compose(g, p("x1"), p("y1"), p("x2"), p("y2"));
            return add(g, z, matmul(g, z, w));
        }
        case AdapterFamily::loha_routed: {
            Tensor w1 = loha_compose(g, p("w1.x1"), p("w1.y1"), p("w1.x2"), p("w1.y2"));
            Tensor w2 = loha_compose(g, p("w2.x1"), p("w2.y1"), p("w2.x2"), p("w2.y2"));
            Tensor rw = route_weights(g, z, p("router.w"), p("router.b"), spec.route_temperature);
            Tensor m1 = smul(g, matmul(g, z, w1), index(g, rw, 0));
            Tensor m2 = smul(g, matmul(g, z, w2), index(g, rw, 1));
            return add(g, z, add(g, m1, m2));
        }
        case AdapterFamily::loha_silu: {
            Tensor wi = loha_compose(g, p("inner.x1"), p("inner.y1"), p("inner.x2"), p("inner.y2"));
            Tensor wo = loha_compose(g, p("outer.x1"), p("outer.y1"), p("outer.x2"), p("outer.y2"));
            return add(g, matmul(g, silu(g, matmul(g, z, wi)), wo), z);
        }
    }
    throw SpecError("unreachable adapter family");
}

}  // namespace balab
