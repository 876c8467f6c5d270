#include "balab/gradcheck.hpp"

#include <cmath>

#include "balab/adapters.hpp"
#include "balab/model.hpp"
#include "balab/ops.hpp"
#include "balab/rng.hpp"

namespace balab {

namespace {

Tensor rand_f64(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    size_t n = 1;
    for (int e : shape) n *= static_cast<size_t>(e);
    std::vector<double> vals(n);
    for (double& v : vals) v = rng.uniform(lo, hi);
    return Tensor::from_values(std::move(shape), vals, DType::f64);
}

ModelConfig gradcheck_model_config() {
    ModelConfig cfg;
    cfg.enc_layers = 2;
    cfg.enc_dim = 16;
    cfg.enc_heads = 2;
    cfg.patch_size = 4;
    cfg.image_size = 8;
    cfg.lm_layers = 1;
    cfg.lm_dim = 16;
    cfg.lm_heads = 2;
    cfg.vocab = 40;
    cfg.max_seq = 32;
    cfg.cls_stride = 2;
    cfg.neck_dim = 8;
    cfg.adapter.bottleneck_dim = 4;
    cfg.adapter.groups = 2;
    cfg.adapter.rank = 2;
    return cfg;
}

double check_adapter_family(AdapterFamily family) {
    AdapterSpec spec;
    spec.family = family;
    spec.channel_dim = 8;
    spec.bottleneck_dim = 4;
    spec.groups = 2;
    spec.rank = 2;
    Adapter adapter = Adapter::init(spec, DType::f64, 51);
    adapter.randomize_all(17);
    Rng rng(fnv1a64(family_name(family)));
    Tensor z = rand_f64({3, 8}, rng);
    Tensor m = rand_f64({3, 8}, rng);
    std::vector<Tensor> params;
    for (auto& [name, t] : adapter.params) params.push_back(t);
    return grad_check_params(
        [&](Graph& g) { return sum_all(g, mul(g, adapter.forward(g, z), m)); }, params);
}

// fixture with a deliberately wrong backward rule (drops the x * sigmoid'(x)
// term); exists only as a negative control for the gradcheck command
Tensor silu_wrong_grad(Graph& g, const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    auto xs = x.data<double>();
    auto ys = y.mutable_data<double>();
    for (size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] / (1.0 + std::exp(-xs[i]));
    if (g.enabled && x.traced()) {
        y.set_traced();
        g.record(y, [x, y] {
            if (!x.traced()) return;
            Tensor xm = x;
            xm.ensure_grad();
            auto dx = xm.grad<double>();
            auto dy = y.grad<double>();
            auto xs2 = x.data<double>();
            for (size_t i = 0; i < dx.size(); ++i)
                dx[i] += dy[i] / (1.0 + std::exp(-xs2[i]));
        }, "silu_wrong_grad");
    }
    return y;
}

}  // namespace

GradcheckReport run_gradcheck(bool corrupt_backward) {
    GradcheckReport report;
    auto push = [&](const std::string& name, double err) {
        GradcheckRow row;
        row.component = name;
        row.max_rel_err = err;
        row.pass = err < report.threshold;
        if (!row.pass) report.all_pass = false;
        report.rows.push_back(row);
    };

    for (AdapterFamily family :
         {AdapterFamily::bottleneck, AdapterFamily::bottleneck_weight_scaled, AdapterFamily::concat,
          AdapterFamily::router_mixture, AdapterFamily::loha_plain, AdapterFamily::loha_routed,
          AdapterFamily::loha_silu})
        push(std::string("adapter/") + family_name(family), check_adapter_family(family));

    const ModelConfig cfg = gradcheck_model_config();
    Model model = Model::build(cfg, DType::f64, 2027);
    model.jiggle_trainables(4);

    {
        Rng rng(71);
        Tensor v = rand_f64({2, cfg.enc_dim}, rng);
        Tensor m = rand_f64({2, cfg.lm_dim}, rng);
        std::vector<Tensor> params = {model.neck1.w, model.neck1.b, model.neck2.w, model.neck2.b};
        push("visual_neck", grad_check_params(
                                [&](Graph& g) { return sum_all(g, mul(g, model.visual_neck(g, v), m)); },
                                params));
    }
    {
        Rng rng(72);
        Tensor x = rand_f64({3, cfg.enc_dim}, rng, 0.2, 1.0);
        Tensor m = rand_f64({3, cfg.enc_dim}, rng);
        std::vector<Tensor> params = {x};
        for (auto& [name, t] : model.enc[0].ad_mha->params) params.push_back(t);
        for (auto& [name, t] : model.enc[0].ad_ffn->params) params.push_back(t);
        push("encoder_block",
             grad_check_params(
                 [&](Graph& g) {
                     return sum_all(g, mul(g, model.enc_block_forward(g, model.enc[0], x), m));
                 },
                 params));
    }
    {
        Rng rng(73);
        Tensor x = rand_f64({4, cfg.lm_dim}, rng, 0.2, 1.0);
        Tensor m = rand_f64({4, cfg.lm_dim}, rng);
        std::vector<Tensor> params = {x};
        for (auto& [name, t] : model.lm[0].ad->params) params.push_back(t);
        push("lm_block",
             grad_check_params(
                 [&](Graph& g) {
                     return sum_all(g, mul(g, model.lm_block_forward(g, model.lm[0], x, 0), m));
                 },
                 params));
    }
    {
        Sample s;
        s.modality = Modality::text_image;
        s.image.assign(static_cast<size_t>(cfg.image_size) * cfg.image_size * 3, 0.0f);
        Rng rng(74);
        for (float& v : s.image) v = static_cast<float>(rng.uniform());
        s.instruction = {token_id("count"), token_id("red"), token_id("?"), kAnsId};
        s.answer = {token_id("2")};
        std::vector<Tensor> params;
        for (const ParamRef& p : model.trainable_params()) params.push_back(p.tensor);
        push("end_to_end",
             grad_check_params([&](Graph& g) { return model.sample_loss(g, s); }, params));
    }

    if (corrupt_backward) {
        Rng rng(75);
        Tensor x = rand_f64({3, 4}, rng);
        Tensor m = rand_f64({3, 4}, rng);
        push("corrupt_fixture",
             grad_check_params(
                 [&](Graph& g) { return sum_all(g, mul(g, silu_wrong_grad(g, x), m)); }, {x}));
    }
    return report;
}

}  // namespace balab
