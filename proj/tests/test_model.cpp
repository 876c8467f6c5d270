#include <doctest.h>

#include <cmath>

#include "balab/model.hpp"
#include "balab/ops.hpp"
#include "balab/rng.hpp"

using namespace balab;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.enc_layers = 4;
    cfg.enc_dim = 16;
    cfg.enc_heads = 2;
    cfg.patch_size = 4;
    cfg.image_size = 8;
    cfg.lm_layers = 2;
    cfg.lm_dim = 16;
    cfg.lm_heads = 2;
    cfg.vocab = 64;
    cfg.max_seq = 48;
    cfg.cls_stride = 2;
    cfg.neck_dim = 8;
    cfg.adapter.bottleneck_dim = 4;
    cfg.adapter.groups = 2;
    return cfg;
}

Sample text_sample() {
    Sample s;
    s.modality = Modality::text_only;
    s.instruction = {token_id("copy"), token_id("a"), token_id("b"), kAnsId};
    s.answer = {token_id("a"), token_id("b")};
    return s;
}

Sample image_sample(const Model& m) {
    Sample s;
    s.modality = Modality::text_image;
    s.image.assign(static_cast<size_t>(m.cfg.image_size) * m.cfg.image_size * 3, 0.0f);
    Rng rng(5);
    for (float& v : s.image) v = static_cast<float>(rng.uniform());
    s.instruction = {token_id("count"), token_id("red"), token_id("?"), kAnsId};
    s.answer = {token_id("1")};
    return s;
}

}  // namespace

TEST_CASE("model config validation names fields") {
    ModelConfig cfg = tiny_config();
    cfg.enc_heads = 3;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("model.enc_heads"), ConfigError);

    cfg = tiny_config();
    cfg.cls_stride = 3;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("model.cls_stride"), ConfigError);

    cfg = tiny_config();
    cfg.neck_dim = 16;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("model.neck_dim"), ConfigError);

    cfg = tiny_config();
    cfg.adapter.groups = 3;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("groups"), ConfigError);
}

TEST_CASE("cls token extraction count follows the stride") {
    // 24 layers, stride 4 -> 6 visual tokens
    ModelConfig cfg = tiny_config();
    cfg.enc_layers = 24;
    cfg.cls_stride = 4;
    CHECK(cfg.num_visual_tokens() == 6);
    Model m = Model::build(cfg, DType::f32, 7);
    Graph g;
    g.enabled = false;
    Sample s = image_sample(m);
    Tensor v = m.encode_image(g, m.image_tensor(s.image));
    CHECK(v.rows() == 6);
    CHECK(v.cols() == cfg.enc_dim);

    // 8 layers, stride 4 -> 2
    ModelConfig cfg8 = tiny_config();
    cfg8.enc_layers = 8;
    cfg8.cls_stride = 4;
    Model m8 = Model::build(cfg8, DType::f32, 7);
    Tensor v8 = m8.encode_image(g, m8.image_tensor(image_sample(m8).image));
    CHECK(v8.rows() == 2);

    CHECK_THROWS_AS(m8.encode_image(g, Tensor::zeros({4, 4, 3}, DType::f32)), InputError);
}

TEST_CASE("visual neck formula") {
    // scalar chain: 2 * silu(1)
    Graph g;
    Tensor v = Tensor::from_values({1, 1}, {1.0}, DType::f64);
    Tensor wv = Tensor::from_values({1, 1}, {1.0}, DType::f64);
    Tensor wt = Tensor::from_values({1, 1}, {2.0}, DType::f64);
    Tensor h = matmul(g, silu(g, matmul(g, v, wv)), wt);
    CHECK(h.item() == doctest::Approx(1.4621171572600098).epsilon(1e-12));

    // zero second projection with bias beta: every row equals beta
    Model m = Model::build(tiny_config(), DType::f32, 3);
    {
        Tensor w = m.neck2.w;
        auto s = w.mutable_data<float>();
        for (auto& x : s) x = 0.0f;
        Tensor b = m.neck2.b;
        auto bs = b.mutable_data<float>();
        for (size_t i = 0; i < bs.size(); ++i) bs[i] = static_cast<float>(i) * 0.25f;
    }
    Graph g2;
    g2.enabled = false;
    Rng rng(11);
    std::vector<double> vin(2 * 16);
    for (auto& x : vin) x = rng.uniform();
    Tensor out = m.visual_neck(g2, Tensor::from_values({2, 16}, vin, DType::f32));
    CHECK(out.rows() == 2);
    CHECK(out.cols() == 16);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 16; ++j) CHECK(out.at(i, j) == doctest::Approx(j * 0.25).epsilon(1e-6));
}

TEST_CASE("fuse row arithmetic and copy contract") {
    Model m = Model::build(tiny_config(), DType::f32, 3);
    Graph g;
    g.enabled = false;
    Rng rng(2);
    std::vector<double> tv(10 * 16);
    for (auto& x : tv) x = rng.uniform();
    Tensor text = Tensor::from_values({10, 16}, tv, DType::f32);
    std::vector<double> vv(2 * 16);
    for (auto& x : vv) x = rng.uniform();
    Tensor visual = Tensor::from_values({2, 16}, vv, DType::f32);

    Tensor both = m.fuse(g, m.prefix_image, &visual, text);
    CHECK(both.rows() == 1 + 2 + 10);
    Tensor text_only = m.fuse(g, m.prefix_text, nullptr, text);
    CHECK(text_only.rows() == 11);

    // fused rows are bitwise copies in order
    for (int j = 0; j < 16; ++j) {
        CHECK(both.at(0, j) == m.prefix_image.at(0, j));
        CHECK(both.at(1, j) == visual.at(0, j));
        CHECK(both.at(3, j) == text.at(0, j));
        CHECK(text_only.at(0, j) == m.prefix_text.at(0, j));
    }

    CHECK_THROWS_AS(m.fuse(g, m.prefix_text, nullptr, Tensor::zeros({3, 8}, DType::f32)),
                    DimensionError);
}

TEST_CASE("lm_forward causality") {
    Model m = Model::build(tiny_config(), DType::f32, 9);
    Graph g;
    g.enabled = false;
    std::vector<int> ids = {2, 3, 4, 5, 6, 7};
    Tensor logits = m.lm_forward(g, m.embed_tokens(g, ids));
    CHECK(logits.rows() == 6);
    CHECK(logits.cols() == 64);

    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        const int j = 1 + rng.uniform_int(5);
        std::vector<int> perturbed = ids;
        perturbed[static_cast<size_t>(j)] = 8 + rng.uniform_int(30);
        Tensor logits2 = m.lm_forward(g, m.embed_tokens(g, perturbed));
        for (int i = 0; i < j; ++i)
            for (int v = 0; v < 64; ++v) CHECK(logits.at(i, v) == logits2.at(i, v));
        double diff = 0.0;
        for (int i = j; i < 6; ++i)
            for (int v = 0; v < 64; ++v) diff += std::abs(logits.at(i, v) - logits2.at(i, v));
        CHECK(diff > 0.0);
    }

    CHECK_THROWS_AS(m.lm_forward(g, Tensor::zeros({49, 16}, DType::f32)), InputError);
}

TEST_CASE("zero-initialized adapters leave the model unchanged end to end") {
    ModelConfig with = tiny_config();
    ModelConfig without = tiny_config();
    without.placement.lm_before_block = false;
    without.placement.vit_before_mha = false;
    without.placement.vit_before_ffn = false;
    Model ma = Model::build(with, DType::f32, 42);
    Model mb = Model::build(without, DType::f32, 42);

    Graph g;
    g.enabled = false;
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        Sample s;
        if (trial % 2 == 0) {
            s = image_sample(ma);
            for (float& v : s.image) v = static_cast<float>(rng.uniform());
        } else {
            s = text_sample();
        }
        Tensor la = ma.lm_forward(g, ma.prompt_rows(g, s));
        Tensor lb = mb.lm_forward(g, mb.prompt_rows(g, s));
        CHECK(bitwise_equal(la, lb));
    }
}

TEST_CASE("partition is disjoint and covers every parameter") {
    Model m = Model::build(tiny_config(), DType::f32, 12);
    TrainablePartition part = m.partition();
    CHECK(part.frozen.size() + part.trainable.size() == m.params.size());
    for (const auto& name : part.trainable) {
        const bool is_adapter = name.find(".ad") != std::string::npos;
        const bool is_head = name.rfind("neck.", 0) == 0 || name.rfind("prefix.", 0) == 0;
        CHECK((is_adapter || is_head));
    }
    CHECK(m.trainable_param_count() + [&] {
        int64_t n = 0;
        for (const auto& p : m.frozen_params()) n += static_cast<int64_t>(p.tensor.numel());
        return n;
    }() == m.total_param_count());
    // desk default: a small trainable fraction
    const double fraction =
        static_cast<double>(m.trainable_param_count()) / static_cast<double>(m.total_param_count());
    CHECK(fraction < 0.3);  // tiny config is less lopsided than the default
}

TEST_CASE("sample_loss contracts") {
    Model m = Model::build(tiny_config(), DType::f32, 4);
    Graph g;
    Sample s = text_sample();
    s.answer.clear();
    CHECK_THROWS_AS(m.sample_loss(g, s), ContractError);

    Sample bad = text_sample();
    bad.modality = Modality::text_image;  // flag contradicts missing image
    CHECK_THROWS_AS(m.sample_loss(g, bad), InputError);
}

TEST_CASE("teacher forcing reaches near-zero loss on a certain model") {
    // force the unembedding toward a delta on the right token via the bias
    Model m = Model::build(tiny_config(), DType::f32, 4);
    Sample s = text_sample();
    // uniform logits: zero unembed weight and bias -> loss = ln(vocab)
    {
        Tensor w = m.unembed.w;
        auto ws = w.mutable_data<float>();
        for (auto& v : ws) v = 0.0f;
    }
    Graph g;
    Tensor loss = m.sample_loss(g, s);
    CHECK(loss.item() == doctest::Approx(std::log(64.0)).epsilon(1e-6));
}

TEST_CASE("gradient of the loss wrt every trainable tensor passes the oracle") {
    ModelConfig cfg = tiny_config();
    cfg.enc_layers = 2;
    cfg.lm_layers = 1;
    cfg.vocab = 40;
    Model m = Model::build(cfg, DType::f64, 21);
    m.jiggle_trainables(77);

    Sample s;
    s.modality = Modality::text_image;
    s.image.assign(static_cast<size_t>(cfg.image_size) * cfg.image_size * 3, 0.0f);
    Rng rng(3);
    for (float& v : s.image) v = static_cast<float>(rng.uniform());
    s.instruction = {token_id("count"), token_id("red"), token_id("?"), kAnsId};
    s.answer = {token_id("2")};

    std::vector<Tensor> targets;
    for (const ParamRef& p : m.trainable_params()) targets.push_back(p.tensor);
    const double err =
        grad_check_params([&](Graph& g) { return m.sample_loss(g, s); }, targets, 1e-5);
    CHECK(err < 1e-4);
}
